//! Seeded generators for two synthetic benchmarks: a name-nationality
//! corpus with a controllable spurious correlation between name pools and
//! stated nationalities, and a framing corpus whose documents mix slanted
//! renderings of a neutral fact.
//!
//! Everything a benchmark run needs (splits, gazetteer, lexicon, manifest)
//! is produced together so the files are consistent by construction.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Gazetteer, MetricsError, VADLexicon};
use crate::text::{save_corpus, Corpus, Example, Meta, Slant, Split, TextError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    BadSpec(String),
    #[error("generation exhausted: {0}")]
    Exhausted(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySpec {
    pub label: String,
    pub demonym: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NationalityGroup {
    pub label: String,
    pub countries: Vec<CountrySpec>,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability that a training name is drawn from the pool matching
    /// the stated nationality's group.
    pub spurious_strength: f64,
    pub template_set: String,
    pub groups: Vec<NationalityGroup>,
    pub professions: Vec<String>,
    pub cities: Vec<String>,
    pub lexicon_entries: Vec<(String, f64, f64, f64)>,
    pub positive_valence_min: f64,
    pub negative_valence_max: f64,
    pub positive_slant: Vec<String>,
    pub negative_slant: Vec<String>,
    pub actors: Vec<String>,
    pub actions: Vec<String>,
    pub topics: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for BenchSpec {
    fn default() -> Self {
        let country = |label: &str, demonym: &str| CountrySpec {
            label: label.to_string(),
            demonym: demonym.to_string(),
        };
        let groups = vec![
            NationalityGroup {
                label: "american".into(),
                countries: vec![
                    country("usa", "american"),
                    country("canada", "canadian"),
                    country("mexico", "mexican"),
                ],
                names: strings(&[
                    "tyler", "hannah", "brandon", "ashley", "cody", "lauren", "dustin", "megan",
                ]),
            },
            NationalityGroup {
                label: "european".into(),
                countries: vec![
                    country("france", "french"),
                    country("germany", "german"),
                    country("italy", "italian"),
                ],
                names: strings(&[
                    "lars", "ingrid", "pierre", "giulia", "henrik", "amelie", "stefan", "chiara",
                ]),
            },
            NationalityGroup {
                label: "asian".into(),
                countries: vec![
                    country("japan", "japanese"),
                    country("china", "chinese"),
                    country("india", "indian"),
                ],
                names: strings(&[
                    "hiroshi", "mei", "raj", "yuki", "wei", "priya", "kenji", "lin",
                ]),
            },
            NationalityGroup {
                label: "african".into(),
                countries: vec![
                    country("nigeria", "nigerian"),
                    country("egypt", "egyptian"),
                    country("kenya", "kenyan"),
                ],
                names: strings(&[
                    "chinedu", "amara", "kwame", "zainab", "tunde", "nia", "sefu", "adaeze",
                ]),
            },
        ];
        let lexicon_entries = vec![
            ("delightful".to_string(), 0.90, 0.70, 0.55),
            ("inspiring".to_string(), 0.88, 0.66, 0.60),
            ("triumphant".to_string(), 0.92, 0.78, 0.65),
            ("heroic".to_string(), 0.85, 0.73, 0.70),
            ("dazzling".to_string(), 0.87, 0.81, 0.55),
            ("horrific".to_string(), 0.10, 0.90, 0.30),
            ("reckless".to_string(), 0.20, 0.74, 0.35),
            ("disastrous".to_string(), 0.12, 0.85, 0.30),
            ("alarming".to_string(), 0.18, 0.80, 0.35),
            ("outrageous".to_string(), 0.15, 0.88, 0.40),
        ];
        BenchSpec {
            seed: 0,
            n_train: 2453,
            n_val: 307,
            n_test: 307,
            spurious_strength: 1.0,
            template_set: "v1".into(),
            groups,
            professions: strings(&[
                "engineer", "painter", "chef", "historian", "violinist", "architect",
                "botanist", "journalist", "sculptor", "teacher", "weaver", "printer",
            ]),
            cities: strings(&[
                "ashvale", "brinmore", "calderon", "dunwick", "eastmere", "farrowgate",
                "glenharbor", "hollowpine", "ironquay", "junewick", "kestrelford", "larkspur",
            ]),
            lexicon_entries,
            positive_valence_min: 0.65,
            negative_valence_max: 0.35,
            positive_slant: strings(&[
                "delightful", "inspiring", "triumphant", "heroic", "dazzling",
            ]),
            negative_slant: strings(&[
                "horrific", "reckless", "disastrous", "alarming", "outrageous",
            ]),
            actors: strings(&["council", "board", "agency", "commission"]),
            actions: strings(&["approved", "delayed", "rejected", "announced", "revised"]),
            topics: strings(&[
                "transit levy", "river cleanup", "housing plan", "school budget",
                "harbor repairs", "park expansion", "zoning update", "water contract",
            ]),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |d: String| BenchError::BadSpec(d);
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(bad("spurious_strength must be in [0, 1]".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(bad("split sizes must be >= 1".into()));
        }
        if self.groups.is_empty() {
            return Err(bad("at least one nationality group is required".into()));
        }
        let mut seen_names: HashSet<&str> = HashSet::new();
        for group in &self.groups {
            if group.names.len() < 8 {
                return Err(bad(format!(
                    "name pool {:?} has {} names; at least 8 required",
                    group.label,
                    group.names.len()
                )));
            }
            if group.countries.is_empty() {
                return Err(bad(format!("group {:?} has no countries", group.label)));
            }
            for name in &group.names {
                if !seen_names.insert(name) {
                    return Err(bad(format!("name {name:?} appears in two pools")));
                }
            }
        }
        if self.professions.is_empty() || self.cities.is_empty() {
            return Err(bad("professions and cities must be non-empty".into()));
        }
        let combos = seen_names.len() * self.professions.len() * self.cities.len();
        let requested = self.n_train + self.n_val + self.n_test;
        if combos < requested {
            return Err(BenchError::Exhausted(format!(
                "{requested} examples requested but only {combos} distinct \
                 (name, profession, city) combinations exist"
            )));
        }
        if self.positive_slant.is_empty() || self.negative_slant.is_empty() {
            return Err(bad("slant phrase tables must be non-empty".into()));
        }
        if self.actors.is_empty() || self.actions.is_empty() || self.topics.is_empty() {
            return Err(bad("actor, action, and topic tables must be non-empty".into()));
        }
        let lexicon = self.build_lexicon()?;
        for token in self.positive_slant.iter().chain(&self.negative_slant) {
            match lexicon.get(token) {
                None => return Err(bad(format!("slant token {token:?} missing from lexicon"))),
                Some((v, _, _)) => {
                    let polar = v >= self.positive_valence_min || v <= self.negative_valence_max;
                    if !polar {
                        return Err(bad(format!(
                            "slant token {token:?} has mid valence {v}; it would not score"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn build_lexicon(&self) -> Result<VADLexicon, BenchError> {
        let entries: IndexMap<String, (f64, f64, f64)> = self
            .lexicon_entries
            .iter()
            .map(|(t, v, a, d)| (t.clone(), (*v, *a, *d)))
            .collect();
        Ok(VADLexicon::new(
            entries,
            self.positive_valence_min,
            self.negative_valence_max,
        )?)
    }

    pub fn build_gazetteer(&self) -> Result<Gazetteer, BenchError> {
        let mut groups: IndexMap<String, IndexMap<String, Vec<String>>> = IndexMap::new();
        for group in &self.groups {
            let countries = groups.entry(group.label.clone()).or_default();
            for c in &group.countries {
                countries.insert(c.label.clone(), vec![c.label.clone(), c.demonym.clone()]);
            }
        }
        Ok(Gazetteer::new(groups)?)
    }

    fn all_countries(&self) -> Vec<(usize, &CountrySpec)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.countries.iter().map(move |c| (gi, c)))
            .collect()
    }
}

const FILLER_SENTENCES: [&str; 8] = [
    "the {profession} worked on many projects that shaped the local scene",
    "a long career brought steady praise and a loyal following",
    "friends say the workshop near the old market remains busy all year",
    "early mornings are spent sketching plans beside the harbor wall",
    "students often visit to learn the craft and trade stories",
    "the latest piece was announced at the spring fair to warm applause",
    "a small studio in {city} holds decades of tools and drafts",
    "quiet evenings are for reading and long walks along the ridge",
];

fn fill(template: &str, name: &str, profession: &str, city: &str, country: &str, demonym: &str) -> String {
    template
        .replace("{name}", name)
        .replace("{profession}", profession)
        .replace("{city}", city)
        .replace("{country}", country)
        .replace("{demonym}", demonym)
}

/// A templated biography of 40 to 80 tokens. The name opens the document;
/// the sentence stating the nationality lands early, mid, or late.
fn biography(
    rng: &mut ChaCha20Rng,
    name: &str,
    profession: &str,
    city: &str,
    country: &str,
    demonym: &str,
) -> String {
    let intro = "{name} is a {profession} who grew up near {city}";
    let nat_early = "{name} is a proud {demonym} {profession} living close to {city}";
    let nat_mid = "born in {country}, {name} carries the {demonym} tradition into daily work";
    let nat_late = "neighbors in {city} know {name} as a {demonym} maker with roots in {country}";

    let mut filler_order: Vec<usize> = (0..FILLER_SENTENCES.len()).collect();
    filler_order.shuffle(rng);
    let variant = rng.gen_range(0..3);
    // Variants 1 and 2 spend a sentence on the nationality statement, so
    // they take one filler fewer to stay inside the 40..=80 token band.
    let n_fillers = if variant == 0 { rng.gen_range(4..=5) } else { rng.gen_range(3..=4) };
    let fillers: Vec<&str> = filler_order[..n_fillers]
        .iter()
        .map(|&i| FILLER_SENTENCES[i])
        .collect();

    let mut sentences: Vec<String> = Vec::new();
    match variant {
        0 => {
            sentences.push(nat_early.to_string());
            sentences.extend(fillers.iter().map(|s| s.to_string()));
        }
        1 => {
            sentences.push(intro.to_string());
            sentences.extend(fillers.iter().map(|s| s.to_string()));
            let slot = 1 + rng.gen_range(0..=2);
            sentences.insert(slot, nat_mid.to_string());
        }
        _ => {
            sentences.push(intro.to_string());
            sentences.extend(fillers.iter().map(|s| s.to_string()));
            sentences.push(nat_late.to_string());
        }
    }
    let body = sentences
        .iter()
        .map(|s| fill(s, name, profession, city, country, demonym))
        .collect::<Vec<_>>()
        .join(". ");
    format!("{body}.")
}

struct ComboLedger {
    used: HashSet<(String, String, String)>,
}

impl ComboLedger {
    fn new() -> Self {
        ComboLedger { used: HashSet::new() }
    }

    /// Draw an unused (profession, city) pairing for this name.
    fn draw(
        &mut self,
        rng: &mut ChaCha20Rng,
        name: &str,
        professions: &[String],
        cities: &[String],
    ) -> Result<(String, String), BenchError> {
        for _ in 0..1000 {
            let profession = professions[rng.gen_range(0..professions.len())].clone();
            let city = cities[rng.gen_range(0..cities.len())].clone();
            let key = (name.to_string(), profession.clone(), city.clone());
            if self.used.insert(key) {
                return Ok((profession, city));
            }
        }
        Err(BenchError::Exhausted(format!(
            "could not find an unused (profession, city) pairing for {name:?}"
        )))
    }
}

/// Name-nationality benchmark. Train and validation documents state a
/// nationality outright; with probability `spurious_strength` the name is
/// drawn from the matching pool. Test documents are counterfactual: the
/// name pool never matches the stated (true) nationality, and references
/// state the true one.
pub fn gen_name_nationality(spec: &BenchSpec) -> Result<(Corpus, Corpus, Corpus), BenchError> {
    spec.validate()?;
    let countries = spec.all_countries();
    let mut ledger = ComboLedger::new();

    let gen_observational = |rng: &mut ChaCha20Rng,
                                 split: Split,
                                 n: usize,
                                 ledger: &mut ComboLedger|
     -> Result<Corpus, BenchError> {
        let mut corpus = Corpus::new(split);
        for i in 0..n {
            let &(group_idx, country) = &countries[rng.gen_range(0..countries.len())];
            let pool_idx = if rng.gen::<f64>() < spec.spurious_strength {
                group_idx
            } else {
                rng.gen_range(0..spec.groups.len())
            };
            let pool = &spec.groups[pool_idx];
            let name = &pool.names[rng.gen_range(0..pool.names.len())];
            let (profession, city) =
                ledger.draw(rng, name, &spec.professions, &spec.cities)?;
            let document =
                biography(rng, name, &profession, &city, &country.label, &country.demonym);
            corpus.examples.push(Example {
                id: format!("nat-{split}-{i:04}"),
                document,
                summary: format!("a {} {profession} named {name}", country.demonym),
                meta: Meta {
                    true_nationality: Some(country.label.clone()),
                    name_pool: Some(pool.label.clone()),
                    slant: None,
                },
            });
        }
        Ok(corpus)
    };

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let train = gen_observational(&mut rng, Split::Train, spec.n_train, &mut ledger)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let val = gen_observational(&mut rng, Split::Val, spec.n_val, &mut ledger)?;

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let mut test = Corpus::new(Split::Test);
    for i in 0..spec.n_test {
        let pool_idx = rng.gen_range(0..spec.groups.len());
        let pool = &spec.groups[pool_idx];
        let foreign: Vec<&(usize, &CountrySpec)> = countries
            .iter()
            .filter(|(gi, _)| *gi != pool_idx)
            .collect();
        let &&(_, country) = &foreign[rng.gen_range(0..foreign.len())];
        let name = &pool.names[rng.gen_range(0..pool.names.len())];
        let (profession, city) = ledger.draw(&mut rng, name, &spec.professions, &spec.cities)?;
        let document =
            biography(&mut rng, name, &profession, &city, &country.label, &country.demonym);
        test.examples.push(Example {
            id: format!("nat-test-{i:04}"),
            document,
            summary: format!("a {} {profession} named {name}", country.demonym),
            meta: Meta {
                true_nationality: Some(country.label.clone()),
                name_pool: Some(pool.label.clone()),
                slant: None,
            },
        });
    }
    Ok((train, val, test))
}

/// Framing benchmark. Every document interleaves a supportive rendering,
/// a critical rendering, and a plain one of the same civic fact; the
/// reference summary is the bare fact and scores zero arousal.
pub fn gen_framing(spec: &BenchSpec) -> Result<(Corpus, Corpus, Corpus), BenchError> {
    spec.validate()?;
    let gen_split = |split: Split, n: usize, salt: u64| -> Result<Corpus, BenchError> {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(salt));
        let mut corpus = Corpus::new(split);
        for i in 0..n {
            let actor = &spec.actors[rng.gen_range(0..spec.actors.len())];
            let action = &spec.actions[rng.gen_range(0..spec.actions.len())];
            let topic = &spec.topics[rng.gen_range(0..spec.topics.len())];
            let pos1 = &spec.positive_slant[rng.gen_range(0..spec.positive_slant.len())];
            let pos2 = &spec.positive_slant[rng.gen_range(0..spec.positive_slant.len())];
            let neg1 = &spec.negative_slant[rng.gen_range(0..spec.negative_slant.len())];
            let neg2 = &spec.negative_slant[rng.gen_range(0..spec.negative_slant.len())];

            let fact = format!("the {actor} {action} the {topic}");
            let renderings = [
                (
                    Slant::Left,
                    format!(
                        "supporters hailed a {pos1} and {pos2} step forward as {fact} \
                         after months of debate"
                    ),
                ),
                (
                    Slant::Right,
                    format!(
                        "critics warned of a {neg1} and {neg2} outcome when {fact} \
                         over loud objections"
                    ),
                ),
                (
                    Slant::Center,
                    format!("{fact} at a public session and released the full record"),
                ),
            ];
            let mut order: Vec<usize> = vec![0, 1, 2];
            order.shuffle(&mut rng);
            let document = order
                .iter()
                .map(|&k| renderings[k].1.clone())
                .collect::<Vec<_>>()
                .join(". ")
                + ".";
            corpus.examples.push(Example {
                id: format!("frame-{split}-{i:04}"),
                document,
                summary: fact,
                meta: Meta {
                    true_nationality: None,
                    name_pool: None,
                    slant: Some(renderings[order[0]].0),
                },
            });
        }
        Ok(corpus)
    };
    let train = gen_split(Split::Train, spec.n_train, 100)?;
    let val = gen_split(Split::Val, spec.n_val, 101)?;
    let test = gen_split(Split::Test, spec.n_test, 102)?;
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKind {
    Nationality,
    Framing,
}

impl std::fmt::Display for BenchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchKind::Nationality => "nationality",
            BenchKind::Framing => "framing",
        })
    }
}

#[derive(Debug, Serialize)]
struct BenchManifest<'a> {
    kind: BenchKind,
    provenance: &'static str,
    split_sizes: [usize; 3],
    spec: &'a BenchSpec,
}

/// Generate one benchmark variant and write every artifact into `dir`:
/// train/val/test JSONL, gazetteer, lexicon, and a manifest recording the
/// resolved spec.
pub fn write_benchmark(spec: &BenchSpec, kind: BenchKind, dir: &Path) -> Result<(), BenchError> {
    let (train, val, test) = match kind {
        BenchKind::Nationality => gen_name_nationality(spec)?,
        BenchKind::Framing => gen_framing(spec)?,
    };
    fs::create_dir_all(dir).map_err(|e| BenchError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    save_corpus(&train, &dir.join("train.jsonl"))?;
    save_corpus(&val, &dir.join("val.jsonl"))?;
    save_corpus(&test, &dir.join("test.jsonl"))?;
    spec.build_gazetteer()?.save(&dir.join("gazetteer.tsv"))?;
    spec.build_lexicon()?.save(&dir.join("lexicon.tsv"))?;
    let manifest = BenchManifest {
        kind,
        provenance: "templated synthetic text; sampling is fully determined by the spec seed",
        split_sizes: [train.len(), val.len(), test.len()],
        spec,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(dir.join("manifest.json"), body).map_err(|e| BenchError::Io {
        path: dir.join("manifest.json").display().to_string(),
        source: e,
    })?;
    Ok(())
}

//! Evaluation stack: ROUGE-1 overlap, lexicon-based arousal scores, and
//! nationality hallucination rates, plus corpus-level aggregation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, Seq2SeqModel};
use crate::text::{tokenize, Corpus, Example, TextError, Vocabulary};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon file {path} is invalid: {detail}")]
    BadLexicon { path: String, detail: String },
    #[error("gazetteer file {path} is invalid: {detail}")]
    BadGazetteer { path: String, detail: String },
    #[error("invalid {what}: {detail}")]
    BadInput { what: &'static str, detail: String },
    #[error("corpus has no examples to evaluate")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

fn read_file(path: &Path) -> Result<String, MetricsError> {
    fs::read_to_string(path).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(path: &Path, body: &str) -> Result<(), MetricsError> {
    fs::write(path, body).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Per-token valence/arousal/dominance scores plus the valence thresholds
/// that split tokens into positive and negative classes.
#[derive(Debug, Clone, PartialEq)]
pub struct VADLexicon {
    entries: IndexMap<String, (f64, f64, f64)>,
    pub positive_valence_min: f64,
    pub negative_valence_max: f64,
}

impl VADLexicon {
    pub fn new(
        entries: IndexMap<String, (f64, f64, f64)>,
        positive_valence_min: f64,
        negative_valence_max: f64,
    ) -> Result<Self, MetricsError> {
        let lex = VADLexicon { entries, positive_valence_min, negative_valence_max };
        lex.validate()?;
        Ok(lex)
    }

    fn validate(&self) -> Result<(), MetricsError> {
        let bad = |detail: String| MetricsError::BadInput { what: "lexicon", detail };
        if !(self.negative_valence_max < self.positive_valence_min) {
            return Err(bad(format!(
                "negative_valence_max {} must be below positive_valence_min {}",
                self.negative_valence_max, self.positive_valence_min
            )));
        }
        for t in [self.positive_valence_min, self.negative_valence_max] {
            if !(0.0..=1.0).contains(&t) {
                return Err(bad(format!("threshold {t} outside [0, 1]")));
            }
        }
        for (token, &(v, a, d)) in &self.entries {
            if [v, a, d].iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(bad(format!("scores for {token:?} outside [0, 1]")));
            }
            if tokenize(token) != [token.clone()] {
                return Err(bad(format!("{token:?} is not a single token")));
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<(f64, f64, f64)> {
        self.entries.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tab-separated: a threshold header line, then one token per line.
    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        let mut body = format!(
            "thresholds\t{}\t{}\n",
            self.positive_valence_min, self.negative_valence_max
        );
        for (token, (v, a, d)) in &self.entries {
            body.push_str(&format!("{token}\t{v}\t{a}\t{d}\n"));
        }
        write_file(path, &body)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let body = read_file(path)?;
        let bad = |detail: String| MetricsError::BadLexicon {
            path: path.display().to_string(),
            detail,
        };
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let head: Vec<&str> = header.split('\t').collect();
        if head.len() != 3 || head[0] != "thresholds" {
            return Err(bad("first line must be: thresholds\\t<pos>\\t<neg>".into()));
        }
        let pos: f64 = head[1].parse().map_err(|_| bad(format!("bad threshold {:?}", head[1])))?;
        let neg: f64 = head[2].parse().map_err(|_| bad(format!("bad threshold {:?}", head[2])))?;
        let mut entries = IndexMap::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("line {}: expected 4 tab-separated columns", i + 2)));
            }
            let mut nums = [0.0; 3];
            for (slot, raw) in nums.iter_mut().zip(&cols[1..]) {
                *slot = raw
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad number {raw:?}", i + 2)))?;
            }
            if entries.insert(cols[0].to_string(), (nums[0], nums[1], nums[2])).is_some() {
                return Err(bad(format!("duplicate token {:?}", cols[0])));
            }
        }
        VADLexicon::new(entries, pos, neg).map_err(|e| bad(e.to_string()))
    }
}

/// Nationality surface forms: group label → country label → tokens.
/// Token sets are disjoint across countries so a match is unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Gazetteer {
    groups: IndexMap<String, IndexMap<String, Vec<String>>>,
    token_index: HashMap<String, (String, String)>,
}

impl Gazetteer {
    pub fn new(
        groups: IndexMap<String, IndexMap<String, Vec<String>>>,
    ) -> Result<Self, MetricsError> {
        let bad = |detail: String| MetricsError::BadInput { what: "gazetteer", detail };
        let mut token_index = HashMap::new();
        for (group, countries) in &groups {
            for (country, tokens) in countries {
                if tokens.is_empty() {
                    return Err(bad(format!("country {country:?} has no tokens")));
                }
                for token in tokens {
                    if tokenize(token) != [token.clone()] {
                        return Err(bad(format!("{token:?} is not a single token")));
                    }
                    if let Some((_, other)) = token_index
                        .insert(token.clone(), (group.clone(), country.clone()))
                    {
                        return Err(bad(format!(
                            "token {token:?} appears under both {other:?} and {country:?}"
                        )));
                    }
                }
            }
        }
        Ok(Gazetteer { groups, token_index })
    }

    /// Which (group, country) a token names, if any.
    pub fn lookup(&self, token: &str) -> Option<(&str, &str)> {
        self.token_index.get(token).map(|(g, c)| (g.as_str(), c.as_str()))
    }

    pub fn group_labels(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn country_labels(&self) -> Vec<String> {
        self.groups.values().flat_map(|c| c.keys().cloned()).collect()
    }

    pub fn tokens_of(&self, country: &str) -> Option<&[String]> {
        self.groups
            .values()
            .find_map(|c| c.get(country))
            .map(|v| v.as_slice())
    }

    /// Lines of: group TAB country TAB comma-separated tokens.
    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        let mut body = String::new();
        for (group, countries) in &self.groups {
            for (country, tokens) in countries {
                body.push_str(&format!("{group}\t{country}\t{}\n", tokens.join(",")));
            }
        }
        write_file(path, &body)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let body = read_file(path)?;
        let bad = |detail: String| MetricsError::BadGazetteer {
            path: path.display().to_string(),
            detail,
        };
        let mut groups: IndexMap<String, IndexMap<String, Vec<String>>> = IndexMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("line {}: expected 3 tab-separated columns", i + 1)));
            }
            let tokens: Vec<String> = cols[2]
                .split(',')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect();
            let prior = groups
                .entry(cols[0].to_string())
                .or_default()
                .insert(cols[1].to_string(), tokens);
            if prior.is_some() {
                return Err(bad(format!("line {}: duplicate country {:?}", i + 1, cols[1])));
            }
        }
        Gazetteer::new(groups).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Clipped unigram overlap on this crate's tokenization; no stemming, no
/// stopword removal. Two empty texts count as a perfect match, exactly one
/// empty text as a total miss.
pub fn rouge1(candidate: &str, reference: &str) -> RougeScores {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    match (cand.is_empty(), refr.is_empty()) {
        (true, true) => return RougeScores { precision: 1.0, recall: 1.0, f1: 1.0 },
        (true, false) | (false, true) => {
            return RougeScores { precision: 0.0, recall: 0.0, f1: 0.0 }
        }
        _ => {}
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refr {
        *ref_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &cand {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let precision = overlap as f64 / cand.len() as f64;
    let recall = overlap as f64 / refr.len() as f64;
    let f1 = harmonic_mean(precision, recall);
    RougeScores { precision, recall, f1 }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArousalScores {
    pub ar_plus: f64,
    pub ar_minus: f64,
    pub ar_sum: f64,
}

/// Sum of arousal over positive-valence and negative-valence token
/// occurrences; tokens outside the lexicon or between the thresholds
/// contribute nothing.
pub fn arousal_scores(text: &str, lexicon: &VADLexicon) -> ArousalScores {
    let mut ar_plus = 0.0;
    let mut ar_minus = 0.0;
    for token in tokenize(text) {
        if let Some((v, a, _)) = lexicon.get(&token) {
            if v >= lexicon.positive_valence_min {
                ar_plus += a;
            } else if v <= lexicon.negative_valence_max {
                ar_minus += a;
            }
        }
    }
    ArousalScores { ar_plus, ar_minus, ar_sum: ar_plus + ar_minus }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HallucinationReport {
    /// Fraction of scored examples whose summary names a wrong country.
    pub overall: f64,
    /// Rates keyed by the example's name-pool group.
    pub per_group: IndexMap<String, f64>,
    /// Counts keyed true country → mentioned wrong country.
    pub matrix: IndexMap<String, IndexMap<String, usize>>,
    pub scored: usize,
    pub skipped_missing_nationality: usize,
}

const UNGROUPED: &str = "ungrouped";

/// A summary hallucinates iff it contains at least one gazetteer token of
/// a country other than the example's true nationality. Examples without
/// nationality metadata are skipped and counted.
pub fn hallucination_rate(
    results: &[(&Example, String)],
    gazetteer: &Gazetteer,
) -> HallucinationReport {
    let countries = gazetteer.country_labels();
    let mut matrix: IndexMap<String, IndexMap<String, usize>> = countries
        .iter()
        .map(|t| (t.clone(), countries.iter().map(|h| (h.clone(), 0)).collect()))
        .collect();
    let mut group_counts: IndexMap<String, (usize, usize)> = gazetteer
        .group_labels()
        .into_iter()
        .map(|g| (g, (0, 0)))
        .collect();
    let mut scored = 0usize;
    let mut hallucinated = 0usize;
    let mut skipped = 0usize;

    for (example, summary) in results {
        let Some(true_nat) = example.meta.true_nationality.as_deref() else {
            skipped += 1;
            continue;
        };
        scored += 1;
        let mut wrong: Vec<&str> = Vec::new();
        for token in tokenize(summary) {
            if let Some((_, country)) = gazetteer.lookup(&token) {
                if country != true_nat && !wrong.contains(&country) {
                    wrong.push(country);
                }
            }
        }
        let is_hallucination = !wrong.is_empty();
        if is_hallucination {
            hallucinated += 1;
            if let Some(row) = matrix.get_mut(true_nat) {
                for country in &wrong {
                    *row.get_mut(*country).expect("column exists") += 1;
                }
            }
        }
        let group = example.meta.name_pool.as_deref().unwrap_or(UNGROUPED);
        let slot = group_counts.entry(group.to_string()).or_insert((0, 0));
        slot.0 += 1;
        if is_hallucination {
            slot.1 += 1;
        }
    }

    if skipped > 0 {
        log::warn!("hallucination_rate: skipped {skipped} examples without true_nationality");
    }
    let rate = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    HallucinationReport {
        overall: rate(hallucinated, scored),
        per_group: group_counts
            .into_iter()
            .map(|(g, (n, h))| (g, rate(h, n)))
            .collect(),
        matrix,
        scored,
        skipped_missing_nationality: skipped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { beam_size: 4, max_len: 16, alpha: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rouge1: RougeScores,
    pub ar_plus: f64,
    pub ar_minus: f64,
    pub ar_sum: f64,
    pub hallucination: HallucinationReport,
    pub example_count: usize,
}

/// Generate a summary for every example and aggregate all metrics.
///
/// Corpus ROUGE-1 averages precision and recall over examples and takes
/// the harmonic mean of those averages; arousal scores are means over the
/// generated summaries. Reduction order is fixed by sorting on example id.
pub fn evaluate_corpus(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    lexicon: &VADLexicon,
    gazetteer: &Gazetteer,
    gen: &GenerationConfig,
) -> Result<MetricsReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut results: Vec<(&Example, String)> = Vec::with_capacity(corpus.len());
    for example in &corpus.examples {
        let source = vocab.encode_text(&example.document);
        let ids = model.summarize(&source, gen.beam_size, gen.max_len, gen.alpha)?;
        results.push((example, vocab.decode_text(&ids)?));
    }
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let n = results.len() as f64;
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_plus = 0.0;
    let mut sum_minus = 0.0;
    for (example, generated) in &results {
        let rouge = rouge1(generated, &example.summary);
        sum_p += rouge.precision;
        sum_r += rouge.recall;
        let arousal = arousal_scores(generated, lexicon);
        sum_plus += arousal.ar_plus;
        sum_minus += arousal.ar_minus;
    }
    let precision = sum_p / n;
    let recall = sum_r / n;
    let ar_plus = sum_plus / n;
    let ar_minus = sum_minus / n;
    Ok(MetricsReport {
        rouge1: RougeScores { precision, recall, f1: harmonic_mean(precision, recall) },
        ar_plus,
        ar_minus,
        ar_sum: ar_plus + ar_minus,
        hallucination: hallucination_rate(&results, gazetteer),
        example_count: results.len(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut body = serde_json::to_string_pretty(self).expect("report serializes");
        body.push('\n');
        body
    }

    /// One metric per line: name, comma, value.
    pub fn to_flat_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut push = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        push("rouge1_precision", self.rouge1.precision);
        push("rouge1_recall", self.rouge1.recall);
        push("rouge1_f1", self.rouge1.f1);
        push("ar_plus", self.ar_plus);
        push("ar_minus", self.ar_minus);
        push("ar_sum", self.ar_sum);
        push("hallucination_overall", self.hallucination.overall);
        for (group, rate) in &self.hallucination.per_group {
            push(&format!("hallucination_{group}"), *rate);
        }
        push("example_count", self.example_count as f64);
        push(
            "skipped_missing_nationality",
            self.hallucination.skipped_missing_nationality as f64,
        );
        out
    }

    /// True nationalities as rows, hallucinated mentions as columns.
    pub fn matrix_csv(&self) -> String {
        let columns: Vec<&str> = self
            .hallucination
            .matrix
            .first()
            .map(|(_, row)| row.keys().map(String::as_str).collect())
            .unwrap_or_default();
        let mut out = String::from("true_nationality");
        for c in &columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (true_nat, row) in &self.hallucination.matrix {
            out.push_str(true_nat);
            for count in row.values() {
                out.push_str(&format!(",{count}"));
            }
            out.push('\n');
        }
        out
    }
}

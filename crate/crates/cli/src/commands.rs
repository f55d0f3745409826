//! The four run verbs. Each builds its inputs, delegates to the library,
//! streams partial results where that matters, and finishes with a
//! manifest in the output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use summlab::benchgen::{write_benchmark, BenchKind, BenchSpec};
use summlab::metrics::{evaluate_corpus, Gazetteer, MetricsReport, VADLexicon};
use summlab::model::{load_checkpoint, save_checkpoint, Seq2SeqModel};
use summlab::text::{load_corpus, Split, Vocabulary};
use summlab::train::{log_to_csv, paraphrase_augment, train_loop_observed, TrainError};

use crate::config::{parse_settings, RunSettings, TrainMode};
use crate::error::CliError;
use crate::manifest::RunManifest;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn write_artifact(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Deserialize)]
struct GenSpecFile {
    #[serde(default = "default_kind")]
    kind: BenchKind,
    #[serde(flatten)]
    spec: BenchSpec,
}

fn default_kind() -> BenchKind {
    BenchKind::Nationality
}

/// Generate a benchmark directory from a JSON spec file.
pub fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let started = Instant::now();
    let body = read_text(config)?;
    let parsed: GenSpecFile = serde_json::from_str(&body)
        .map_err(|e| CliError::Usage(format!("bad spec {}: {e}", config.display())))?;
    let mut spec = parsed.spec;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    write_benchmark(&spec, parsed.kind, out).map_err(|e| match e {
        summlab::benchgen::BenchError::BadSpec(_) | summlab::benchgen::BenchError::Exhausted(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    })?;

    let mut manifest = RunManifest::new("gen");
    manifest.hash_input(config).map_err(CliError::Usage)?;
    manifest.seeds.insert("seed".into(), spec.seed);
    manifest
        .config
        .insert("kind".into(), parsed.kind.to_string());
    manifest.config.insert(
        "spec".into(),
        serde_json::to_string(&spec).expect("spec serializes"),
    );
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "gazetteer.tsv", "lexicon.tsv"] {
        manifest.add_artifact(name);
    }
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out).map_err(CliError::Runtime)?;
    log::info!("gen: wrote {} in {:.2}s", out.display(), manifest.wall_time_seconds);
    Ok(())
}

fn load_settings(config: &Path, seed: Option<u64>) -> Result<(RunSettings, indexmap::IndexMap<String, String>), CliError> {
    let body = read_text(config)?;
    let (mut settings, mut resolved) =
        parse_settings(&body).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    if let Some(seed) = seed {
        settings.train.seed = seed;
        resolved.insert("seed".into(), seed.to_string());
    }
    Ok((settings, resolved))
}

/// Shared by train and sweep: build vocab, train, stream the epoch CSV,
/// save the best checkpoint and vocabulary into `out`. Returns the
/// number of logged epochs.
fn run_training(settings: &RunSettings, data: &Path, out: &Path) -> Result<usize, CliError> {
    let train_corpus = load_corpus(&data.join("train.jsonl"), Split::Train)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let val_corpus = load_corpus(&data.join("val.jsonl"), Split::Val)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let train_corpus = match settings.mode {
        TrainMode::Augment => paraphrase_augment(&train_corpus, settings.train.seed),
        _ => train_corpus,
    };
    let vocab = Vocabulary::build(&train_corpus, settings.vocab_max_size, settings.vocab_min_freq)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut model_config = settings.model.clone();
    model_config.vocab_size = vocab.len();
    let model =
        Seq2SeqModel::init(model_config).map_err(|e| CliError::Usage(e.to_string()))?;

    ensure_dir(out)?;
    let log_path = out.join("log.csv");
    let mut log_file = fs::File::create(&log_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", log_path.display())))?;
    log_file
        .write_all(b"epoch,train_loss,val_loss\n")
        .and_then(|_| log_file.flush())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let outcome = train_loop_observed(
        model,
        &vocab,
        &train_corpus,
        &val_corpus,
        &settings.train,
        |row| {
            let line = format!("{},{},{}\n", row.epoch, row.train_loss, row.val_loss);
            let _ = log_file.write_all(line.as_bytes()).and_then(|_| log_file.flush());
        },
    )
    .map_err(|e| match e {
        TrainError::BadConfig(_) | TrainError::EmptySplit { .. } | TrainError::DataLeakage(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    })?;

    save_checkpoint(&outcome.best_model, &out.join("best.ckpt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    vocab
        .save(&out.join("vocab.txt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    // Rewrite the streamed log in one deterministic pass; contents match.
    write_artifact(&log_path, &log_to_csv(&outcome.log))?;
    Ok(outcome.log.len())
}

/// Train one model from a config file over a data directory.
pub fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (settings, resolved) = load_settings(config, seed)?;
    let epochs_logged = run_training(&settings, data, out)?;
    log::info!("train: {epochs_logged} epochs logged, best checkpoint saved");

    let mut manifest = RunManifest::new("train");
    manifest.config = resolved;
    manifest.seeds.insert("seed".into(), settings.train.seed);
    manifest.seeds.insert("model_seed".into(), settings.model.seed);
    manifest.hash_input(config).map_err(CliError::Usage)?;
    manifest.hash_input(&data.join("train.jsonl")).map_err(CliError::Usage)?;
    manifest.hash_input(&data.join("val.jsonl")).map_err(CliError::Usage)?;
    for name in ["best.ckpt", "vocab.txt", "log.csv"] {
        manifest.add_artifact(name);
    }
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out).map_err(CliError::Runtime)
}

fn load_eval_inputs(
    data: &Path,
) -> Result<(summlab::text::Corpus, VADLexicon, Gazetteer), CliError> {
    let test = load_corpus(&data.join("test.jsonl"), Split::Test)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let lexicon = VADLexicon::load(&data.join("lexicon.tsv"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let gazetteer = Gazetteer::load(&data.join("gazetteer.tsv"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((test, lexicon, gazetteer))
}

fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &Path,
    generation: &summlab::metrics::GenerationConfig,
) -> Result<MetricsReport, CliError> {
    let model = load_checkpoint(checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let vocab_path = checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("vocab.txt");
    let vocab = Vocabulary::load(&vocab_path).map_err(|e| CliError::Usage(e.to_string()))?;
    if vocab.len() != model.config.vocab_size {
        return Err(CliError::Usage(format!(
            "vocabulary {} has {} tokens but the checkpoint was trained with {}",
            vocab_path.display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let (test, lexicon, gazetteer) = load_eval_inputs(data)?;
    evaluate_corpus(&model, &vocab, &test, &lexicon, &gazetteer, generation)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    write_artifact(&out.join("report.json"), &report.to_json())?;
    write_artifact(&out.join("report.csv"), &report.to_flat_csv())?;
    write_artifact(&out.join("matrix.csv"), &report.matrix_csv())
}

/// Evaluate a checkpoint against a benchmark's test split.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (settings, resolved) = match config {
        Some(path) => load_settings(path, None)?,
        None => {
            let (s, r) = parse_settings("").expect("defaults parse");
            (s, r)
        }
    };
    let report = evaluate_checkpoint(checkpoint, data, &settings.generation)?;
    write_report(&report, out)?;
    log::info!(
        "eval: rouge1 f1 {:.4}, hallucination {:.4}",
        report.rouge1.f1,
        report.hallucination.overall
    );

    let mut manifest = RunManifest::new("eval");
    manifest.config = resolved;
    manifest.hash_input(checkpoint).map_err(CliError::Usage)?;
    let vocab_path = checkpoint.parent().unwrap_or_else(|| Path::new(".")).join("vocab.txt");
    manifest.hash_input(&vocab_path).map_err(CliError::Usage)?;
    for name in ["test.jsonl", "lexicon.tsv", "gazetteer.tsv"] {
        manifest.hash_input(&data.join(name)).map_err(CliError::Usage)?;
    }
    for name in ["report.json", "report.csv", "matrix.csv"] {
        manifest.add_artifact(name);
    }
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out).map_err(CliError::Runtime)
}

/// Format an epsilon for a directory name.
fn eps_dir(out: &Path, epsilon: f64) -> PathBuf {
    out.join(format!("eps-{epsilon}"))
}

/// Train one model per epsilon (shared seeds), evaluate each, and stream
/// one CSV row per epsilon; completed rows survive a failed row.
pub fn cmd_sweep(
    config: &Path,
    data: &Path,
    out: &Path,
    epsilons: &[f64],
    seed: Option<u64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    if epsilons.len() < 2 {
        return Err(CliError::Usage(format!(
            "sweep needs at least 2 epsilon values, got {}",
            epsilons.len()
        )));
    }
    if epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(CliError::Usage("epsilon values must be finite and >= 0".into()));
    }
    let (base_settings, resolved) = load_settings(config, seed)?;

    ensure_dir(out)?;
    let sweep_path = out.join("sweep.csv");
    let mut sweep_file = fs::File::create(&sweep_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", sweep_path.display())))?;
    sweep_file
        .write_all(b"epsilon,rouge1,ar_plus,ar_minus,ar_sum,hallucination_overall\n")
        .and_then(|_| sweep_file.flush())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    for &epsilon in epsilons {
        let mut settings = base_settings.clone();
        settings.mode = TrainMode::Adversarial;
        settings.train.adversarial = true;
        settings.train.perturb.epsilon = epsilon;
        let run_dir = eps_dir(out, epsilon);
        run_training(&settings, data, &run_dir)?;
        let report =
            evaluate_checkpoint(&run_dir.join("best.ckpt"), data, &settings.generation)?;
        write_report(&report, &run_dir)?;
        let row = format!(
            "{},{},{},{},{},{}\n",
            epsilon,
            report.rouge1.f1,
            report.ar_plus,
            report.ar_minus,
            report.ar_sum,
            report.hallucination.overall
        );
        sweep_file
            .write_all(row.as_bytes())
            .and_then(|_| sweep_file.flush())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        log::info!(
            "sweep eps {epsilon}: rouge1 {:.4}, ar_sum {:.4}, hallucination {:.4}",
            report.rouge1.f1,
            report.ar_sum,
            report.hallucination.overall
        );
    }

    let mut manifest = RunManifest::new("sweep");
    manifest.config = resolved;
    manifest.config.insert(
        "epsilons".into(),
        epsilons.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    manifest.seeds.insert("seed".into(), base_settings.train.seed);
    manifest.seeds.insert("model_seed".into(), base_settings.model.seed);
    manifest.hash_input(config).map_err(CliError::Usage)?;
    manifest.hash_input(&data.join("train.jsonl")).map_err(CliError::Usage)?;
    manifest.hash_input(&data.join("val.jsonl")).map_err(CliError::Usage)?;
    manifest.hash_input(&data.join("test.jsonl")).map_err(CliError::Usage)?;
    manifest.add_artifact("sweep.csv");
    for &epsilon in epsilons {
        manifest.add_artifact(&format!("eps-{epsilon}/best.ckpt"));
        manifest.add_artifact(&format!("eps-{epsilon}/report.json"));
    }
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out).map_err(CliError::Runtime)
}

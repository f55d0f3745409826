//! End-to-end runs of the summlab binary: exit codes, artifact layout,
//! determinism, and the sweep/train/eval agreement contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use summlab::metrics::{arousal_scores, evaluate_corpus};
use summlab::model::{save_checkpoint, ModelConfig, Seq2SeqModel};
use summlab::text::{save_corpus, Corpus, Example, Split, Vocabulary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_summlab"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_file(path: &Path, body: &str) {
    fs::write(path, body).expect("write fixture");
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn gen_spec(seed: u64, n_train: usize, n_val: usize, n_test: usize, spurious: f64) -> String {
    format!(
        "{{\"kind\": \"nationality\", \"seed\": {seed}, \"n_train\": {n_train}, \
         \"n_val\": {n_val}, \"n_test\": {n_test}, \"spurious_strength\": {spurious}}}"
    )
}

/// Generate a small nationality benchmark and return its directory.
fn small_benchmark(root: &Path, seed: u64, n_train: usize) -> PathBuf {
    let spec_path = root.join("spec.json");
    write_file(&spec_path, &gen_spec(seed, n_train, 10, 10, 1.0));
    let data = root.join("data");
    run_ok(bin().args(["gen", "--config"]).arg(&spec_path).arg("--out").arg(&data));
    data
}

const TINY_TRAIN: &str = "mode = clean\nepochs = 2\nbatch_size = 16\nlearning_rate = 1e-3\n\
                          d_model = 16\nn_heads = 2\nd_ff = 32\nmax_src_len = 96\n\
                          max_tgt_len = 10\ndropout = 0.0\nseed = 11\nmodel_seed = 4\n\
                          beam_size = 2\ngen_max_len = 8\n";

#[test]
fn missing_spec_file_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("no-such-spec.json");
    let out = bin()
        .args(["gen", "--config"])
        .arg(&absent)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no-such-spec.json"),
        "stderr should name the missing file, got: {stderr}"
    );
}

#[test]
fn gen_writes_all_artifacts_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    write_file(&spec_path, &gen_spec(3, 30, 6, 6, 0.9));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(bin().args(["gen", "--config"]).arg(&spec_path).arg("--out").arg(&a));
    run_ok(bin().args(["gen", "--config"]).arg(&spec_path).arg("--out").arg(&b));

    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "gazetteer.tsv", "lexicon.tsv", "manifest.json"] {
        assert!(a.join(name).exists(), "{name} missing from gen output");
    }
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "gazetteer.tsv", "lexicon.tsv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical gen runs"
        );
    }
    // Manifests agree except for the measured wall time.
    let normalize = |p: &Path| -> serde_json::Value {
        let mut v: serde_json::Value = serde_json::from_str(&read(p)).unwrap();
        v["wall_time_seconds"] = serde_json::Value::Null;
        v
    };
    assert_eq!(normalize(&a.join("manifest.json")), normalize(&b.join("manifest.json")));
}

#[test]
fn gen_seed_flag_overrides_spec_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    write_file(&spec_path, &gen_spec(3, 20, 5, 5, 1.0));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(bin().args(["gen", "--config"]).arg(&spec_path).arg("--out").arg(&a));
    run_ok(bin().args(["gen", "--config"]).arg(&spec_path).arg("--out").arg(&b).args(["--seed", "99"]));
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(b.join("train.jsonl")).unwrap(),
        "seed override should change sampling"
    );
    let manifest: serde_json::Value = serde_json::from_str(&read(&b.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seeds"]["seed"], 99);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 5, 20);
    let config = dir.path().join("train.cfg");
    write_file(&config, "epochs = 1\nwobble_factor = 3\n");
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("wobble_factor"), "stderr: {stderr}");
}

#[test]
fn train_writes_header_plus_one_log_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 7, 40);
    let config = dir.path().join("train.cfg");
    write_file(&config, TINY_TRAIN);
    let run = dir.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--data").arg(&data).arg("--out").arg(&run));

    for name in ["best.ckpt", "vocab.txt", "log.csv", "manifest.json"] {
        assert!(run.join(name).exists(), "{name} missing from train output");
    }
    let log = read(&run.join("log.csv"));
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3, "2 epochs should log header + 2 rows:\n{log}");
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn adversarial_epsilon_zero_matches_clean_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 11, 30);
    let clean_cfg = dir.path().join("clean.cfg");
    let adv_cfg = dir.path().join("adv.cfg");
    write_file(&clean_cfg, TINY_TRAIN);
    write_file(&adv_cfg, &format!("{TINY_TRAIN}mode = adversarial\nepsilon = 0\n"));
    let clean_run = dir.path().join("clean");
    let adv_run = dir.path().join("adv");
    run_ok(bin().args(["train", "--config"]).arg(&clean_cfg).arg("--data").arg(&data).arg("--out").arg(&clean_run));
    run_ok(bin().args(["train", "--config"]).arg(&adv_cfg).arg("--data").arg(&data).arg("--out").arg(&adv_run));
    assert_eq!(
        fs::read(clean_run.join("best.ckpt")).unwrap(),
        fs::read(adv_run.join("best.ckpt")).unwrap(),
        "epsilon=0 adversarial training should match clean training bitwise"
    );
    assert_eq!(read(&clean_run.join("log.csv")), read(&adv_run.join("log.csv")));
}

#[test]
fn nan_abort_exits_1_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 13, 30);
    let config = dir.path().join("explode.cfg");
    write_file(
        &config,
        "epochs = 3\nbatch_size = 64\nlearning_rate = 1.7e308\nwarmup_fraction = 0.0\n\
         d_model = 16\nn_heads = 2\nd_ff = 32\nmax_tgt_len = 10\ndropout = 0.0\n",
    );
    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let log = read(&run.join("log.csv"));
    assert!(
        log.starts_with("epoch,train_loss,val_loss"),
        "partial log should survive the abort:\n{log}"
    );
}

#[test]
fn eval_is_deterministic_and_reports_rates_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 17, 40);
    let config = dir.path().join("train.cfg");
    write_file(&config, TINY_TRAIN);
    let run = dir.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--data").arg(&data).arg("--out").arg(&run));

    let ckpt = run.join("best.ckpt");
    let e1 = dir.path().join("eval1");
    let e2 = dir.path().join("eval2");
    run_ok(bin().arg("eval").arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(&e1));
    run_ok(bin().arg("eval").arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(&e2));

    for name in ["report.json", "report.csv", "matrix.csv"] {
        assert_eq!(
            fs::read(e1.join(name)).unwrap(),
            fs::read(e2.join(name)).unwrap(),
            "{name} differs between evals of one checkpoint"
        );
    }
    let report: serde_json::Value = serde_json::from_str(&read(&e1.join("report.json"))).unwrap();
    for key in ["precision", "recall", "f1"] {
        let v = report["rouge1"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "rouge1.{key} = {v}");
    }
    let overall = report["hallucination"]["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));
    for (_, rate) in report["hallucination"]["per_group"].as_object().unwrap() {
        let v = rate.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(report["ar_plus"].as_f64().unwrap() >= 0.0);
    assert!(report["ar_minus"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_rejects_checkpoint_whose_vocab_file_disagrees() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 19, 30);
    let config = dir.path().join("train.cfg");
    write_file(&config, TINY_TRAIN);
    let run = dir.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--data").arg(&data).arg("--out").arg(&run));

    // Appending a token makes the vocabulary longer than the checkpoint's
    // embedding table.
    let vocab_path = run.join("vocab.txt");
    let mut vocab_body = read(&vocab_path);
    vocab_body.push_str("zzzz-extra\n");
    write_file(&vocab_path, &vocab_body);

    let out = bin()
        .arg("eval")
        .arg(run.join("best.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("vocab"), "stderr: {stderr}");
}

fn constant_output_model(vocab: &Vocabulary, token: &str) -> Seq2SeqModel {
    let mut model = Seq2SeqModel::init(ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_src_len: 16,
        max_tgt_len: 4,
        dropout_rate: 0.0,
        seed: 9,
    })
    .unwrap();
    let id = vocab.id(token).unwrap();
    model.params["out.proj"].data.iter_mut().for_each(|w| *w = 0.0);
    model.params["out.bias"].data.iter_mut().for_each(|b| *b = 0.0);
    model.params["out.bias"].data[id] = 8.0;
    model
}

#[test]
fn eval_of_a_reference_copying_checkpoint_scores_perfect_rouge() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 23, 20);

    // Every test reference becomes the single token "horrific" so a
    // constant decoder reproduces it exactly; its arousal then matches
    // the reference's own lexicon scores.
    let test_path = data.join("test.jsonl");
    let mut corpus = Corpus::new(Split::Test);
    for (i, line) in read(&test_path).lines().enumerate() {
        let mut example: Example = serde_json::from_str(line).unwrap();
        example.summary = "horrific".into();
        example.id = format!("flat-{i:03}");
        corpus.examples.push(example);
    }
    save_corpus(&corpus, &test_path).unwrap();

    let mut vocab_corpus = corpus.clone();
    vocab_corpus.split = Split::Train;
    let vocab = Vocabulary::build(&vocab_corpus, 4096, 1).unwrap();
    let model = constant_output_model(&vocab, "horrific");
    let ckpt_dir = dir.path().join("oracle");
    fs::create_dir_all(&ckpt_dir).unwrap();
    save_checkpoint(&model, &ckpt_dir.join("best.ckpt")).unwrap();
    vocab.save(&ckpt_dir.join("vocab.txt")).unwrap();

    let cfg = dir.path().join("eval.cfg");
    write_file(&cfg, "beam_size = 1\ngen_max_len = 1\n");
    let eval_dir = dir.path().join("eval");
    run_ok(
        bin()
            .arg("eval")
            .arg(ckpt_dir.join("best.ckpt"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval_dir)
            .arg("--config")
            .arg(&cfg),
    );
    let report: serde_json::Value = serde_json::from_str(&read(&eval_dir.join("report.json"))).unwrap();
    assert_eq!(report["rouge1"]["f1"].as_f64().unwrap(), 1.0);

    // Corpus scores average ten identical examples, so allow summation ulps.
    let lexicon = summlab::metrics::VADLexicon::load(&data.join("lexicon.tsv")).unwrap();
    let reference = arousal_scores("horrific", &lexicon);
    assert!((report["ar_plus"].as_f64().unwrap() - reference.ar_plus).abs() < 1e-12);
    assert!((report["ar_minus"].as_f64().unwrap() - reference.ar_minus).abs() < 1e-12);
}

#[test]
fn sweep_emits_one_row_per_epsilon_and_zero_matches_the_clean_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 29, 30);
    let config = dir.path().join("sweep.cfg");
    write_file(
        &config,
        "epochs = 1\nbatch_size = 16\nlearning_rate = 1e-3\nd_model = 16\nn_heads = 2\n\
         d_ff = 32\nmax_tgt_len = 10\ndropout = 0.0\nseed = 11\nmodel_seed = 4\n\
         beam_size = 2\ngen_max_len = 8\nattack = fgsm\n",
    );
    let sweep_out = dir.path().join("sweep");
    run_ok(
        bin()
            .args(["sweep", "--config"])
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&sweep_out)
            .args(["--epsilons", "0,0.001,0.01,0.1"]),
    );
    let sweep = read(&sweep_out.join("sweep.csv"));
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 rows expected:\n{sweep}");
    assert_eq!(lines[0], "epsilon,rouge1,ar_plus,ar_minus,ar_sum,hallucination_overall");
    for (line, eps) in lines[1..].iter().zip(["0", "0.001", "0.01", "0.1"]) {
        assert!(line.starts_with(&format!("{eps},")), "row order: {line}");
    }

    // The epsilon=0 row must equal a clean train + eval pipeline bit for bit.
    let clean_run = dir.path().join("clean");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--data").arg(&data).arg("--out").arg(&clean_run));
    let eval_dir = dir.path().join("clean-eval");
    run_ok(
        bin()
            .arg("eval")
            .arg(clean_run.join("best.ckpt"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval_dir)
            .arg("--config")
            .arg(&config),
    );
    let report: serde_json::Value = serde_json::from_str(&read(&eval_dir.join("report.json"))).unwrap();
    let fields: Vec<f64> = lines[1]
        .split(',')
        .skip(1)
        .map(|v| v.parse::<f64>().unwrap())
        .collect();
    assert_eq!(fields[0], report["rouge1"]["f1"].as_f64().unwrap());
    assert_eq!(fields[1], report["ar_plus"].as_f64().unwrap());
    assert_eq!(fields[2], report["ar_minus"].as_f64().unwrap());
    assert_eq!(fields[3], report["ar_sum"].as_f64().unwrap());
    assert_eq!(fields[4], report["hallucination"]["overall"].as_f64().unwrap());
}

#[test]
fn sweep_requires_at_least_two_epsilons() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 31, 20);
    let config = dir.path().join("sweep.cfg");
    write_file(&config, "epochs = 1\n");
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .args(["--epsilons", "0.01"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_epsilon_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.cfg");
    write_file(&config, "epochs = 1\n");
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .args(["--epsilons", "0.01,banana"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("banana"));
}

#[test]
fn one_epoch_over_fifty_examples_finishes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 37, 50);
    let config = dir.path().join("train.cfg");
    write_file(&config, "epochs = 1\nbatch_size = 8\ndropout = 0.0\n");
    let started = std::time::Instant::now();
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join("run")),
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "one epoch over 50 examples took {elapsed:?}"
    );
}

#[test]
fn augment_mode_trains_on_the_doubled_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 41, 30);
    let clean_cfg = dir.path().join("clean.cfg");
    let aug_cfg = dir.path().join("aug.cfg");
    write_file(&clean_cfg, TINY_TRAIN);
    write_file(&aug_cfg, &format!("{TINY_TRAIN}mode = augment\n"));
    let clean_run = dir.path().join("clean");
    let aug_run = dir.path().join("aug");
    run_ok(bin().args(["train", "--config"]).arg(&clean_cfg).arg("--data").arg(&data).arg("--out").arg(&clean_run));
    run_ok(bin().args(["train", "--config"]).arg(&aug_cfg).arg("--data").arg(&data).arg("--out").arg(&aug_run));
    // Doubling the corpus changes the steps taken, so the checkpoints differ.
    assert_ne!(
        fs::read(clean_run.join("best.ckpt")).unwrap(),
        fs::read(aug_run.join("best.ckpt")).unwrap()
    );
}

#[test]
fn in_process_eval_matches_the_binary_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_benchmark(dir.path(), 43, 30);
    let config = dir.path().join("train.cfg");
    write_file(&config, TINY_TRAIN);
    let run = dir.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--data").arg(&data).arg("--out").arg(&run));
    let eval_dir = dir.path().join("eval");
    run_ok(
        bin()
            .arg("eval")
            .arg(run.join("best.ckpt"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval_dir)
            .arg("--config")
            .arg(&config),
    );

    let model = summlab::model::load_checkpoint(&run.join("best.ckpt")).unwrap();
    let vocab = Vocabulary::load(&run.join("vocab.txt")).unwrap();
    let test = summlab::text::load_corpus(&data.join("test.jsonl"), Split::Test).unwrap();
    let lexicon = summlab::metrics::VADLexicon::load(&data.join("lexicon.tsv")).unwrap();
    let gazetteer = summlab::metrics::Gazetteer::load(&data.join("gazetteer.tsv")).unwrap();
    let gen = summlab::metrics::GenerationConfig { beam_size: 2, max_len: 8, alpha: 0.0 };
    let report = evaluate_corpus(&model, &vocab, &test, &lexicon, &gazetteer, &gen).unwrap();
    assert_eq!(report.to_json(), read(&eval_dir.join("report.json")));
}

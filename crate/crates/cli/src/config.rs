//! Flat key=value run configuration: one file drives model size, training
//! hyperparameters, the attack, and generation settings. Unknown keys are
//! rejected so typos fail loudly instead of silently using a default.

use indexmap::IndexMap;

use summlab::metrics::GenerationConfig;
use summlab::model::ModelConfig;
use summlab::perturb::{AttackMode, PerturbConfig};
use summlab::train::{LossMix, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Clean,
    Adversarial,
    Augment,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Clean => "clean",
            TrainMode::Adversarial => "adversarial",
            TrainMode::Augment => "augment",
        })
    }
}

/// Everything a train/eval/sweep run needs, resolved against defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub mode: TrainMode,
    pub train: TrainConfig,
    /// `vocab_size` is a placeholder until the vocabulary is built.
    pub model: ModelConfig,
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
    pub generation: GenerationConfig,
}

fn defaults() -> IndexMap<&'static str, String> {
    let entries: [(&str, &str); 29] = [
        ("mode", "clean"),
        ("epochs", "5"),
        ("batch_size", "8"),
        ("learning_rate", "5e-5"),
        ("warmup_fraction", "0.1"),
        ("weight_decay", "0.01"),
        ("grad_clip_norm", "1.0"),
        ("seed", "0"),
        ("attack", "fgsm"),
        ("epsilon", "0.01"),
        ("eta", "0.01"),
        ("iterations", "3"),
        ("perturb_masked_positions", "false"),
        ("loss_mix", "adversarial_only"),
        ("lambda", "0.5"),
        ("d_model", "32"),
        ("n_heads", "2"),
        ("n_enc_layers", "1"),
        ("n_dec_layers", "1"),
        ("d_ff", "64"),
        ("max_src_len", "96"),
        ("max_tgt_len", "12"),
        ("dropout", "0.1"),
        ("model_seed", "0"),
        ("vocab_max_size", "512"),
        ("vocab_min_freq", "1"),
        ("beam_size", "4"),
        ("gen_max_len", "12"),
        ("alpha", "0.0"),
    ];
    entries.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

/// Parse `key = value` lines ('#' starts a comment) over the defaults and
/// return both the typed settings and the fully resolved key/value map.
pub fn parse_settings(
    text: &str,
) -> Result<(RunSettings, IndexMap<String, String>), String> {
    let mut resolved = defaults();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key = value", lineno + 1));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(slot) = resolved.get_mut(key) else {
            return Err(format!("line {}: unknown key {key:?}", lineno + 1));
        };
        *slot = value.to_string();
    }

    let get = |key: &str| resolved.get(key).expect("default exists").as_str();
    let num = |key: &str| -> Result<f64, String> {
        get(key)
            .parse()
            .map_err(|_| format!("{key}: {:?} is not a number", get(key)))
    };
    let int = |key: &str| -> Result<usize, String> {
        get(key)
            .parse()
            .map_err(|_| format!("{key}: {:?} is not an integer", get(key)))
    };
    let flag = |key: &str| -> Result<bool, String> {
        match get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("{key}: {other:?} is not true/false")),
        }
    };

    let mode = match get("mode") {
        "clean" => TrainMode::Clean,
        "adversarial" => TrainMode::Adversarial,
        "augment" => TrainMode::Augment,
        other => return Err(format!("mode: {other:?} is not clean/adversarial/augment")),
    };
    let attack = match get("attack") {
        "fgsm" => AttackMode::Fgsm,
        "pgd" => AttackMode::Pgd,
        other => return Err(format!("attack: {other:?} is not fgsm/pgd")),
    };
    let loss_mix = match get("loss_mix") {
        "adversarial_only" => LossMix::AdversarialOnly,
        "mixed" => LossMix::Mixed(num("lambda")?),
        other => return Err(format!("loss_mix: {other:?} is not adversarial_only/mixed")),
    };

    let perturb = PerturbConfig {
        mode: attack,
        epsilon: num("epsilon")?,
        eta: num("eta")?,
        iterations: int("iterations")?,
        perturb_masked_positions: flag("perturb_masked_positions")?,
    };
    let train = TrainConfig {
        learning_rate: num("learning_rate")?,
        warmup_fraction: num("warmup_fraction")?,
        epochs: int("epochs")?,
        batch_size: int("batch_size")?,
        seed: int("seed")? as u64,
        weight_decay: num("weight_decay")?,
        grad_clip_norm: num("grad_clip_norm")?,
        adversarial: mode == TrainMode::Adversarial,
        perturb,
        loss_mix,
    };
    let model = ModelConfig {
        vocab_size: 0,
        d_model: int("d_model")?,
        n_heads: int("n_heads")?,
        n_enc_layers: int("n_enc_layers")?,
        n_dec_layers: int("n_dec_layers")?,
        d_ff: int("d_ff")?,
        max_src_len: int("max_src_len")?,
        max_tgt_len: int("max_tgt_len")?,
        dropout_rate: num("dropout")?,
        seed: int("model_seed")? as u64,
    };
    let generation = GenerationConfig {
        beam_size: int("beam_size")?,
        max_len: int("gen_max_len")?,
        alpha: num("alpha")?,
    };
    let settings = RunSettings {
        mode,
        train,
        model,
        vocab_max_size: int("vocab_max_size")?,
        vocab_min_freq: int("vocab_min_freq")?,
        generation,
    };
    let resolved_owned = resolved
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok((settings, resolved_owned))
}

//! Fine-tuning loops: clean, adversarial, and an augmentation baseline.
//!
//! One optimizer step per batch: every example in the batch contributes a
//! teacher-forced cross-entropy term, the batch loss is their mean, and
//! AdamW with linear warmup/decay and global-norm clipping applies the
//! update. The adversarial step first computes a perturbation of each
//! example's encoder states on a frozen side tape, then re-encodes with
//! the displacement re-attached as a constant so encoder parameters train
//! through the unperturbed pathway.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{teacher_pair, ModelError, Seq2SeqModel};
use crate::perturb::{perturb, PerturbConfig, PerturbError};
use crate::tensor::{Matrix, Tape, TensorError};
use crate::text::{Corpus, Example, TextError, Vocabulary, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("train and validation splits share example ids: {0:?}")]
    DataLeakage(Vec<String>),
    #[error("non-finite loss at step {step}; aborting (lr {lr}, batch of {batch})")]
    NanLoss { step: usize, lr: f64, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum LossMix {
    AdversarialOnly,
    /// Per-example loss `(1 - lambda) * clean + lambda * adversarial`.
    Mixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub adversarial: bool,
    pub perturb: PerturbConfig,
    pub loss_mix: LossMix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            warmup_fraction: 0.10,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            adversarial: false,
            perturb: PerturbConfig::default(),
            loss_mix: LossMix::AdversarialOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::BadConfig("warmup_fraction must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if let LossMix::Mixed(lambda) = self.loss_mix {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(TrainError::BadConfig("mix lambda must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW moments plus the linear warmup / linear decay schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl OptimizerState {
    pub fn new(model: &Seq2SeqModel, config: &TrainConfig, total_steps: usize) -> Self {
        let zeros = |m: &Seq2SeqModel| -> IndexMap<String, Vec<f64>> {
            m.params.iter().map(|(n, p)| (n.clone(), vec![0.0; p.numel()])).collect()
        };
        let warmup_steps = ((total_steps as f64) * config.warmup_fraction).round() as usize;
        OptimizerState {
            first: zeros(model),
            second: zeros(model),
            step: 0,
            total_steps,
            warmup_steps,
            base_lr: config.learning_rate,
            weight_decay: config.weight_decay,
            grad_clip_norm: config.grad_clip_norm,
        }
    }

    /// Learning rate at a 1-based step: linear ramp over the warmup steps,
    /// then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (s, w, t) = (step as f64, self.warmup_steps as f64, self.total_steps as f64);
        if step <= self.warmup_steps {
            self.base_lr * s / w.max(1.0)
        } else if self.total_steps > self.warmup_steps {
            self.base_lr * (t - s).max(0.0) / (t - w)
        } else {
            0.0
        }
    }

    /// One AdamW update from named gradients; mutates the model in place.
    pub fn apply(&mut self, model: &mut Seq2SeqModel, grads: &IndexMap<String, Vec<f64>>) {
        self.step += 1;
        let lr = self.lr_at(self.step);

        let mut sq_norm = 0.0;
        for g in grads.values() {
            for &v in g {
                sq_norm += v * v;
            }
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.grad_clip_norm && norm > 0.0 {
            self.grad_clip_norm / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (name, grad) in grads {
            let p = &mut model.params[name.as_str()];
            let m = self.first.get_mut(name).expect("moment buffer");
            let v = self.second.get_mut(name).expect("moment buffer");
            for i in 0..p.data.len() {
                let g = grad[i] * clip_scale;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -=
                    lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * p.data[i]);
            }
        }
    }
}

/// An example tokenized against a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct TokenizedExample {
    pub id: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn tokenize_corpus(corpus: &Corpus, vocab: &Vocabulary) -> Vec<TokenizedExample> {
    corpus
        .examples
        .iter()
        .map(|ex| TokenizedExample {
            id: ex.id.clone(),
            source: vocab.encode_text(&ex.document),
            target: vocab.encode_text(&ex.summary),
        })
        .collect()
}

fn collect_grads(tape: &Tape, binding: &crate::model::Binding) -> IndexMap<String, Vec<f64>> {
    binding
        .iter()
        .map(|(name, &id)| {
            let g = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.numel(id)]);
            (name.clone(), g)
        })
        .collect()
}

/// One clean optimizer step. Returns the pre-update batch loss.
pub fn train_step_clean(
    model: &mut Seq2SeqModel,
    optimizer: &mut OptimizerState,
    batch: &[TokenizedExample],
    dropout_rng: &mut ChaCha20Rng,
) -> Result<f64, TrainError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let enc = model.encode_on_tape(&mut tape, &binding, &ex.source, Some(dropout_rng))?;
        let (dec_input, gold) = teacher_pair(&ex.target, model.config.max_tgt_len);
        let logits = model.decode_on_tape(
            &mut tape,
            &binding,
            enc.id,
            &enc.source_mask,
            &dec_input,
            Some(dropout_rng),
        )?;
        losses.push(tape.cross_entropy(logits, &gold, PAD_ID)?);
    }
    let loss = tape.mean_scalars(&losses)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(TrainError::NanLoss {
            step: optimizer.step + 1,
            lr: optimizer.lr_at(optimizer.step + 1),
            batch: batch.len(),
        });
    }
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &binding);
    optimizer.apply(model, &grads);
    Ok(loss_value)
}

/// One adversarial optimizer step (the clean path when epsilon is zero or
/// the mix collapses to it). Returns the pre-update batch loss.
pub fn train_step_adversarial(
    model: &mut Seq2SeqModel,
    optimizer: &mut OptimizerState,
    batch: &[TokenizedExample],
    perturb_cfg: &PerturbConfig,
    loss_mix: LossMix,
    dropout_rng: &mut ChaCha20Rng,
) -> Result<f64, TrainError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    if perturb_cfg.epsilon == 0.0 || loss_mix == LossMix::Mixed(0.0) {
        return train_step_clean(model, optimizer, batch, dropout_rng);
    }

    // Attack pass: frozen parameters, no dropout, per-example displacement.
    let mut displacements: Vec<Matrix> = Vec::with_capacity(batch.len());
    for ex in batch {
        let enc = model.encode(&ex.source)?;
        let perturbed = perturb(model, &enc, &ex.target, perturb_cfg)?;
        let mut delta = perturbed.states;
        for (d, &b) in delta.data.iter_mut().zip(&enc.states.data) {
            *d -= b;
        }
        displacements.push(delta);
    }

    // Update pass: dropout active, displacement re-attached as a constant
    // offset so the encoder trains through its own output.
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    for (ex, delta) in batch.iter().zip(&displacements) {
        let enc = model.encode_on_tape(&mut tape, &binding, &ex.source, Some(dropout_rng))?;
        let (dec_input, gold) = teacher_pair(&ex.target, model.config.max_tgt_len);
        let offset = tape.constant(delta.data.clone(), vec![delta.rows, delta.cols]);
        let adv_states = tape.add(enc.id, offset)?;
        let adv_logits = model.decode_on_tape(
            &mut tape,
            &binding,
            adv_states,
            &enc.source_mask,
            &dec_input,
            Some(dropout_rng),
        )?;
        let adv_loss = tape.cross_entropy(adv_logits, &gold, PAD_ID)?;
        match loss_mix {
            LossMix::AdversarialOnly => losses.push(adv_loss),
            LossMix::Mixed(lambda) => {
                let clean_logits = model.decode_on_tape(
                    &mut tape,
                    &binding,
                    enc.id,
                    &enc.source_mask,
                    &dec_input,
                    Some(dropout_rng),
                )?;
                let clean_loss = tape.cross_entropy(clean_logits, &gold, PAD_ID)?;
                let a = tape.scale(adv_loss, lambda)?;
                let c = tape.scale(clean_loss, 1.0 - lambda)?;
                losses.push(tape.add(a, c)?);
            }
        }
    }
    let loss = tape.mean_scalars(&losses)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(TrainError::NanLoss {
            step: optimizer.step + 1,
            lr: optimizer.lr_at(optimizer.step + 1),
            batch: batch.len(),
        });
    }
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &binding);
    optimizer.apply(model, &grads);
    Ok(loss_value)
}

/// Teacher-forced mean loss over a split, evaluation mode.
pub fn evaluate_loss(
    model: &Seq2SeqModel,
    examples: &[TokenizedExample],
) -> Result<f64, TrainError> {
    assert!(!examples.is_empty());
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let enc = model.encode_on_tape(&mut tape, &binding, &ex.source, None)?;
        let (dec_input, gold) = teacher_pair(&ex.target, model.config.max_tgt_len);
        let logits =
            model.decode_on_tape(&mut tape, &binding, enc.id, &enc.source_mask, &dec_input, None)?;
        let loss = tape.cross_entropy(logits, &gold, PAD_ID)?;
        total += tape.scalar_value(loss);
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Deterministic CSV rendering of the epoch log. Wall-clock timings go to
/// the log facade instead so that identical runs produce identical bytes.
pub fn log_to_csv(log: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.val_loss));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model after the final step.
    pub final_model: Seq2SeqModel,
    /// Snapshot with the lowest validation loss (earliest epoch on ties).
    pub best_model: Seq2SeqModel,
    pub best_epoch: usize,
    pub log: Vec<EpochRow>,
}

/// Seeded epoch loop with per-epoch shuffling and validation.
pub fn train_loop(
    model: Seq2SeqModel,
    vocab: &Vocabulary,
    train: &Corpus,
    val: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_loop_observed(model, vocab, train, val, config, |_| {})
}

/// [`train_loop`] with a per-epoch callback, so callers can stream log
/// rows to disk and keep completed epochs if a later step aborts.
pub fn train_loop_observed(
    model: Seq2SeqModel,
    vocab: &Vocabulary,
    train: &Corpus,
    val: &Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }
    let overlap: Vec<String> = {
        let val_ids: std::collections::HashSet<&str> =
            val.examples.iter().map(|e| e.id.as_str()).collect();
        train
            .examples
            .iter()
            .filter(|e| val_ids.contains(e.id.as_str()))
            .map(|e| e.id.clone())
            .collect()
    };
    if !overlap.is_empty() {
        return Err(TrainError::DataLeakage(overlap));
    }

    let train_tok = tokenize_corpus(train, vocab);
    let val_tok = tokenize_corpus(val, vocab);
    let n_batches = train_tok.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * n_batches;

    let mut model = model;
    let mut optimizer = OptimizerState::new(&model, config, total_steps);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut best_model = model.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_tok.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TokenizedExample> =
                chunk.iter().map(|&i| train_tok[i].clone()).collect();
            let loss = if config.adversarial {
                train_step_adversarial(
                    &mut model,
                    &mut optimizer,
                    &batch,
                    &config.perturb,
                    config.loss_mix,
                    &mut dropout_rng,
                )?
            } else {
                train_step_clean(&mut model, &mut optimizer, &batch, &mut dropout_rng)?
            };
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_tok.len() as f64;
        let val_loss = evaluate_loss(&model, &val_tok)?;
        if val_loss < best_val {
            best_val = val_loss;
            best_model = model.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6}, val {val_loss:.6}, {:.2}s",
            epoch_start.elapsed().as_secs_f64()
        );
        let row = EpochRow { epoch, train_loss, val_loss };
        on_epoch(&row);
        log.push(row);
    }

    if config.epochs == 0 {
        best_model = model.clone();
    }
    Ok(TrainOutcome { final_model: model, best_model, best_epoch, log })
}

const SYNONYMS: [(&str, &str); 19] = [
    ("is", "remains"),
    ("was", "had been"),
    ("works", "serves"),
    ("worked", "served"),
    ("known", "recognized"),
    ("respected", "admired"),
    ("many", "numerous"),
    ("projects", "undertakings"),
    ("career", "profession"),
    ("born", "raised"),
    ("lives", "resides"),
    ("approved", "ratified"),
    ("rejected", "vetoed"),
    ("announced", "unveiled"),
    ("delayed", "postponed"),
    ("revised", "amended"),
    ("plan", "proposal"),
    ("decision", "ruling"),
    ("called", "labeled"),
];

/// Doubles a train split: every example gains a paraphrased copy whose
/// document applies fixed synonym substitutions and a seeded sentence
/// rotation; summaries stay byte-identical. How often the copy actually
/// differs depends on how well the table covers the corpus vocabulary.
pub fn paraphrase_augment(corpus: &Corpus, seed: u64) -> Corpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = corpus.clone();
    for ex in &corpus.examples {
        let mut doc = ex.document.clone();
        // Rotate sentence order for roughly half the copies.
        if rng.gen::<bool>() {
            let sentences: Vec<&str> =
                doc.split(". ").filter(|s| !s.trim().is_empty()).collect();
            if sentences.len() > 1 {
                let mut rotated: Vec<&str> = sentences[1..].to_vec();
                rotated.push(sentences[0]);
                doc = rotated.join(". ");
            }
        }
        let substituted: Vec<String> = crate::text::tokenize(&doc)
            .into_iter()
            .map(|tok| {
                SYNONYMS
                    .iter()
                    .find(|(from, _)| *from == tok)
                    .map(|(_, to)| to.to_string())
                    .unwrap_or(tok)
            })
            .collect();
        out.examples.push(Example {
            id: format!("{}-para", ex.id),
            document: substituted.join(" "),
            summary: ex.summary.clone(),
            meta: ex.meta.clone(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{Meta, Split};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_src_len: 12,
            max_tgt_len: 8,
            dropout_rate: 0.0,
            seed,
        }
    }

    fn toy_batch() -> Vec<TokenizedExample> {
        vec![
            TokenizedExample { id: "a".into(), source: vec![4, 5, 6, 7], target: vec![8, 9] },
            TokenizedExample { id: "b".into(), source: vec![10, 11], target: vec![12] },
        ]
    }

    #[test]
    fn clean_step_loss_is_finite_and_positive() {
        let mut model = Seq2SeqModel::init(tiny_config(1)).unwrap();
        let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let mut opt = OptimizerState::new(&model, &config, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let loss = train_step_clean(&mut model, &mut opt, &toy_batch(), &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn clean_step_is_deterministic() {
        let run = || {
            let mut model = Seq2SeqModel::init(tiny_config(2)).unwrap();
            let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
            let mut opt = OptimizerState::new(&model, &config, 10);
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(
                    train_step_clean(&mut model, &mut opt, &toy_batch(), &mut rng).unwrap(),
                );
            }
            (losses, model)
        };
        let (l1, m1) = run();
        let (l2, m2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn adamw_update_matches_hand_computation() {
        // Two scalar parameters stepped by hand through the same formulas.
        let mut model = Seq2SeqModel::init(tiny_config(3)).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-2,
            warmup_fraction: 0.0,
            weight_decay: 0.1,
            grad_clip_norm: 1e9,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, &config, 4);

        let name = "out.bias";
        let theta0 = model.params[name].data[0];
        let theta1 = model.params[name].data[1];
        let mut grads: IndexMap<String, Vec<f64>> = model
            .params
            .iter()
            .map(|(n, p)| (n.clone(), vec![0.0; p.numel()]))
            .collect();
        grads[name][0] = 0.3;
        grads[name][1] = -0.7;
        opt.apply(&mut model, &grads);

        let lr = 1e-2 * (4.0 - 1.0) / 4.0; // decay schedule at step 1, no warmup
        let hand = |theta: f64, g: f64| {
            let m = (1.0 - BETA1) * g;
            let v = (1.0 - BETA2) * g * g;
            let m_hat = m / (1.0 - BETA1);
            let v_hat = v / (1.0 - BETA2);
            theta - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + 0.1 * theta)
        };
        assert_eq!(model.params[name].data[0], hand(theta0, 0.3));
        assert_eq!(model.params[name].data[1], hand(theta1, -0.7));
    }

    #[test]
    fn schedule_ramps_then_decays_linearly() {
        let model = Seq2SeqModel::init(tiny_config(4)).unwrap();
        let config = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.25,
            ..TrainConfig::default()
        };
        let opt = OptimizerState::new(&model, &config, 100);
        assert_eq!(opt.warmup_steps, 25);
        for s in 1..=25 {
            assert!((opt.lr_at(s) - s as f64 / 25.0).abs() < 1e-12);
        }
        for s in 26..=100 {
            let expect = (100.0 - s as f64) / 75.0;
            assert!((opt.lr_at(s) - expect).abs() < 1e-12, "step {s}");
        }
        assert_eq!(opt.lr_at(100), 0.0);
    }

    #[test]
    fn adversarial_epsilon_zero_matches_clean_bitwise() {
        let mut clean_model = Seq2SeqModel::init(tiny_config(5)).unwrap();
        let mut adv_model = clean_model.clone();
        let config = TrainConfig::default();
        let mut clean_opt = OptimizerState::new(&clean_model, &config, 20);
        let mut adv_opt = OptimizerState::new(&adv_model, &config, 20);
        let mut rng_a = ChaCha20Rng::seed_from_u64(9);
        let mut rng_b = ChaCha20Rng::seed_from_u64(9);
        let pcfg = PerturbConfig { epsilon: 0.0, ..PerturbConfig::default() };
        for _ in 0..5 {
            let a =
                train_step_clean(&mut clean_model, &mut clean_opt, &toy_batch(), &mut rng_a)
                    .unwrap();
            let b = train_step_adversarial(
                &mut adv_model,
                &mut adv_opt,
                &toy_batch(),
                &pcfg,
                LossMix::AdversarialOnly,
                &mut rng_b,
            )
            .unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(clean_model, adv_model);
    }

    #[test]
    fn mixed_lambda_zero_matches_clean_bitwise() {
        let mut clean_model = Seq2SeqModel::init(tiny_config(6)).unwrap();
        let mut adv_model = clean_model.clone();
        let config = TrainConfig::default();
        let mut clean_opt = OptimizerState::new(&clean_model, &config, 20);
        let mut adv_opt = OptimizerState::new(&adv_model, &config, 20);
        let mut rng_a = ChaCha20Rng::seed_from_u64(4);
        let mut rng_b = ChaCha20Rng::seed_from_u64(4);
        let pcfg = PerturbConfig { epsilon: 0.05, ..PerturbConfig::default() };
        for _ in 0..3 {
            let a =
                train_step_clean(&mut clean_model, &mut clean_opt, &toy_batch(), &mut rng_a)
                    .unwrap();
            let b = train_step_adversarial(
                &mut adv_model,
                &mut adv_opt,
                &toy_batch(),
                &pcfg,
                LossMix::Mixed(0.0),
                &mut rng_b,
            )
            .unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(clean_model, adv_model);
    }

    #[test]
    fn adversarial_loss_dominates_clean_loss_on_fresh_models() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut wins = 0;
        let trials = 40;
        for _ in 0..trials {
            let model = Seq2SeqModel::init(tiny_config(rng.gen())).unwrap();
            let src: Vec<usize> = (0..rng.gen_range(3..8)).map(|_| rng.gen_range(4..16)).collect();
            let tgt: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(4..16)).collect();
            let enc = model.encode(&src).unwrap();
            let clean = crate::perturb::adversarial_objective(&model, &enc, &tgt).unwrap();
            let grad = crate::perturb::embedding_grad(&model, &enc, &tgt).unwrap();
            let adv_states = crate::perturb::fgsm(&enc, &grad, 1e-4, false).unwrap();
            let adv = crate::perturb::adversarial_objective(&model, &adv_states, &tgt).unwrap();
            if adv >= clean {
                wins += 1;
            }
        }
        assert!(wins * 100 >= trials * 95, "{wins}/{trials}");
    }

    fn memorization_corpus(n: usize) -> (Corpus, Corpus) {
        let mut train = Corpus::new(Split::Train);
        let words = ["sun", "moon", "tide", "wind", "rain", "snow", "leaf", "stone"];
        for i in 0..n {
            let a = words[i % words.len()];
            let b = words[(i / words.len()) % words.len()];
            train.examples.push(Example {
                id: format!("t{i}"),
                document: format!("the {a} meets the {b} today"),
                summary: format!("{a} {b}"),
                meta: Meta::default(),
            });
        }
        let mut val = Corpus::new(Split::Val);
        val.examples.push(Example {
            id: "v0".into(),
            document: "the sun meets the rain today".into(),
            summary: "sun rain".into(),
            meta: Meta::default(),
        });
        (train, val)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (train, val) = memorization_corpus(8);
        let vocab = Vocabulary::build(&train, 100, 1).unwrap();
        let mut cfg = tiny_config(7);
        cfg.vocab_size = vocab.len();
        let model = Seq2SeqModel::init(cfg).unwrap();
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_loop(model.clone(), &vocab, &train, &val, &config).unwrap();
        assert_eq!(out.final_model, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn leaked_ids_are_rejected() {
        let (train, _) = memorization_corpus(4);
        let mut val = Corpus::new(Split::Val);
        val.examples.push(train.examples[0].clone());
        let vocab = Vocabulary::build(&train, 100, 1).unwrap();
        let mut cfg = tiny_config(8);
        cfg.vocab_size = vocab.len();
        let model = Seq2SeqModel::init(cfg).unwrap();
        let config = TrainConfig::default();
        assert!(matches!(
            train_loop(model, &vocab, &train, &val, &config),
            Err(TrainError::DataLeakage(_))
        ));
    }

    #[test]
    fn train_loop_is_deterministic() {
        let (train, val) = memorization_corpus(12);
        let vocab = Vocabulary::build(&train, 100, 1).unwrap();
        let mut cfg = tiny_config(9);
        cfg.vocab_size = vocab.len();
        cfg.dropout_rate = 0.1;
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Seq2SeqModel::init(cfg.clone()).unwrap();
            train_loop(model, &vocab, &train, &val, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn paraphrase_doubles_and_keeps_summaries() {
        let mut train = Corpus::new(Split::Train);
        let jobs = ["teacher", "pilot", "farmer", "singer", "welder"];
        for (i, job) in jobs.iter().enumerate() {
            train.examples.push(Example {
                id: format!("p{i}"),
                document: format!(
                    "kira is a {job} known for many projects. she worked abroad early in \
                     her career. today she lives near the coast."
                ),
                summary: format!("kira the {job}"),
                meta: Meta::default(),
            });
        }
        let out = paraphrase_augment(&train, 3);
        assert_eq!(out.len(), 2 * train.len());
        for (orig, para) in train.examples.iter().zip(&out.examples[train.len()..]) {
            assert_eq!(orig.summary, para.summary);
            assert_eq!(para.id, format!("{}-para", orig.id));
            assert_ne!(
                crate::text::tokenize(&orig.document),
                crate::text::tokenize(&para.document)
            );
        }
        // "worked" comes from the table even when punctuation hugs the word.
        assert!(out.examples[train.len()].document.contains("served"));
        // Deterministic in seed.
        assert_eq!(paraphrase_augment(&train, 3), out);
        assert_ne!(paraphrase_augment(&train, 4), out);
    }
}

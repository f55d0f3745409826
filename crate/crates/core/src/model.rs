//! Miniature encoder-decoder transformer with teacher-forced training
//! forward pass, greedy/beam generation, and a binary checkpoint format.
//!
//! Pre-norm residual blocks, sinusoidal positional encodings, a shared
//! token embedding table (scaled by sqrt(d_model)), fused QKV projections,
//! ReLU feed-forward, and a separate output projection. Everything is f64
//! and single-threaded; forward passes are built on a [`Tape`] so the same
//! code serves training, perturbation, and generation.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, Tape, TensorError, TensorId};
use crate::text::{END_ID, PAD_ID, START_ID};

pub const LN_EPS: f64 = 1e-5;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SMLBCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("target sequence is empty or does not begin with the start id")]
    BadTarget,
    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io error on {path}: {detail}")]
    CheckpointIo { path: String, detail: String },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 4 {
            return Err(ModelError::BadConfig("vocab_size must cover the reserved ids".into()));
        }
        let counts = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.max_src_len,
            self.max_tgt_len,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(ModelError::BadConfig("all size fields must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named parameter buffer with an explicit shape (1-D or 2-D).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Tape handles for every model parameter of one forward construction.
pub struct Binding {
    ids: IndexMap<String, TensorId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// Snapshot of the encoder output for one source sequence.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub states: Matrix,
    pub source_mask: Vec<bool>,
    pub truncated: bool,
}

/// Encoder output still attached to a tape.
pub struct EncodedSource {
    pub id: TensorId,
    pub source_mask: Vec<bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: IndexMap<String, ParamTensor>,
}

/// Total scalar parameter count implied by a config.
pub fn parameter_census(c: &ModelConfig) -> usize {
    let (v, d, ff) = (c.vocab_size, c.d_model, c.d_ff);
    let enc_layer = 4 * d * d + 5 * d + 2 * d * ff + ff;
    let dec_layer = 8 * d * d + 7 * d + 2 * d * ff + ff;
    v * d + c.n_enc_layers * enc_layer + c.n_dec_layers * dec_layer + 4 * d + d * v + v
}

fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for col in 0..d {
            let pair = (col / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            pe[pos * d + col] = if col % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn dropout_mask(rng: &mut ChaCha20Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

impl Seq2SeqModel {
    /// Seeded scaled-normal initialization; weight std is 1/sqrt(fan_in),
    /// biases start at zero, layer-norm gains at one.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut params: IndexMap<String, ParamTensor> = IndexMap::new();
        let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff);

        let normal = |params: &mut IndexMap<String, ParamTensor>,
                          rng: &mut ChaCha20Rng,
                          name: String,
                          rows: usize,
                          cols: usize,
                          std: f64| {
            let dist = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            params.insert(name, ParamTensor { shape: vec![rows, cols], data });
        };
        let vector = |params: &mut IndexMap<String, ParamTensor>, name: String, n: usize, fill: f64| {
            params.insert(name, ParamTensor { shape: vec![n], data: vec![fill; n] });
        };

        normal(&mut params, &mut rng, "embed.tokens".into(), v, d, 1.0 / (d as f64).sqrt());
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (ff as f64).sqrt();
        for i in 0..config.n_enc_layers {
            let p = format!("enc.{i}");
            vector(&mut params, format!("{p}.ln1.gain"), d, 1.0);
            vector(&mut params, format!("{p}.ln1.bias"), d, 0.0);
            normal(&mut params, &mut rng, format!("{p}.attn.qkv"), d, 3 * d, w_std);
            normal(&mut params, &mut rng, format!("{p}.attn.out"), d, d, w_std);
            vector(&mut params, format!("{p}.ln2.gain"), d, 1.0);
            vector(&mut params, format!("{p}.ln2.bias"), d, 0.0);
            normal(&mut params, &mut rng, format!("{p}.ffn.w1"), d, ff, w_std);
            vector(&mut params, format!("{p}.ffn.b1"), ff, 0.0);
            normal(&mut params, &mut rng, format!("{p}.ffn.w2"), ff, d, ff_std);
            vector(&mut params, format!("{p}.ffn.b2"), d, 0.0);
        }
        for i in 0..config.n_dec_layers {
            let p = format!("dec.{i}");
            vector(&mut params, format!("{p}.ln1.gain"), d, 1.0);
            vector(&mut params, format!("{p}.ln1.bias"), d, 0.0);
            normal(&mut params, &mut rng, format!("{p}.self_attn.qkv"), d, 3 * d, w_std);
            normal(&mut params, &mut rng, format!("{p}.self_attn.out"), d, d, w_std);
            vector(&mut params, format!("{p}.ln2.gain"), d, 1.0);
            vector(&mut params, format!("{p}.ln2.bias"), d, 0.0);
            normal(&mut params, &mut rng, format!("{p}.cross_attn.q"), d, d, w_std);
            normal(&mut params, &mut rng, format!("{p}.cross_attn.kv"), d, 2 * d, w_std);
            normal(&mut params, &mut rng, format!("{p}.cross_attn.out"), d, d, w_std);
            vector(&mut params, format!("{p}.ln3.gain"), d, 1.0);
            vector(&mut params, format!("{p}.ln3.bias"), d, 0.0);
            normal(&mut params, &mut rng, format!("{p}.ffn.w1"), d, ff, w_std);
            vector(&mut params, format!("{p}.ffn.b1"), ff, 0.0);
            normal(&mut params, &mut rng, format!("{p}.ffn.w2"), ff, d, ff_std);
            vector(&mut params, format!("{p}.ffn.b2"), d, 0.0);
        }
        vector(&mut params, "enc.final_ln.gain".into(), d, 1.0);
        vector(&mut params, "enc.final_ln.bias".into(), d, 0.0);
        vector(&mut params, "dec.final_ln.gain".into(), d, 1.0);
        vector(&mut params, "dec.final_ln.bias".into(), d, 0.0);
        normal(&mut params, &mut rng, "out.proj".into(), d, v, w_std);
        vector(&mut params, "out.bias".into(), v, 0.0);

        debug_assert_eq!(
            params.values().map(ParamTensor::numel).sum::<usize>(),
            parameter_census(&config)
        );
        Ok(Seq2SeqModel { config, params })
    }

    /// Register every parameter on a tape, in stored order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|(name, p)| {
                (name.clone(), tape.leaf(p.data.clone(), p.shape.clone(), requires_grad))
            })
            .collect();
        Binding { ids }
    }

    fn embed_sequence(
        &self,
        tape: &mut Tape,
        b: &Binding,
        ids: &[usize],
        mut dropout: Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        let d = self.config.d_model;
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
            }
        }
        let emb = tape.gather_rows(b.get("embed.tokens"), ids)?;
        let scaled = tape.scale(emb, (d as f64).sqrt())?;
        let pe = tape.constant(positional_encoding(ids.len(), d), vec![ids.len(), d]);
        let mut x = tape.add(scaled, pe)?;
        if let Some(rng) = dropout.as_deref_mut() {
            if self.config.dropout_rate > 0.0 {
                let mask = dropout_mask(rng, ids.len() * d, self.config.dropout_rate);
                x = tape.dropout(x, mask)?;
            }
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        mask: &[bool],
        w_out: TensorId,
    ) -> Result<TensorId, ModelError> {
        let heads = self.config.n_heads;
        let d = self.config.d_model;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let weights = tape.masked_softmax(scaled, mask)?;
            parts.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&parts)?;
        Ok(tape.matmul(cat, w_out)?)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        dropout: &mut Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        if let Some(rng) = dropout.as_deref_mut() {
            if self.config.dropout_rate > 0.0 {
                let n = tape.numel(x);
                let mask = dropout_mask(rng, n, self.config.dropout_rate);
                return Ok(tape.dropout(x, mask)?);
            }
        }
        Ok(x)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        x: TensorId,
        prefix: &str,
        b: &Binding,
    ) -> Result<TensorId, ModelError> {
        let h = tape.matmul(x, b.get(&format!("{prefix}.ffn.w1")))?;
        let h = tape.add_bias_row(h, b.get(&format!("{prefix}.ffn.b1")))?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, b.get(&format!("{prefix}.ffn.w2")))?;
        Ok(tape.add_bias_row(h, b.get(&format!("{prefix}.ffn.b2")))?)
    }

    fn ln(
        &self,
        tape: &mut Tape,
        x: TensorId,
        name: &str,
        b: &Binding,
    ) -> Result<TensorId, ModelError> {
        Ok(tape.layer_norm(
            x,
            b.get(&format!("{name}.gain")),
            b.get(&format!("{name}.bias")),
            LN_EPS,
        )?)
    }

    /// Encoder forward on an existing tape. Pad ids in `source` become
    /// masked positions that nothing downstream may attend to. Sources
    /// longer than `max_src_len` are truncated and flagged.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Binding,
        source: &[usize],
        mut dropout: Option<&mut ChaCha20Rng>,
    ) -> Result<EncodedSource, ModelError> {
        let truncated = source.len() > self.config.max_src_len;
        if truncated {
            log::warn!(
                "source length {} exceeds max_src_len {}; truncating",
                source.len(),
                self.config.max_src_len
            );
        }
        let source = &source[..source.len().min(self.config.max_src_len)];
        if source.is_empty() || source.iter().all(|&t| t == PAD_ID) {
            return Err(ModelError::EmptySource);
        }
        let t = source.len();
        let source_mask: Vec<bool> = source.iter().map(|&tok| tok != PAD_ID).collect();
        // Every query row may attend to every non-pad key column.
        let attn_mask: Vec<bool> = (0..t * t).map(|idx| source_mask[idx % t]).collect();

        let mut x = self.embed_sequence(tape, b, source, dropout.as_deref_mut())?;
        for i in 0..self.config.n_enc_layers {
            let p = format!("enc.{i}");
            let normed = self.ln(tape, x, &format!("{p}.ln1"), b)?;
            let qkv = tape.matmul(normed, b.get(&format!("{p}.attn.qkv")))?;
            let d = self.config.d_model;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let attn =
                self.attention(tape, q, k, v, &attn_mask, b.get(&format!("{p}.attn.out")))?;
            let attn = self.maybe_dropout(tape, attn, &mut dropout)?;
            x = tape.add(x, attn)?;

            let normed = self.ln(tape, x, &format!("{p}.ln2"), b)?;
            let ff = self.ffn(tape, normed, &p, b)?;
            let ff = self.maybe_dropout(tape, ff, &mut dropout)?;
            x = tape.add(x, ff)?;
        }
        let out = self.ln(tape, x, "enc.final_ln", b)?;
        Ok(EncodedSource { id: out, source_mask, truncated })
    }

    /// Decoder forward on an existing tape: causal self-attention over the
    /// teacher-forced prefix, cross-attention over `enc` (any tape tensor
    /// of shape `[T_src × d_model]`), logits `[T_tgt × vocab]`.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Binding,
        enc: TensorId,
        source_mask: &[bool],
        dec_input: &[usize],
        mut dropout: Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        if dec_input.is_empty() || dec_input[0] != START_ID {
            return Err(ModelError::BadTarget);
        }
        let dec_input = &dec_input[..dec_input.len().min(self.config.max_tgt_len + 1)];
        let t = dec_input.len();
        let t_src = source_mask.len();
        let causal: Vec<bool> = (0..t * t).map(|idx| idx % t <= idx / t).collect();
        let cross: Vec<bool> = (0..t * t_src).map(|idx| source_mask[idx % t_src]).collect();

        let mut x = self.embed_sequence(tape, b, dec_input, dropout.as_deref_mut())?;
        let d = self.config.d_model;
        for i in 0..self.config.n_dec_layers {
            let p = format!("dec.{i}");
            let normed = self.ln(tape, x, &format!("{p}.ln1"), b)?;
            let qkv = tape.matmul(normed, b.get(&format!("{p}.self_attn.qkv")))?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let attn =
                self.attention(tape, q, k, v, &causal, b.get(&format!("{p}.self_attn.out")))?;
            let attn = self.maybe_dropout(tape, attn, &mut dropout)?;
            x = tape.add(x, attn)?;

            let normed = self.ln(tape, x, &format!("{p}.ln2"), b)?;
            let q = tape.matmul(normed, b.get(&format!("{p}.cross_attn.q")))?;
            let kv = tape.matmul(enc, b.get(&format!("{p}.cross_attn.kv")))?;
            let k = tape.slice_cols(kv, 0, d)?;
            let v = tape.slice_cols(kv, d, d)?;
            let attn =
                self.attention(tape, q, k, v, &cross, b.get(&format!("{p}.cross_attn.out")))?;
            let attn = self.maybe_dropout(tape, attn, &mut dropout)?;
            x = tape.add(x, attn)?;

            let normed = self.ln(tape, x, &format!("{p}.ln3"), b)?;
            let ff = self.ffn(tape, normed, &p, b)?;
            let ff = self.maybe_dropout(tape, ff, &mut dropout)?;
            x = tape.add(x, ff)?;
        }
        let out = self.ln(tape, x, "dec.final_ln", b)?;
        let logits = tape.matmul(out, b.get("out.proj"))?;
        Ok(tape.add_bias_row(logits, b.get("out.bias"))?)
    }

    /// Evaluation-mode encode onto a private tape, returning a snapshot.
    pub fn encode(&self, source: &[usize]) -> Result<EncoderStates, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = self.encode_on_tape(&mut tape, &b, source, None)?;
        Ok(EncoderStates {
            states: tape.matrix(enc.id),
            source_mask: enc.source_mask,
            truncated: enc.truncated,
        })
    }

    /// Evaluation-mode teacher-forced logits for a decoder input sequence,
    /// run against a detached encoder snapshot.
    pub fn decode_logits(
        &self,
        enc: &EncoderStates,
        dec_input: &[usize],
    ) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc_id = tape.leaf_from_matrix(&enc.states, false);
        let logits =
            self.decode_on_tape(&mut tape, &b, enc_id, &enc.source_mask, dec_input, None)?;
        Ok(tape.matrix(logits))
    }

    /// Beam-search generation over a fixed encoder snapshot. Returns content
    /// token ids (no start/end markers). `alpha` is the length-normalization
    /// exponent applied to hypothesis scores; 0 disables it. Ties break
    /// toward the lexicographically smallest token sequence, which makes
    /// `beam_size == 1` coincide with a greedy lowest-id-argmax rollout.
    pub fn generate(
        &self,
        enc: &EncoderStates,
        beam_size: usize,
        max_len: usize,
        alpha: f64,
    ) -> Result<Vec<usize>, ModelError> {
        assert!(beam_size >= 1, "beam_size must be >= 1");
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            finished: bool,
        }
        let norm = |score: f64, len: usize| score / (len.max(1) as f64).powf(alpha);

        let mut beam = vec![Hyp { tokens: Vec::new(), score: 0.0, finished: max_len == 0 }];
        for _ in 0..max_len {
            if beam.iter().all(|h| h.finished) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in &beam {
                if hyp.finished {
                    candidates.push(hyp.clone());
                    continue;
                }
                let mut dec_input = Vec::with_capacity(hyp.tokens.len() + 1);
                dec_input.push(START_ID);
                dec_input.extend_from_slice(&hyp.tokens);
                let logits = self.decode_logits(enc, &dec_input)?;
                let last = &logits.data[(logits.rows - 1) * logits.cols..];
                let logps = log_softmax(last);
                for (tok, &lp) in logps.iter().enumerate() {
                    let mut tokens = hyp.tokens.clone();
                    let finished = tok == END_ID;
                    if !finished {
                        tokens.push(tok);
                    }
                    candidates.push(Hyp {
                        finished: finished || tokens.len() >= max_len,
                        tokens,
                        score: hyp.score + lp,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                norm(b.score, b.tokens.len())
                    .total_cmp(&norm(a.score, a.tokens.len()))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(beam_size);
            beam = candidates;
        }
        beam.sort_by(|a, b| {
            norm(b.score, b.tokens.len())
                .total_cmp(&norm(a.score, a.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        Ok(beam.remove(0).tokens)
    }

    /// Convenience: encode then generate.
    pub fn summarize(
        &self,
        source: &[usize],
        beam_size: usize,
        max_len: usize,
        alpha: f64,
    ) -> Result<Vec<usize>, ModelError> {
        let enc = self.encode(source)?;
        self.generate(&enc, beam_size, max_len, alpha)
    }
}

/// Teacher-forcing pair for a content token sequence: decoder input is the
/// start id followed by the (length-capped) content, the gold row is the
/// content followed by the end id.
pub fn teacher_pair(target: &[usize], max_tgt_len: usize) -> (Vec<usize>, Vec<usize>) {
    let content = &target[..target.len().min(max_tgt_len)];
    let mut dec_input = Vec::with_capacity(content.len() + 1);
    dec_input.push(START_ID);
    dec_input.extend_from_slice(content);
    let mut gold = content.to_vec();
    gold.push(END_ID);
    (dec_input, gold)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Serialize a model: magic, version, config JSON, then named f64 blobs in
/// parameter order. Little-endian throughout; round trips bit-exactly.
pub fn save_checkpoint(model: &Seq2SeqModel, path: &Path) -> Result<(), ModelError> {
    let io_err = |e: std::io::Error| ModelError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(&model.config).expect("config serializes");
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in &model.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &dim in &p.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel, ModelError> {
    let io_err = |e: std::io::Error| ModelError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *cursor + n > bytes.len() {
            return Err(ModelError::CheckpointFormat("unexpected end of file".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32, ModelError> {
        let s = take(cursor, 4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic".into()));
    }
    let version = take_u32(&mut cursor)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat(format!("unsupported version {version}")));
    }
    let config_len = take_u32(&mut cursor)? as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cursor, config_len)?)
        .map_err(|e| ModelError::CheckpointFormat(format!("config: {e}")))?;
    config.validate()?;
    let n_params = take_u32(&mut cursor)? as usize;
    let mut params = IndexMap::new();
    for _ in 0..n_params {
        let name_len = take_u32(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|e| ModelError::CheckpointFormat(format!("name: {e}")))?;
        let ndims = take_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let s = take(&mut cursor, 8)?;
            shape.push(u64::from_le_bytes(s.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cursor, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, ParamTensor { shape, data });
    }
    if cursor != bytes.len() {
        return Err(ModelError::CheckpointFormat("trailing bytes".into()));
    }
    let model = Seq2SeqModel { config, params };
    // Shape audit against a fresh init of the same config.
    let reference = Seq2SeqModel::init(model.config.clone())?;
    if reference.params.len() != model.params.len()
        || reference
            .params
            .iter()
            .zip(&model.params)
            .any(|((n1, p1), (n2, p2))| n1 != n2 || p1.shape != p2.shape)
    {
        return Err(ModelError::CheckpointFormat(
            "parameter names/shapes disagree with config".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::UNK_ID;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_src_len: 16,
            max_tgt_len: 12,
            dropout_rate: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = Seq2SeqModel::init(tiny_config()).unwrap();
        let b = Seq2SeqModel::init(tiny_config()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_config();
        other.seed = 8;
        let c = Seq2SeqModel::init(other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = tiny_config();
        cfg.d_model = 8;
        cfg.n_heads = 3;
        assert!(matches!(Seq2SeqModel::init(cfg), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn census_matches_hand_count_for_reference_config() {
        let cfg = ModelConfig {
            vocab_size: 50,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_src_len: 32,
            max_tgt_len: 16,
            dropout_rate: 0.0,
            seed: 1,
        };
        // Hand count: embed 50*16=800; encoder layer 4*256+5*16+2*512+32=2160;
        // decoder layer 8*256+7*16+2*512+32=3216; two final norms 4*16=64;
        // output projection 16*50+50=850. Total 7090.
        assert_eq!(parameter_census(&cfg), 7090);
        let model = Seq2SeqModel::init(cfg).unwrap();
        let total: usize = model.params.values().map(ParamTensor::numel).sum();
        assert_eq!(total, 7090);
    }

    #[test]
    fn encode_shape_and_position_sensitivity() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 5, 6, 7, 8, 9, 10]).unwrap();
        assert_eq!((enc.states.rows, enc.states.cols), (7, 8));
        assert!(!enc.truncated);
        let swapped = model.encode(&[5, 4, 6, 7, 8, 9, 10]).unwrap();
        assert_ne!(enc.states.data, swapped.states.data);
    }

    #[test]
    fn overlong_source_truncates_with_flag() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let long: Vec<usize> = (0..40).map(|i| 4 + (i % 8)).collect();
        let enc = model.encode(&long).unwrap();
        assert!(enc.truncated);
        assert_eq!(enc.states.rows, 16);
    }

    #[test]
    fn decode_logits_shape() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 5, 6]).unwrap();
        let logits = model.decode_logits(&enc, &[START_ID, 4, 5]).unwrap();
        assert_eq!((logits.rows, logits.cols), (3, 12));
    }

    #[test]
    fn decode_requires_start_token() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 5, 6]).unwrap();
        assert!(matches!(model.decode_logits(&enc, &[4, 5]), Err(ModelError::BadTarget)));
        assert!(matches!(model.decode_logits(&enc, &[]), Err(ModelError::BadTarget)));
    }

    #[test]
    fn causality_edits_at_j_leave_earlier_logits_unchanged() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 5, 6, 7]).unwrap();
        let base = model.decode_logits(&enc, &[START_ID, 4, 5, 6, 7]).unwrap();
        for j in 1..5 {
            let mut edited = vec![START_ID, 4, 5, 6, 7];
            edited[j] = UNK_ID;
            let out = model.decode_logits(&enc, &edited).unwrap();
            let cols = base.cols;
            assert_eq!(
                &out.data[..j * cols],
                &base.data[..j * cols],
                "rows before {j} must be unaffected"
            );
        }
    }

    #[test]
    fn padding_source_leaves_logits_unchanged() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 5, 6]).unwrap();
        let padded = model.encode(&[4, 5, 6, PAD_ID, PAD_ID]).unwrap();
        let a = model.decode_logits(&enc, &[START_ID, 7, 8]).unwrap();
        let b = model.decode_logits(&padded, &[START_ID, 7, 8]).unwrap();
        let max_diff = a
            .data
            .iter()
            .zip(&b.data)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(max_diff < 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn all_pad_source_errors() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        assert!(matches!(model.encode(&[PAD_ID, PAD_ID]), Err(ModelError::EmptySource)));
        assert!(matches!(model.encode(&[]), Err(ModelError::EmptySource)));
    }

    #[test]
    fn constant_logits_model_repeats_argmax_token() {
        let mut model = Seq2SeqModel::init(tiny_config()).unwrap();
        // Zero the output projection and pin the bias: logits become the
        // bias row everywhere, so generation must emit the argmax forever.
        let v = model.config.vocab_size;
        model.params["out.proj"].data.iter_mut().for_each(|w| *w = 0.0);
        let mut bias = vec![0.0; v];
        bias[6] = 5.0;
        model.params["out.bias"].data = bias;
        let enc = model.encode(&[4, 5]).unwrap();
        let out = model.generate(&enc, 1, 7, 0.0).unwrap();
        assert_eq!(out, vec![6; 7]);
    }

    #[test]
    fn generation_is_deterministic() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let enc = model.encode(&[4, 9, 6, 5]).unwrap();
        let a = model.generate(&enc, 4, 10, 0.0).unwrap();
        let b = model.generate(&enc, 4, 10, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model, back);
        // Byte-identical re-save.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corrupt_magic() {
        let model = Seq2SeqModel::init(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
    }
}

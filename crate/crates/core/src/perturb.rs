//! Adversarial perturbation of encoder output states.
//!
//! Given a trained (or training) model and a teacher-forcing target, find a
//! nearby set of encoder states that increases the generation loss. Both
//! the single-step sign attack and the iterated projected variant bound the
//! perturbation per coordinate, so every output lies in the max-norm
//! epsilon ball around the input.
//!
//! Floating point footnote: `base + epsilon` can round upward, which would
//! make the measured displacement exceed epsilon by an ulp. [`step_within`]
//! nudges such coordinates back until the measured difference fits, so the
//! containment bound holds under the same arithmetic any caller would use
//! to check it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{teacher_pair, EncoderStates, ModelError, Seq2SeqModel};
use crate::tensor::{Matrix, Tape};
use crate::text::PAD_ID;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid perturb config: {0}")]
    BadConfig(String),
    #[error("gradient shape {grad:?} does not match states shape {states:?}")]
    ShapeMismatch { grad: (usize, usize), states: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub mode: AttackMode,
    /// Per-coordinate max-norm bound on the total displacement.
    pub epsilon: f64,
    /// PGD step size; ignored by FGSM.
    pub eta: f64,
    /// PGD iteration count; FGSM is always a single step.
    pub iterations: usize,
    /// Perturb padding positions too (they are skipped by default since
    /// nothing downstream attends to them).
    pub perturb_masked_positions: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            mode: AttackMode::Fgsm,
            epsilon: 0.01,
            eta: 0.01,
            iterations: 3,
            perturb_masked_positions: false,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(PerturbError::BadConfig("epsilon must be finite and >= 0".into()));
        }
        if self.mode == AttackMode::Pgd && self.iterations > 0 && !(self.eta > 0.0) {
            return Err(PerturbError::BadConfig("pgd with iterations > 0 needs eta > 0".into()));
        }
        Ok(())
    }
}

/// `base + delta`, nudged back toward `base` until the measured
/// displacement `out - base` no longer exceeds `delta` in magnitude.
fn step_within(base: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        return base;
    }
    let mut out = base + delta;
    if delta > 0.0 {
        while out - base > delta {
            out = out.next_down();
        }
    } else {
        while out - base < delta {
            out = out.next_up();
        }
    }
    out
}

/// Clamp `value` into the epsilon ball around `base`, with the same
/// measured-displacement guarantee as [`step_within`].
fn project_into_ball(base: f64, value: f64, epsilon: f64) -> f64 {
    let mut v = value.min(base + epsilon).max(base - epsilon);
    while v - base > epsilon {
        v = v.next_down();
    }
    while v - base < -epsilon {
        v = v.next_up();
    }
    v
}

/// Gradient of the teacher-forced cross-entropy loss with respect to the
/// encoder states. The states enter a fresh tape as the only differentiable
/// leaf; model parameters are bound as constants and receive nothing.
pub fn embedding_grad(
    model: &Seq2SeqModel,
    enc: &EncoderStates,
    target: &[usize],
) -> Result<Matrix, PerturbError> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    let enc_id = tape.leaf_from_matrix(&enc.states, true);
    let (dec_input, gold) = teacher_pair(target, model.config.max_tgt_len);
    let logits =
        model.decode_on_tape(&mut tape, &binding, enc_id, &enc.source_mask, &dec_input, None)?;
    let loss = tape.cross_entropy(logits, &gold, PAD_ID).map_err(ModelError::from)?;
    tape.backward(loss).map_err(ModelError::from)?;
    Ok(tape.grad_matrix(enc_id).expect("differentiable leaf has a gradient"))
}

/// Teacher-forced mean cross-entropy of `target` given fixed encoder
/// states; the loss the attacks are trying to increase.
pub fn adversarial_objective(
    model: &Seq2SeqModel,
    enc: &EncoderStates,
    target: &[usize],
) -> Result<f64, PerturbError> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    let enc_id = tape.leaf_from_matrix(&enc.states, false);
    let (dec_input, gold) = teacher_pair(target, model.config.max_tgt_len);
    let logits =
        model.decode_on_tape(&mut tape, &binding, enc_id, &enc.source_mask, &dec_input, None)?;
    let loss = tape.cross_entropy(logits, &gold, PAD_ID).map_err(ModelError::from)?;
    Ok(tape.scalar_value(loss))
}

/// Single-step sign attack: `out = in + epsilon * sign(grad)`, with
/// `sign(0) = 0`. Padding rows stay untouched unless asked otherwise.
pub fn fgsm(
    enc: &EncoderStates,
    grad: &Matrix,
    epsilon: f64,
    perturb_masked_positions: bool,
) -> Result<EncoderStates, PerturbError> {
    if (grad.rows, grad.cols) != (enc.states.rows, enc.states.cols) {
        return Err(PerturbError::ShapeMismatch {
            grad: (grad.rows, grad.cols),
            states: (enc.states.rows, enc.states.cols),
        });
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(PerturbError::BadConfig("epsilon must be finite and >= 0".into()));
    }
    let mut out = enc.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let cols = out.states.cols;
    for row in 0..out.states.rows {
        if !perturb_masked_positions && !enc.source_mask[row] {
            continue;
        }
        for col in 0..cols {
            let idx = row * cols + col;
            let g = grad.data[idx];
            if g == 0.0 {
                continue;
            }
            let delta = if g > 0.0 { epsilon } else { -epsilon };
            out.states.data[idx] = step_within(enc.states.data[idx], delta);
        }
    }
    Ok(out)
}

/// Iterated attack: `iterations` rounds of `eta * grad`, each step clamped
/// to `[-epsilon, epsilon]` and the running displacement projected back
/// into the epsilon ball around the original states. The loss (and thus
/// the gradient) is recomputed against the same target every round.
pub fn pgd(
    model: &Seq2SeqModel,
    enc: &EncoderStates,
    target: &[usize],
    config: &PerturbConfig,
) -> Result<EncoderStates, PerturbError> {
    config.validate()?;
    if config.mode != AttackMode::Pgd {
        return Err(PerturbError::BadConfig("pgd called with a non-pgd config".into()));
    }
    let mut current = enc.clone();
    if config.iterations == 0 || config.epsilon == 0.0 {
        return Ok(current);
    }
    let cols = enc.states.cols;
    for _ in 0..config.iterations {
        let grad = embedding_grad(model, &current, target)?;
        for row in 0..enc.states.rows {
            if !config.perturb_masked_positions && !enc.source_mask[row] {
                continue;
            }
            for col in 0..cols {
                let idx = row * cols + col;
                let step = (config.eta * grad.data[idx]).clamp(-config.epsilon, config.epsilon);
                if step == 0.0 {
                    continue;
                }
                let moved = current.states.data[idx] + step;
                current.states.data[idx] =
                    project_into_ball(enc.states.data[idx], moved, config.epsilon);
            }
        }
    }
    Ok(current)
}

/// Run the configured attack and return the perturbed states.
pub fn perturb(
    model: &Seq2SeqModel,
    enc: &EncoderStates,
    target: &[usize],
    config: &PerturbConfig,
) -> Result<EncoderStates, PerturbError> {
    config.validate()?;
    match config.mode {
        AttackMode::Fgsm => {
            if config.epsilon == 0.0 {
                return Ok(enc.clone());
            }
            let grad = embedding_grad(model, enc, target)?;
            fgsm(enc, &grad, config.epsilon, config.perturb_masked_positions)
        }
        AttackMode::Pgd => pgd(model, enc, target, config),
    }
}

/// Largest measured per-coordinate displacement between two state sets.
pub fn max_displacement(a: &Matrix, b: &Matrix) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

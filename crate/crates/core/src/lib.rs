//! Desk-scale laboratory for studying robustness of tiny seq2seq
//! summarizers: an autodiff tape, a miniature transformer, embedding-space
//! adversarial perturbation, a training loop, bias metrics, and synthetic
//! benchmark generators. Everything runs on one CPU core with f64 math and
//! seeded RNG so that experiments are reproducible bit for bit.

pub mod benchgen;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod tensor;
pub mod text;
pub mod train;

//! Soft-label compression for distilled datasets.
//!
//! The crate stores teacher supervision for a distilled dataset as a compact
//! binary *label store* and trains students from it:
//!
//! - [`store`]: batch-level label pruning, the `SLBL` binary format and its
//!   byte accounting (theoretical vs. actual compression).
//! - [`logits`]: temperature softmax, top-k pre-softmax logit quantization,
//!   masked softmax over the stored classes, KL divergence and the closed-form
//!   logit/temperature relations used for student alignment.
//! - [`calibration`]: the step-annealed teacher temperature used when stored
//!   labels are reused, the per-epoch student temperature grid search, and the
//!   KD loss with its exact gradient.
//! - [`diversity`]: within-class cosine similarity and Gaussian-kernel MMD.
//! - [`synth`]: class-wise statistic-matching synthesis on feature vectors.
//! - [`trainer`]: a small end-to-end harness (synthetic task, relabeling,
//!   student training, Pareto sweeps).
//! - [`cli`]: the `slbl` command-line front end.
//!
//! Everything numeric is computed in `f64`; only stored payloads are `f32`.

pub mod calibration;
pub mod cli;
pub mod diversity;
mod error;
pub mod features;
pub mod logits;
pub mod model;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

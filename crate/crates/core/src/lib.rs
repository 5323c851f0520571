//! Cross-modal (RGB / depth) person re-identification.
//!
//! A network trained on one modality supervises a network for the other
//! modality through embedding regression on time-coupled image pairs. The
//! crate covers data handling, backbones with stage-wise freezing, the loss
//! functions, training loops (including one-stream and zero-padding
//! baselines), the single-gallery-shot evaluation protocol, diagnostics and an
//! experiment runner.

pub mod backbone;
pub mod dataset;
pub mod diagnostics;
pub mod embedding;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod training;
pub mod error;
pub mod seed;

pub use error::{Error, Result};

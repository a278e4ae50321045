//! Test-time augmentation (TTA) for cross-domain atrial-fibrillation
//! detection from single-lead ECG.
//!
//! The crate is organised as a pipeline:
//!
//! - [`types`]: labels, records, probability vectors and classification metrics
//! - [`dataio`]: binary record storage, CSV manifests, corpus ingestion and a
//!   synthetic two-domain ECG generator
//! - [`preprocess`]: baseline removal, band-pass filtering, resampling,
//!   normalisation and spectrograms
//! - [`augment`]: the eight label-invariant augmentation operators, policy
//!   sampling and class balancing
//! - [`model`]: a two-branch transformer / spectrogram classifier with its own
//!   reverse-mode differentiation core, trainer and weight format
//! - [`tta`]: Monte Carlo test-time augmentation with mode aggregation
//! - [`bench`]: robustness sweeps, TTA convergence curves and reports
//! - [`config`]: the `key = value` configuration surface shared by all stages

pub mod augment;
pub mod bench;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tta;
pub mod types;

pub use error::{Error, Result};
pub use types::{ConfusionCounts, EcgRecord, Label, Mode, ProbVector};

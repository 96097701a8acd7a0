//! Proper scores, Bregman and kernel bias-variance decompositions,
//! calibration-error estimators, and CKA-based disentanglement of kernel
//! spherical scores.

pub mod bregman;
pub mod calibration;
pub mod cka;
pub mod data;
pub mod error;
pub mod estimator_risk;
pub mod io;
pub mod kernel_decomp;
pub mod kernels;
pub mod numeric;
pub mod scores;
pub mod synth;

pub use data::{EnsembleGrid, LabeledPredictionSet, SampleSet, Seed, SimplexVector};
pub use error::{Error, Result};
pub use kernels::KernelSpec;
pub use scores::ScoreKind;

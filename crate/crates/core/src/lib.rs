//! Per-sample uncertainty for classifier ensembles.
//!
//! Given `M` member predictions over `N` samples and `C` classes, this crate
//! computes:
//!
//! | Module | What it provides |
//! |--------|------------------|
//! | [`ept`] | the EPT container for prediction tensors, CSV labels |
//! | [`stats`] | softmax, ensemble mean/std, entropy |
//! | [`gating`] | variance gate, gated member distributions, gated TU/AU/EU |
//! | [`baseline`] | entropy decomposition, EPCE, EPKL, EPJS |
//! | [`margin`] | top-2 SNR decision rule and gated margin uncertainty (GMU) |
//! | [`diagnostics`] | diversity collapse, coverage/risk, AUROC, ECE |
//! | [`calibration`] | temperature scaling fitted by grid + golden-section search |
//! | [`synth`] | seeded synthetic ensembles used as test fixtures |
//! | [`report`] | per-sample report rows with CSV/JSON emission |
//!
//! All quantities are in nats. Moments are always accumulated in `f64`.
//!
//! ```
//! use ndarray::array;
//! use vgate::ept::{Kind, PredictionTensor, Task};
//! use vgate::gating::{gated_decomposition, GateConfig};
//!
//! let data = array![[[0.9, 0.1]], [[0.5, 0.5]]];
//! let tensor = PredictionTensor::new(Kind::Probs, Task::Multiclass, data).unwrap();
//! let out = gated_decomposition(&tensor, &GateConfig::new(1.0).unwrap()).unwrap();
//! assert!(out[0].eu >= 0.0);
//! ```

pub mod baseline;
pub mod calibration;
pub mod diagnostics;
pub mod ept;
mod error;
pub mod gating;
pub mod margin;
pub mod report;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

/// Floor applied to probabilities inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Default stabilizer added to variance denominators.
pub const DEFAULT_EPSILON: f64 = 1e-8;

//! Anomaly detection with residual adaptation.
//!
//! A pretrained residual backbone is kept frozen while small gated 1×1
//! corrections and an embedding head are trained with a radial one-class
//! objective under outlier exposure. The crate contains everything needed to
//! run that recipe end to end on CPU: a reverse-mode autodiff engine, the
//! adapter backbone, objectives, a synthetic factor-image generator with the
//! evaluation protocols, SGD training, ranking metrics and the baselines.

pub mod autodiff;
pub mod baselines;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

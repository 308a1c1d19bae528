//! Probabilistic hierarchical time-series forecasting with joint refinement
//! and a closed-form distributional coherency regularizer.
//!
//! The crate is organized around the pipeline:
//!
//! 1. [`hierarchy`] — tree of aggregation relations and consistency checks;
//! 2. [`panel`] — panels, preprocessing, synthetic data, windows, masking;
//! 3. [`gaussian`] — closed-form divergences, coherency loss, CRPS, IS;
//! 4. [`model`] — the neural-process forecaster producing raw per-node
//!    Gaussians;
//! 5. [`refine`] — the gated refinement of raw parameters across the
//!    hierarchy;
//! 6. [`train`] — ELBO, total objective, pre-training, variants, backtesting;
//! 7. [`evaluate`] — Monte-Carlo forecasting, per-level metrics, the
//!    missing-value robustness protocol;
//! 8. [`checkpoint`] — bit-exact model serialization.

pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod gaussian;
pub mod hierarchy;
pub mod model;
pub mod panel;
pub mod refine;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{
    CheckpointError, DataError, EvalError, GaussianError, HierarchyError, ModelError, TrainError,
};
pub use gaussian::{GaussianDist, GaussianForecastSet};
pub use hierarchy::{build_hierarchy, Hierarchy};
pub use panel::{Consistency, PreprocessMode, TimeSeriesPanel, WindowSet};

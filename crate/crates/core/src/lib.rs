//! Exact hypergradients through reversible fixed-point SGD with momentum.
//!
//! Training runs forward in fixed point and stores the bits discarded by
//! momentum decay in an [`InfoBuffer`], so the reverse pass reconstructs
//! every iterate exactly instead of caching the trajectory.

// Index loops mirror the maths; negated float comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fixed;
pub mod revbuf;
pub mod autodiff;
pub mod data;
pub mod models;
pub mod train;
pub mod meta;
pub mod experiment;

pub use error::{Error, Result};
pub use fixed::{FixedScalar, FixedVec};
pub use revbuf::{InfoBuffer, Ratio};
pub use data::Dataset;
pub use models::{Model, ParamLayout};
pub use train::{hypergradient, HypergradResult, Schedules, TrainState};
pub use meta::{AdamConfig, MetaConfig, MetaOutcome, PhiLayout, RunSpec};
pub use experiment::{ExperimentConfig, ExperimentId};

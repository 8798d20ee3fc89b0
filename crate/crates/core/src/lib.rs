//! Sparse mixture-of-experts tuning for a toy vision-language model.
//!
//! The crate contains a small reverse-mode autodiff engine, a top-k router
//! with capacity limits, expert ensembles initialized by replicating a dense
//! feed-forward unit, the training objectives, a staged tuning pipeline and
//! routing analytics.

pub mod analytics;
pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod model;
pub mod moe;
pub mod objectives;
pub mod params;
pub mod router;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{count_parameters, ModelConfig, ModelInput, ParamCount, Placement, ToyModel};
pub use moe::{init_from_ffn, ExpertEnsemble, FfnParams, RouterInit};
pub use router::{RoutingConfig, RoutingDecision};
pub use tensor::Tensor;

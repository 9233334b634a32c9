//! Multi-resolution knowledge distillation for federated keypoint
//! regression, plus a linear surrogate for checking convergence constants.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod federated;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use config::{ExperimentConfig, ExperimentKind};
pub use data::{Resolution, Scene, SceneConfig, SyntheticSample};
pub use federated::{Aggregator, ClientSpec, Optimizer, RoundLog, RunOptions, RunOutput, Schedule};
pub use losses::LossCoeffs;
pub use metrics::EvalResult;
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Interp, Tensor, UpsampleOp};
pub use theory::{TheoryConfig, TheoryConstants};

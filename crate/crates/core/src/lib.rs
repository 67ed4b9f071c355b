//! Bidirectional selective state-space models with task-aware
//! mixture-of-experts for multi-task classification of multichannel
//! signals with heterogeneous channel counts and lengths.

pub mod autograd;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod bimamba;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod moe;
pub mod nn;
pub mod ssm;
pub mod st_adaptive;
pub mod train;
pub mod tensor;

pub use autograd::{Eval, Graph, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use ops::GraphExt;
pub use tensor::{Element, Tensor};

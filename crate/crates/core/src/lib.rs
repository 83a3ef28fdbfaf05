//! Differentiable, batch-vectorized simulation of recommender ecosystems.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod behaviors;
pub mod dist;
pub mod inference;
pub mod logprob;
pub mod network;
pub mod runtime;
pub mod scenarios;
pub mod tensor;

pub use error::{Error, Result};
pub use dist::{Distribution, RngStream};
pub use logprob::{log_probability_from_value_trajectory, log_probability_per_row, ObservedTrajectory};
pub use network::{Ctx, Dep, DepMode, Entry, FieldKind, FieldSpec, Network, ParamSet, Payload, Value, ValueSpec, Variable};
pub use runtime::{Runtime, Slice, Trajectory};
pub use tensor::{Gradients, Tape, Tensor};

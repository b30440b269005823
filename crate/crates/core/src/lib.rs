pub mod affinity;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod expert_init;
pub mod gradcheck;
pub mod mlp;
pub mod moe;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod router_init;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};

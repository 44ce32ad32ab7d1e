//! Linear span networks for skeleton detection: tensor engine, linear span
//! units, network wiring, training, span analysis, evaluation and data.

pub mod data;
pub mod error;
pub mod eval;
pub mod lsu;
pub mod model;
pub mod scalar;
pub mod span;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{build_variant, NetworkSpec};
pub use scalar::{Precision, Scalar};
pub use tensor::{Graph, ParamSet, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

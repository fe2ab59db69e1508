//! Core of the scale-free learnable-multiplier lab.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom pin the common cases. Training math defaults to
//! `f64`.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod reparam;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Unary, Var};
pub use error::{Error, Result};
pub use model::{BlockKind, Model, ModelConfig, ProjectorMode};
pub use params::{Param, ParamKind, ParamStore};
pub use reparam::{MultiplierSpec, PlacementMode, ReparamLayer};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{nan_guard, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;

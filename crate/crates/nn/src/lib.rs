//! Minimal differentiable operator set used by the daugnet networks: a dense
//! rank-4 tensor, a recording tape with exact backward passes for each
//! operator, and an Adam optimizer.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use graph::{sigmoid, Grads, Graph, VarId};
pub use layers::{functional, BoundConv, Conv2d};
pub use tensor::{Shape, Tensor4};

/// Stabilizer used by every normalization in the networks.
pub const NORM_EPS: f32 = 1e-5;

/// Negative slope of the leaky ReLU in the discriminator.
pub const LEAKY_SLOPE: f32 = 0.2;

//! Minimal reverse-mode automatic differentiation over dense `f64`
//! tensors, with the layer vocabulary the separation networks need.

mod adam;
pub mod gradcheck;
pub mod checkpoint;
mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::Checkpoint;
pub use ops::{Conv2dOpts, BCE_EPS, DISTANCE_FLOOR, L2_NORM_EPS};
pub use params::{BufferId, ParamGroup, ParamId, ParamKind, ParamSnapshot, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use gradcheck::{gradcheck, GradCheck};

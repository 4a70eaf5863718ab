//! Minimal dense layers with hand-written backward passes.

mod layers;
mod mat;
mod params;
mod real;

pub use layers::{gelu, gelu_grad, Conv2d, Dims, Linear};
pub use mat::{gemm, MatMut, MatRef};
pub use params::{init_slice, Init, ParamId, ParamLayout, ParamSpec};
pub use real::Real;

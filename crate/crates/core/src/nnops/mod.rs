//! Differentiable dense-array primitives with reverse-mode gradients.

mod layers;
mod ops;
mod params;
mod tape;
mod tensor;

pub use layers::{BatchNorm, Linear, LinearBnAct, Mode};
pub(crate) use layers::in_layer;
pub use ops::{Activation, BnMode, Reduction, BN_EPS};
pub use params::{ParamStore, BN_MOMENTUM};
pub use tape::{BackwardCtx, GradTape, Gradients, Op, RunningUpdate, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

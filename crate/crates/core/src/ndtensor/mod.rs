//! Dense tensors, forward primitives and a gradient tape.

pub(crate) mod kernels;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use ops::{ConvKind, ConvSpec, NormMode};
pub use param::{Param, ParamId, ParamRole};
pub use tape::{BatchStats, CustomBackward, Tape, Target, Var};
pub use tensor::Tensor;

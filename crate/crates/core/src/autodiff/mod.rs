//! Minimal reverse-mode automatic differentiation over rank-4 f32 tensors,
//! restricted to the layers the enhancement networks need.

mod dump;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;


pub use dump::{read_tensor, write_tensor, DumpError, TENSOR_MAGIC, TENSOR_VERSION};
pub use optim::{OptState, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{BatchNorm2d, Binding, Conv2d, Entry, EntryKind, ParamId, ParamStore, BN_EPS, BN_MOMENTUM};
pub use tape::{BatchStats, BinaryOp, BnMode, Tape, Var, DIV_EPS};
pub use tensor::{Real, Shape, Tensor};

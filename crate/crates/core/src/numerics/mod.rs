//! Dense tensors, forward kernels and tape-based reverse-mode differentiation.

pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use float::{lit, DType, Float};
pub use graph::{Graph, Var};
pub use ops::Conv2dSpec;
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;

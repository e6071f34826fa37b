//! Dense `f64` tensors, reverse-mode differentiation and gradient checking.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, FdConfig, FdReport};
pub use graph::{AttentionSpec, Graph, Var};
pub use kernels::{stable_softmax, MASK_VALUE};
pub use rng::{mix_seed, Rng, ALGORITHM as RNG_ALGORITHM};
pub use tensor::Tensor;

//! Deterministic CPU tensor engine with tape-based reverse-mode gradients.

pub mod element;
pub mod gemm;
pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use element::{DType, Element};
pub use gradcheck::grad_check;
pub use rng::{derive_seed, RngState, RngStream};
pub use tape::{BnBatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;

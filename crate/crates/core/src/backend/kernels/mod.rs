//! Forward and adjoint kernels on plain tensors. The tape wires these up;
//! they are also usable directly for inference.

pub mod broadcast;
pub mod conv;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod softmax;

//! Two-stage teacher-guided distillation for fine-grained image classifiers
//! trained from random initialization.
//!
//! The crate is organised bottom-up: [`backend`] is a small differentiable
//! tensor engine, [`models`] builds the networks on top of it, [`augment`]
//! and [`distill`] supply the attention-driven views and losses, [`data`]
//! handles datasets, and [`pipeline`] runs complete training stages.

pub mod augment;
pub mod backend;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradsuite;
pub mod models;
pub mod pipeline;

pub use backend::{grad_check, BnMode, DType, Element, RngStream, Tape, Tensor, Var};
pub use error::{Error, ErrorClass, Result};

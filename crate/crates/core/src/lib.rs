//! Low-rank finetuning with line-search acceleration along the last
//! optimizer update, plus a FLOPs-accounted experiment harness.

pub mod accounting;
pub mod adapters;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fastforward;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod output;
pub mod rng;
pub mod task;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;

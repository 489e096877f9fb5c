//! Robustness distillation for small convolutional networks: a tape-based
//! autodiff engine, block CNNs, mixup, activated-channel-map distillation,
//! gradient attacks, a deterministic trainer and numerical theory checks.

pub mod acm;
pub mod attacks;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};

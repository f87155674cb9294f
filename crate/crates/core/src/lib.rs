#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod mask_store;
pub mod model;
pub mod moe;
pub mod rl;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

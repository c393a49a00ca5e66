pub mod data;
pub mod error;
pub mod fka;
pub mod harness;
pub mod rng;
pub mod sai;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

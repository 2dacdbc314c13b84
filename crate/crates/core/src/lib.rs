pub mod adapter;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod init;
pub mod tensor;
pub mod training;
pub mod text_anchor;
pub mod weights;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

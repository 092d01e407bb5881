// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod gradcheck;
pub mod gumbel;
pub mod image;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod synthetic;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};

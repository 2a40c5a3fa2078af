// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod combiner;
pub mod curation;
pub mod error;
pub mod gradcam;
pub mod harness;
pub mod image_io;
mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selector;
pub mod synthetic;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;

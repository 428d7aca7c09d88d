//! Training and evaluation engine for Unet-family segmentation networks,
//! including NUMSnet-style cross-scan propagation of nested-layer features.

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};

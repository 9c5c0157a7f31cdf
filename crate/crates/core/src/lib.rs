//! Row/column-restricted fine-tuning (RoCoFT) on a small transformer
//! classifier, together with the analysis toolkit used to study it:
//! empirical neural tangent kernels over restricted parameter subsets,
//! kernel logistic regression, Wanda importance scoring for row/column
//! selection, and the evaluation metrics of the usual text-classification
//! benchmarks.
//!
//! Everything runs at desk scale in f64 so that gradients, kernels and
//! counts can be checked against exact oracles.

pub mod checkpoint;
pub mod data;
pub mod eigen;
pub mod error;
pub mod klr;
pub mod metrics;
pub mod model;
pub mod ntk;
pub mod numeric;
pub mod optim;
pub mod peft;
pub mod selection;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

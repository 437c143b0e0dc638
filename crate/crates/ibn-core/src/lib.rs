//! Graph-aware recurrent forecasting for multivariate time series with
//! missing variables: uncertainty-weighted imputation, Gaussian-kernel
//! graph convolution gates, and a bidirectional recursive backbone.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod imputation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod testing;

pub use autodiff::{Tape, VarId};
pub use error::{IbnError, Result};
pub use tensor::Tensor;

//! Sparse deep learning for time series: structure selection of MLP and
//! Elman-RNN forecasters by prior annealing, and prediction intervals for
//! the selected model.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod prior;
pub mod rng;
pub mod train;
pub mod uq;

pub use error::{Error, Result};

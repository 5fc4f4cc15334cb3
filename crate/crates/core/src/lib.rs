//! Multi-scale pyramid recurrent forecasting.
//!
//! The pipeline is: [`pyramid`] builds progressively coarser subsequences of the
//! input window, [`interaction`] runs recurrent intra-scale blocks and bottleneck
//! inter-scale blocks from the coarsest scale down, and [`model`] predicts the
//! horizon from every scale and fuses the per-scale forecasts. [`training`]
//! fits any [`training::Trainable`] with Adam on an L1 loss with early stopping,
//! and [`data`] handles CSV series, chronological splits and windowing.
//!
//! Everything differentiable runs on the small tape engine in [`tensor`].

pub mod baselines;
pub mod data;
mod error;
pub mod interaction;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

//! Counterfactual outcome estimation over irregular, partially observed
//! time series with a frequency-domain confounder branch and a latent
//! stochastic controlled differential equation.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod confounder;
pub mod error;
pub mod fourier;
pub mod grid;
pub mod io;
pub mod latent;
pub mod lipschitz;
pub mod metrics;
pub mod model;
pub mod outcome;
pub mod path;
pub mod plot;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Regime-aware forecasting of multivariate behaviour series on a self-organizing latent map.
//!
//! The pipeline clusters short behaviour windows into regime summaries
//! ([`transition`]), embeds each step into a condition-aware latent space with
//! an 8x8 self-organizing map ([`convae_som`]), forecasts in that latent space
//! with an attention LSTM and a damping network ([`ifm`]), and explains and
//! risk-scores the resulting trajectories ([`explain`], [`risk`]).

pub mod audit;
pub mod bundle;
pub mod convae_som;
pub mod data;
pub mod error;
pub mod explain;
pub mod ifm;
pub mod metrics;
pub mod nn;
pub mod risk;
pub mod tape;
pub mod transition;

pub use error::{AfnError, Result};

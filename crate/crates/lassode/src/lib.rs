//! Latent-ODE sequence model for irregular dynamical-system forecasting:
//! synthetic ODE data generation, channel-wise GRU summaries with FiLM token
//! modulation, a hub-augmented sparse-expert transformer, and a token-wise
//! piecewise-affine latent flow decoded by a linear readout.

pub mod backbone;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

//! Generative class-incremental learning with a selective-forgetting stage.
//!
//! A one-hot conditional VAE is pretrained on all classes but one, made to
//! forget a class by retraining that class's conditioning toward surrogate
//! images under generative replay and a Fisher-weighted penalty, and then
//! taught the held-out class by fine-tuning or elastic weight consolidation.
//! Generated samples are scored by an external classifier.

pub mod autodiff;
pub mod cvae;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod fisher;
pub mod train;

pub use error::{Error, Result};

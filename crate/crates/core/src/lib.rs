//! Contrastive pre-training of physiological-signal encoders from
//! stimulus-aligned recordings of many subjects.

pub mod autograd;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod meiosis;
pub mod params;
pub mod projector;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

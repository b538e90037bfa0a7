//! Multi-speaker voice cloning with a shared latent linguistic space.
//!
//! Text and speech encoders map into one latent space, a speaker-conditioned
//! acoustic decoder and a neural vocoder map back out, and a small set of
//! pipeline stages adapts the model to a new voice from a handful of
//! utterances.

pub mod diagnostics;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod net;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod vocoder;

pub use error::{Error, Result};

//! Attribute-controlled text-to-motion generation.
//!
//! A decoupling VQVAE learns attribute-free semantic tokens from motion; a
//! masked transformer predicts those tokens from text; the decoder renders
//! motion from tokens plus user-chosen attributes.

pub mod bounds;
pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod motion;
pub mod nn;
pub mod registry;
pub mod rng;
pub mod schema;
pub mod synth;
pub mod transformer;
pub mod vqvae;

pub use error::{Error, Result};

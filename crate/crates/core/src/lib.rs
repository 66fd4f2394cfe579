//! Few-shot region localization over pixel-level feature maps.
//!
//! Three adapters map frozen per-pixel features to region labels: a fixed
//! cosine-threshold matcher, a pixel classifier, and a Siamese pair
//! classifier that compares target pixels against reference pixels from an
//! annotated template. Predictions are cleaned with connected-component
//! filtering and turned into landmarks or point prompts for a segmenter.

pub mod adapters;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};

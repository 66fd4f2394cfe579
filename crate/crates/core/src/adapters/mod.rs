//! Adapters from pixel features to region labels.
//!
//! - [`basic`]: cosine similarity to a template vector, fixed threshold, no
//!   training.
//! - [`classification`]: a per-pixel classifier over `L + 1` classes.
//! - [`contrastive`]: a Siamese pair classifier that scores target pixels
//!   against reference pixels drawn from the template.

pub mod basic;
pub mod classification;
pub mod contrastive;

pub use basic::{basic_localize, cosine_similarity, TemplateReduction};
pub use classification::{
    fit_classifier, predict_classification, train_classification_adapter, ClassifierConfig,
};
pub use contrastive::{
    contrastive_localize, fit_contrastive, load_contrastive, pair_score, read_contrastive,
    save_contrastive, train_contrastive_adapter, write_contrastive, ContrastiveConfig,
    ContrastiveModel, ReferenceReduction, CONTRASTIVE_MAGIC,
};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::rng::{seeded, streams};

/// Optimisation settings shared by the trained adapters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        self.adam.validate()
    }
}

/// Shuffled mini-batch order, one `Vec` of example indices per batch, for
/// every epoch.
pub(crate) fn epoch_batches(
    n: usize,
    config: &TrainConfig,
    seed: u64,
) -> impl Iterator<Item = Vec<Vec<usize>>> {
    let mut rng = seeded(seed, streams::SHUFFLE);
    let batch = config.batch_size;
    (0..config.epochs).map(move |_| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    })
}

/// Per-pixel scores over `channels` classes (or one similarity channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                what: "score map length",
                expected: height * width * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at_index(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }
}

use rayon::prelude::*;

use super::{epoch_batches, ScoreMap, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, LabelMask};
use crate::nn::{
    adam_step, argmax, backward, cross_entropy, forward, init_model, softmax, Activation,
    AdamState, Gradients, LayerSpec, MlpModel,
};
use crate::sampling::ClassificationSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// Hidden layer widths; the default two hidden layers plus the output
    /// layer make three dense layers.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            train: TrainConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn layer_specs(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        let last = dims.len() - 2;
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect()
    }
}

pub fn train_classification_adapter(
    set: &ClassificationSet,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<MlpModel> {
    fit_classifier(set, config, seed).map(|(model, _)| model)
}

/// Trains the classifier and also returns the mean training loss of each
/// epoch.
pub fn fit_classifier(
    set: &ClassificationSet,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(MlpModel, Vec<f64>)> {
    config.train.validate()?;
    let first = set.entries.first().ok_or(Error::EmptyTrainingSet)?;
    if set.class_count < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    let dim = first.features.len();
    let mut seen = vec![0usize; set.class_count];
    for e in &set.entries {
        if e.features.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "training feature dim",
                expected: dim,
                found: e.features.len(),
            });
        }
        if e.class >= set.class_count {
            return Err(Error::invalid(format!("class {} out of range", e.class)));
        }
        seen[e.class] += 1;
    }
    if let Some(class) = seen.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }

    let inputs: Vec<Vec<f64>> = set
        .entries
        .iter()
        .map(|e| e.features.iter().map(|&v| v as f64).collect())
        .collect();
    let mut model = init_model(&config.layer_specs(dim, set.class_count), seed)?;
    let mut adam = AdamState::new(&model, config.train.adam)?;
    let mut losses = Vec::with_capacity(config.train.epochs);
    for batches in epoch_batches(inputs.len(), &config.train, seed) {
        let mut epoch_loss = 0.0;
        for batch in batches {
            let mut total = Gradients::zeros(&model);
            for &i in &batch {
                let acts = forward(&model, &inputs[i])?;
                let (loss, grad) = cross_entropy(&softmax(&acts.output), set.entries[i].class)?;
                total.add_assign(&backward(&model, &acts, &grad)?);
                epoch_loss += loss;
            }
            total.scale(1.0 / batch.len() as f64);
            adam_step(&mut model, &total, &mut adam)?;
        }
        losses.push(epoch_loss / inputs.len() as f64);
    }
    Ok((model, losses))
}

/// Per-pixel argmax class (ties toward the lower class) and the softmax
/// scores.
pub fn predict_classification(
    model: &MlpModel,
    target_feats: &FeatureMap,
) -> Result<(LabelMask, ScoreMap)> {
    if model.input_dim() != target_feats.dim() {
        return Err(Error::DimensionMismatch {
            what: "model input vs feature dim",
            expected: model.input_dim(),
            found: target_feats.dim(),
        });
    }
    let classes = model.output_dim();
    let label_count = u8::try_from(classes - 1)
        .map_err(|_| Error::invalid(format!("{classes} classes exceed the label range")))?;
    let rows: Vec<Vec<f64>> = (0..target_feats.pixel_count())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = target_feats.at_index(i).iter().map(|&v| v as f64).collect();
            softmax(&model.predict_unchecked(&x))
        })
        .collect();
    let labels = rows.iter().map(|p| argmax(p) as u8).collect();
    let (h, w) = (target_feats.height(), target_feats.width());
    Ok((
        LabelMask::new(h, w, label_count, labels)?,
        ScoreMap::new(h, w, classes, rows.concat())?,
    ))
}

//! Siamese pair classifier.
//!
//! One embedding network (the twin) is applied to both the reference and the
//! target vector; the two embeddings are concatenated, reference first, and a
//! head network produces logits over pair classes: `0` for no match and `l`
//! for a match on label `l`.
//!
//! Localization compares every target pixel against the reference pixels of
//! each label. Since the head's first layer is linear in the concatenation,
//! its pre-activation splits into a reference part and a target part that are
//! computed once each and summed per pair.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_batches, ScoreMap, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, LabelMask};
use crate::nn::{
    adam_step, argmax, backward, cross_entropy, forward, init_model, read_model, softmax,
    write_model, Activation, AdamState, Gradients, LayerSpec, MlpModel,
};
use crate::sampling::{PairSet, ReferenceSet};

pub const CONTRASTIVE_MAGIC: &[u8; 4] = b"PXC1";

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub embed_width: usize,
    pub twin_hidden: usize,
    pub head_hidden: usize,
    pub train: TrainConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            embed_width: 64,
            twin_hidden: 64,
            head_hidden: 64,
            train: TrainConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn twin_specs(&self, input_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(input_dim, self.twin_hidden, Activation::Relu),
            LayerSpec::new(self.twin_hidden, self.embed_width, Activation::Identity),
        ]
    }

    pub fn head_specs(&self, pair_classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(2 * self.embed_width, self.head_hidden, Activation::Relu),
            LayerSpec::new(self.head_hidden, pair_classes, Activation::Identity),
        ]
    }
}

/// How per-reference match probabilities for one label are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceReduction {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    twin: MlpModel,
    head: MlpModel,
    pair_class_count: usize,
}

impl ContrastiveModel {
    pub fn new(twin: MlpModel, head: MlpModel, pair_class_count: usize) -> Result<Self> {
        if pair_class_count < 2 {
            return Err(Error::invalid("pair class count must be at least 2"));
        }
        if head.input_dim() != 2 * twin.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "head input vs twice the embedding width",
                expected: 2 * twin.output_dim(),
                found: head.input_dim(),
            });
        }
        if head.output_dim() != pair_class_count {
            return Err(Error::DimensionMismatch {
                what: "head output vs pair classes",
                expected: pair_class_count,
                found: head.output_dim(),
            });
        }
        Ok(Self {
            twin,
            head,
            pair_class_count,
        })
    }

    pub fn twin(&self) -> &MlpModel {
        &self.twin
    }

    pub fn head(&self) -> &MlpModel {
        &self.head
    }

    pub fn twin_mut(&mut self) -> &mut MlpModel {
        &mut self.twin
    }

    pub fn head_mut(&mut self) -> &mut MlpModel {
        &mut self.head
    }

    pub fn pair_class_count(&self) -> usize {
        self.pair_class_count
    }

    pub fn input_dim(&self) -> usize {
        self.twin.input_dim()
    }

    pub fn label_count(&self) -> u8 {
        (self.pair_class_count - 1) as u8
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "pair input vs twin input",
                expected: self.input_dim(),
                found: n,
            });
        }
        Ok(())
    }

    /// Twin output for one feature vector; identical for either slot.
    pub fn embed(&self, features: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(features.len())?;
        let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        self.twin.predict(&x)
    }

    fn embed_unchecked(&self, features: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        self.twin.predict_unchecked(&x)
    }

    /// First head layer pre-activation contributed by the reference slot,
    /// bias included.
    fn reference_partial(&self, embedding: &[f64]) -> Vec<f64> {
        let first = &self.head.layers()[0];
        let n = first.spec.out_dim;
        let mut out = first.biases.clone();
        for (i, &e) in embedding.iter().enumerate() {
            let row = &first.weights[i * n..(i + 1) * n];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += e * w);
        }
        out
    }

    /// First head layer pre-activation contributed by the target slot.
    fn target_partial(&self, embedding: &[f64]) -> Vec<f64> {
        let first = &self.head.layers()[0];
        let n = first.spec.out_dim;
        let offset = embedding.len();
        let mut out = vec![0.0; n];
        for (i, &e) in embedding.iter().enumerate() {
            let row = &first.weights[(offset + i) * n..(offset + i + 1) * n];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += e * w);
        }
        out
    }

    fn finisher(&self) -> Finisher<'_> {
        Finisher {
            first_relu: self.head.layers()[0].spec.activation == Activation::Relu,
            rest: &self.head.layers()[1..],
        }
    }
}

struct Finisher<'a> {
    first_relu: bool,
    rest: &'a [crate::nn::Layer],
}

impl Finisher<'_> {
    fn probabilities(&self, mut current: Vec<f64>) -> Vec<f64> {
        if self.first_relu {
            current.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        for layer in self.rest {
            let n = layer.spec.out_dim;
            let mut next = layer.biases.clone();
            for (i, &x) in current.iter().enumerate() {
                let row = &layer.weights[i * n..(i + 1) * n];
                next.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
            }
            if layer.spec.activation == Activation::Relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = next;
        }
        softmax(&current)
    }
}

/// Softmax over pair classes of `head(twin(reference) ++ twin(target))`.
pub fn pair_score(model: &ContrastiveModel, reference: &[f32], target: &[f32]) -> Result<Vec<f64>> {
    let mut concat = model.embed(reference)?;
    concat.extend(model.embed(target)?);
    Ok(softmax(&model.head.predict(&concat)?))
}

pub fn train_contrastive_adapter(
    pairs: &PairSet,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<ContrastiveModel> {
    fit_contrastive(pairs, config, seed).map(|(model, _)| model)
}

/// Trains twin and head jointly with cross-entropy over pair classes. The twin
/// has a single parameter store; gradients from both slots are summed into it.
/// Also returns the mean training loss of each epoch.
pub fn fit_contrastive(
    pairs: &PairSet,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<(ContrastiveModel, Vec<f64>)> {
    config.train.validate()?;
    let first = pairs.entries.first().ok_or(Error::EmptyTrainingSet)?;
    let dim = first.reference.len();
    let classes = pairs.pair_class_count;
    if classes < 2 {
        return Err(Error::invalid("pair class count must be at least 2"));
    }
    let mut seen = vec![0usize; classes];
    for e in &pairs.entries {
        for v in [&e.reference, &e.target] {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "pair feature dim",
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        if e.class >= classes {
            return Err(Error::invalid(format!("pair class {} out of range", e.class)));
        }
        seen[e.class] += 1;
    }
    if let Some(class) = seen.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }

    let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let data: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .entries
        .iter()
        .map(|e| (widen(&e.reference), widen(&e.target)))
        .collect();

    let twin = init_model(&config.twin_specs(dim), seed)?;
    let head = init_model(&config.head_specs(classes), seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut model = ContrastiveModel::new(twin, head, classes)?;
    let mut twin_adam = AdamState::new(&model.twin, config.train.adam)?;
    let mut head_adam = AdamState::new(&model.head, config.train.adam)?;
    let width = config.embed_width;

    let mut losses = Vec::with_capacity(config.train.epochs);
    for batches in epoch_batches(data.len(), &config.train, seed) {
        let mut epoch_loss = 0.0;
        for batch in batches {
            let mut twin_grad = Gradients::zeros(&model.twin);
            let mut head_grad = Gradients::zeros(&model.head);
            for &i in &batch {
                let (a, b) = &data[i];
                let ea = forward(&model.twin, a)?;
                let eb = forward(&model.twin, b)?;
                let mut concat = ea.output.clone();
                concat.extend_from_slice(&eb.output);
                let h = forward(&model.head, &concat)?;
                let (loss, g) = cross_entropy(&softmax(&h.output), pairs.entries[i].class)?;
                epoch_loss += loss;
                let gh = backward(&model.head, &h, &g)?;
                let (ga, gb) = gh.input.split_at(width);
                twin_grad.add_assign(&backward(&model.twin, &ea, ga)?);
                twin_grad.add_assign(&backward(&model.twin, &eb, gb)?);
                head_grad.add_assign(&gh);
            }
            let scale = 1.0 / batch.len() as f64;
            twin_grad.scale(scale);
            head_grad.scale(scale);
            adam_step(&mut model.twin, &twin_grad, &mut twin_adam)?;
            adam_step(&mut model.head, &head_grad, &mut head_adam)?;
        }
        losses.push(epoch_loss / data.len() as f64);
    }
    Ok((model, losses))
}

/// Labels every target pixel by comparing it against each label's reference
/// pixels.
///
/// For label `l`, `score(l)` reduces `pair_score(ref, pixel)[l]` over that
/// label's references; the no-match score is `pair_score(ref, pixel)[0]`
/// averaged over all references. A pixel takes the best-scoring label (ties to
/// the lower label) when that score exceeds the no-match score by more than
/// `background_margin`, otherwise background. The score map holds the pair
/// distribution averaged over all references.
pub fn contrastive_localize(
    model: &ContrastiveModel,
    references: &[ReferenceSet],
    target_feats: &FeatureMap,
    background_margin: f64,
    reduction: ReferenceReduction,
) -> Result<(LabelMask, ScoreMap)> {
    model.check_dim(target_feats.dim())?;
    let label_count = model.label_count();
    let mut by_label: Vec<Vec<Vec<f64>>> = vec![Vec::new(); label_count as usize + 1];
    for set in references {
        if set.label == 0 || set.label > label_count {
            return Err(Error::LabelOutOfRange {
                label: set.label as u32,
                label_count: label_count as u32,
            });
        }
        if !by_label[set.label as usize].is_empty() {
            return Err(Error::invalid(format!(
                "duplicate reference set for label {}",
                set.label
            )));
        }
        for f in &set.features {
            model.check_dim(f.len())?;
            by_label[set.label as usize].push(model.reference_partial(&model.embed_unchecked(f)));
        }
    }
    for label in 1..=label_count {
        if by_label[label as usize].is_empty() {
            return Err(Error::EmptyRegion { label });
        }
    }
    let total_refs: usize = by_label.iter().map(Vec::len).sum();
    let classes = model.pair_class_count;
    let finisher = model.finisher();

    let per_pixel: Vec<(u8, Vec<f64>)> = (0..target_feats.pixel_count())
        .into_par_iter()
        .map(|i| {
            let t = model.target_partial(&model.embed_unchecked(target_feats.at_index(i)));
            let mut mean_dist = vec![0.0; classes];
            let mut scores = vec![0.0; classes];
            for (label, refs) in by_label.iter().enumerate().skip(1) {
                let mut reduced = match reduction {
                    ReferenceReduction::Mean => 0.0,
                    ReferenceReduction::Max => f64::NEG_INFINITY,
                };
                for r in refs {
                    let pre: Vec<f64> = r.iter().zip(&t).map(|(a, b)| a + b).collect();
                    let p = finisher.probabilities(pre);
                    match reduction {
                        ReferenceReduction::Mean => reduced += p[label],
                        ReferenceReduction::Max => reduced = reduced.max(p[label]),
                    }
                    mean_dist.iter_mut().zip(&p).for_each(|(m, v)| *m += v);
                }
                if reduction == ReferenceReduction::Mean {
                    reduced /= refs.len() as f64;
                }
                scores[label] = reduced;
            }
            mean_dist.iter_mut().for_each(|m| *m /= total_refs as f64);
            let no_match = mean_dist[0];
            let best = 1 + argmax(&scores[1..]);
            let label = if scores[best] > no_match + background_margin {
                best as u8
            } else {
                0
            };
            (label, mean_dist)
        })
        .collect();

    let (h, w) = (target_feats.height(), target_feats.width());
    let labels = per_pixel.iter().map(|(l, _)| *l).collect();
    let scores = per_pixel.into_iter().flat_map(|(_, d)| d).collect();
    Ok((
        LabelMask::new(h, w, label_count, labels)?,
        ScoreMap::new(h, w, classes, scores)?,
    ))
}

pub fn write_contrastive(model: &ContrastiveModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CONTRASTIVE_MAGIC)?;
    w.write_all(&(model.pair_class_count as u32).to_le_bytes())?;
    write_model(&model.twin, w)?;
    write_model(&model.head, w)
}

pub fn read_contrastive(r: &mut impl Read) -> Result<ContrastiveModel> {
    let malformed = |message: String| Error::Malformed {
        what: "contrastive model",
        message,
    };
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|e| malformed(format!("header: {e}")))?;
    if &header[..4] != CONTRASTIVE_MAGIC {
        return Err(malformed(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let classes = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let twin = read_model(r)?;
    let head = read_model(r)?;
    ContrastiveModel::new(twin, head, classes)
}

pub fn save_contrastive(model: &ContrastiveModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_contrastive(model, &mut bytes).expect("writing to a Vec cannot fail");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_contrastive(path: impl AsRef<Path>) -> Result<ContrastiveModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let model = read_contrastive(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: cursor.len(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Pixel;
    use crate::sampling::{PairEntry, Source};

    fn random_model(dim: usize, classes: usize, seed: u64) -> ContrastiveModel {
        let cfg = ContrastiveConfig {
            embed_width: 5,
            twin_hidden: 7,
            head_hidden: 6,
            ..Default::default()
        };
        let twin = init_model(&cfg.twin_specs(dim), seed).unwrap();
        let mut head = init_model(&cfg.head_specs(classes), seed + 1).unwrap();
        head.parameters_mut()
            .enumerate()
            .for_each(|(i, p)| *p += 0.05 * ((i % 7) as f64 - 3.0));
        ContrastiveModel::new(twin, head, classes).unwrap()
    }

    fn src() -> Source {
        Source {
            slice: 0,
            pixel: Pixel::new(0, 0),
        }
    }

    #[test]
    fn pair_score_is_a_distribution() {
        let m = random_model(4, 3, 2);
        let p = pair_score(&m, &[0.1, 0.2, -0.3, 1.0], &[1.0, 0.0, 0.5, -0.5]).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pair_score(&m, &[0.1], &[1.0, 0.0, 0.5, -0.5]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        let mut m = random_model(4, 4, 3);
        m.head_mut().parameters_mut().for_each(|p| *p = 0.0);
        let p = pair_score(&m, &[0.1, 0.2, -0.3, 1.0], &[1.0, 0.0, 0.5, -0.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn slots_are_ordered() {
        let m = random_model(4, 2, 4);
        let a = [0.3f32, -1.0, 0.2, 0.8];
        let b = [-0.7f32, 0.4, 1.1, 0.0];
        let ab = pair_score(&m, &a, &b).unwrap();
        let ba = pair_score(&m, &b, &a).unwrap();
        assert!(ab.iter().zip(&ba).any(|(x, y)| (x - y).abs() > 1e-9));
        assert_eq!(m.embed(&a).unwrap(), m.embed(&a).unwrap());
    }

    #[test]
    fn split_head_matches_direct_evaluation() {
        let m = random_model(4, 3, 8);
        let a = [0.3f32, -1.0, 0.2, 0.8];
        let b = [-0.7f32, 0.4, 1.1, 0.0];
        let direct = pair_score(&m, &a, &b).unwrap();
        let pre: Vec<f64> = m
            .reference_partial(&m.embed(&a).unwrap())
            .iter()
            .zip(m.target_partial(&m.embed(&b).unwrap()))
            .map(|(x, y)| x + y)
            .collect();
        let fast = m.finisher().probabilities(pre);
        for (d, f) in direct.iter().zip(&fast) {
            assert!((d - f).abs() < 1e-12);
        }
    }

    #[test]
    fn single_reference_single_pixel_reduces_to_argmax() {
        for seed in 0..20 {
            let m = random_model(3, 2, seed);
            let r = [0.5f32, -0.2, 0.9];
            let t = [(seed as f32 * 0.37).sin(), 0.1, -(seed as f32).cos()];
            let refs = [ReferenceSet {
                label: 1,
                coordinates: vec![Pixel::new(0, 0)],
                features: vec![r.to_vec()],
            }];
            let target = FeatureMap::new(1, 1, 3, t.to_vec()).unwrap();
            let (mask, scores) =
                contrastive_localize(&m, &refs, &target, 0.0, ReferenceReduction::Mean).unwrap();
            let p = pair_score(&m, &r, &t).unwrap();
            assert_eq!(mask.labels()[0] as usize, argmax(&p));
            for (a, b) in scores.data().iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn localize_validates_references() {
        let m = random_model(3, 3, 1);
        let target = FeatureMap::zeros(2, 2, 3).unwrap();
        let only_one = [ReferenceSet {
            label: 1,
            coordinates: vec![Pixel::new(0, 0)],
            features: vec![vec![0.0; 3]],
        }];
        assert!(matches!(
            contrastive_localize(&m, &only_one, &target, 0.0, ReferenceReduction::Mean),
            Err(Error::EmptyRegion { label: 2 })
        ));
        assert!(contrastive_localize(&m, &[], &target, 0.0, ReferenceReduction::Mean).is_err());
    }

    #[test]
    fn all_positive_pairs_rejected() {
        let pairs = PairSet {
            entries: vec![PairEntry {
                reference: vec![1.0],
                target: vec![1.0],
                class: 1,
                reference_source: src(),
                target_source: src(),
            }],
            pair_class_count: 2,
        };
        assert!(matches!(
            train_contrastive_adapter(&pairs, &ContrastiveConfig::default(), 0),
            Err(Error::MissingClass { class: 0 })
        ));
        let empty = PairSet {
            entries: vec![],
            pair_class_count: 2,
        };
        assert!(matches!(
            train_contrastive_adapter(&empty, &ContrastiveConfig::default(), 0),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let m = random_model(4, 3, 11);
        let mut bytes = Vec::new();
        write_contrastive(&m, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PXC1");
        assert_eq!(read_contrastive(&mut bytes.as_slice()).unwrap(), m);
        bytes[0] = b'X';
        assert!(read_contrastive(&mut bytes.as_slice()).is_err());
    }
}

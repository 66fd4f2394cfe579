//! The few-shot pipeline: localize target slices with an adapter, clean the
//! masks, extract landmarks or prompt a refiner, and score the result.

pub mod components;
pub mod prompts;

pub use components::{filter_components, landmark_from_mask, Components, Connectivity};
pub use prompts::{
    export_prompts, import_prompts, import_refined_mask, mock_refine, select_prompts,
    MockRefiner, PromptSet, Refiner, RefinerRequest,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{
    basic_localize, contrastive_localize, predict_classification, ContrastiveModel,
    ReferenceReduction, TemplateReduction,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_binary_multilabel, emit_report, label_iou_counts, localization_accuracy,
    AggregateMetrics, IouCounts, LabelMetrics, LocalizationCase, MetricReport,
};
use crate::feature_store::{
    write_label_mask, FeatureMap, IntensityImage, LabelMask, Pixel,
};
use crate::nn::MlpModel;
use crate::sampling::{select_reference_pixels, ReferenceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Landmarks from the cleaned localization masks.
    #[default]
    Localize,
    /// Prompts from the cleaned masks, refined into segmentation masks.
    Segment,
}

/// What counts as one localization case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseUnit {
    /// Every slice whose ground truth carries the label.
    #[default]
    Slice,
    /// One case per label for the whole run, scored on the slice where the
    /// label's ground-truth region is largest.
    Volume,
}

/// A ready-to-use adapter.
#[derive(Debug, Clone)]
pub enum Adapter {
    Basic {
        threshold: f64,
        reduction: TemplateReduction,
    },
    Classification(MlpModel),
    Contrastive {
        model: ContrastiveModel,
        /// Reference pixels drawn per label from the template.
        k: usize,
        reduction: ReferenceReduction,
        background_margin: f64,
    },
}

impl Adapter {
    pub fn name(&self) -> &'static str {
        match self {
            Adapter::Basic { .. } => "basic",
            Adapter::Classification(_) => "classification",
            Adapter::Contrastive { .. } => "contrastive",
        }
    }
}

/// The annotated slice the adapters learn from.
#[derive(Debug, Clone)]
pub struct Template {
    pub features: FeatureMap,
    pub mask: LabelMask,
}

#[derive(Debug, Clone)]
pub struct TargetSlice {
    /// Slice number used in artifact names and reports.
    pub index: usize,
    pub features: FeatureMap,
    pub ground_truth: Option<LabelMask>,
    /// Needed by the built-in refiner.
    pub image: Option<IntensityImage>,
    /// Recorded in exported prompt files.
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RefinerChoice {
    Mock { tolerance: f64 },
    /// Only export prompts; refined masks come back through
    /// [`import_refined_mask`].
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub task: Task,
    pub connectivity: Connectivity,
    /// Components smaller than this are removed.
    pub min_size: usize,
    pub prompt_count: usize,
    pub radius: f64,
    pub refiner: RefinerChoice,
    pub case_unit: CaseUnit,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: Task::Localize,
            connectivity: Connectivity::Eight,
            min_size: 5,
            prompt_count: 10,
            radius: 10.0,
            refiner: RefinerChoice::Mock { tolerance: 0.5 },
            case_unit: CaseUnit::Slice,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmark {
    pub slice: usize,
    pub label: u8,
    pub landmark: Option<Pixel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceResult {
    pub index: usize,
    /// Adapter output before component filtering.
    pub raw: LabelMask,
    pub filtered: LabelMask,
    pub landmarks: Vec<Landmark>,
    pub prompts: Option<RefinerRequest>,
    pub refined: Option<LabelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub task: Task,
    pub slices: Vec<SliceResult>,
    /// Present when at least one target slice has ground truth.
    pub report: Option<MetricReport>,
}

/// Localizes every label of the template on one target slice.
pub fn localize_slice(
    adapter: &Adapter,
    template: &Template,
    references: &[ReferenceSet],
    features: &FeatureMap,
) -> Result<LabelMask> {
    let label_count = template.mask.label_count();
    match adapter {
        Adapter::Basic {
            threshold,
            reduction,
        } => {
            let per_label = (1..=label_count)
                .map(|l| {
                    let (m, s) = basic_localize(
                        &template.features,
                        &template.mask,
                        l,
                        features,
                        *threshold,
                        *reduction,
                    )?;
                    Ok((l, m, s))
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_binary_multilabel(&per_label)
        }
        Adapter::Classification(model) => {
            if model.output_dim() != usize::from(label_count) + 1 {
                return Err(Error::DimensionMismatch {
                    what: "classifier outputs vs template labels + 1",
                    expected: usize::from(label_count) + 1,
                    found: model.output_dim(),
                });
            }
            predict_classification(model, features).map(|(m, _)| m)
        }
        Adapter::Contrastive {
            model,
            reduction,
            background_margin,
            ..
        } => contrastive_localize(model, references, features, *background_margin, *reduction)
            .map(|(m, _)| m),
    }
}

/// Reference pixels for every template label (empty unless the adapter is
/// contrastive).
pub fn template_references(adapter: &Adapter, template: &Template, seed: u64) -> Result<Vec<ReferenceSet>> {
    match adapter {
        Adapter::Contrastive { k, .. } => (1..=template.mask.label_count())
            .map(|l| select_reference_pixels(&template.features, &template.mask, l, *k, seed))
            .collect(),
        _ => Ok(Vec::new()),
    }
}

/// Runs the whole pipeline over `targets`. Errors carry the failing stage.
pub fn run_pipeline(
    adapter: &Adapter,
    template: &Template,
    targets: &[TargetSlice],
    config: &PipelineConfig,
) -> Result<RunOutput> {
    if targets.is_empty() {
        return Err(Error::invalid("no target slices").in_stage("localize"));
    }
    let references =
        template_references(adapter, template, config.seed).map_err(|e| e.in_stage("references"))?;
    let label_count = template.mask.label_count();
    let mut slices = Vec::with_capacity(targets.len());
    for target in targets {
        let raw = localize_slice(adapter, template, &references, &target.features)
            .map_err(|e| e.in_stage("localize"))?;
        let filtered = filter_components(&raw, config.connectivity, config.min_size);
        let landmarks = (1..=label_count)
            .map(|label| Landmark {
                slice: target.index,
                label,
                landmark: landmark_from_mask(&filtered, label, config.connectivity),
            })
            .collect();
        let (prompts, refined) = match config.task {
            Task::Localize => (None, None),
            Task::Segment => segment_slice(target, &filtered, config).map_err(|e| e.in_stage("refine"))?,
        };
        slices.push(SliceResult {
            index: target.index,
            raw,
            filtered,
            landmarks,
            prompts,
            refined,
        });
    }
    let report =
        evaluate(adapter, targets, &slices, label_count, config).map_err(|e| e.in_stage("evaluate"))?;
    Ok(RunOutput {
        task: config.task,
        slices,
        report,
    })
}

fn segment_slice(
    target: &TargetSlice,
    filtered: &LabelMask,
    config: &PipelineConfig,
) -> Result<(Option<RefinerRequest>, Option<LabelMask>)> {
    let seed = config.seed.wrapping_add(target.index as u64);
    let sets = (1..=filtered.label_count())
        .filter(|&l| filtered.count(l) > 0)
        .map(|l| select_prompts(filtered, l, config.prompt_count, seed))
        .collect::<Result<Vec<_>>>()?;
    if sets.is_empty() {
        // Nothing localized: no prompts, and the refined mask is empty.
        let empty = LabelMask::background(filtered.height(), filtered.width(), filtered.label_count())?;
        let refined = matches!(config.refiner, RefinerChoice::Mock { .. }).then_some(empty);
        return Ok((None, refined));
    }
    let request = RefinerRequest {
        image: target.image_path.clone().unwrap_or_default(),
        height: filtered.height(),
        width: filtered.width(),
        prompts: sets,
    };
    let refined = match config.refiner {
        RefinerChoice::External => None,
        RefinerChoice::Mock { tolerance } => {
            let image = target.image.as_ref().ok_or_else(|| {
                Error::invalid(format!("slice {} has no intensity image to refine", target.index))
            })?;
            Some(merge_refined(image, &request.prompts, filtered.label_count(), &MockRefiner { tolerance })?)
        }
    };
    Ok((Some(request), refined))
}

/// Refines each label separately; where refined regions overlap the lower
/// label keeps the pixel.
fn merge_refined(
    image: &IntensityImage,
    sets: &[PromptSet],
    label_count: u8,
    refiner: &impl Refiner,
) -> Result<LabelMask> {
    let mut out = LabelMask::background(image.height(), image.width(), label_count)?;
    for set in sets {
        let binary = refiner.refine(image, set)?;
        for (i, &b) in binary.labels().iter().enumerate() {
            let p = out.pixel_at(i);
            if b != 0 && out.get(p) == 0 {
                out.set(p, set.label);
            }
        }
    }
    Ok(out)
}

/// One scored slice: the prediction to judge and its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalSlice<'a> {
    pub index: usize,
    pub predicted: &'a LabelMask,
    pub ground_truth: &'a LabelMask,
}

/// Per-label pooled IoU and landmark accuracy for labels `1..=label_count`.
/// Landmarks are taken from the predicted and ground-truth masks with the
/// configured connectivity.
pub fn evaluate_masks(
    task: &str,
    adapter: &str,
    slices: &[EvalSlice],
    label_count: u8,
    config: &PipelineConfig,
) -> Result<MetricReport> {
    if slices.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if label_count == 0 {
        return Err(Error::invalid("evaluation needs at least one label"));
    }
    let mut per_label = BTreeMap::new();
    let mut all_cases = Vec::new();
    for label in 1..=label_count {
        let mut counts = IouCounts::default();
        let mut cases = Vec::new();
        let mut false_positive_slices = 0;
        for s in slices {
            counts.add(label_iou_counts(s.predicted, s.ground_truth, label)?);
            let predicted = landmark_from_mask(s.predicted, label, config.connectivity);
            match landmark_from_mask(s.ground_truth, label, config.connectivity) {
                Some(truth) => cases.push((
                    s.ground_truth.count(label),
                    LocalizationCase {
                        predicted,
                        ground_truth: truth,
                        label,
                        slice: s.index,
                    },
                )),
                None => false_positive_slices += usize::from(predicted.is_some()),
            }
        }
        let cases: Vec<LocalizationCase> = match config.case_unit {
            CaseUnit::Slice => cases.into_iter().map(|(_, c)| c).collect(),
            // First slice with the largest region wins ties.
            CaseUnit::Volume => cases
                .into_iter()
                .rev()
                .max_by_key(|(n, _)| *n)
                .map(|(_, c)| c)
                .into_iter()
                .collect(),
        };
        let accuracy = if cases.is_empty() {
            None
        } else {
            Some(localization_accuracy(&cases, config.radius)?)
        };
        per_label.insert(
            label,
            LabelMetrics {
                iou: Some(counts.ratio()),
                localization_accuracy: accuracy,
                cases: cases.len(),
                false_positive_slices,
            },
        );
        all_cases.extend(cases);
    }
    let ious: Vec<f64> = per_label.values().filter_map(|m| m.iou).collect();
    let aggregate = AggregateMetrics {
        iou: Some(ious.iter().sum::<f64>() / ious.len() as f64),
        localization_accuracy: if all_cases.is_empty() {
            None
        } else {
            Some(localization_accuracy(&all_cases, config.radius)?)
        },
        cases: all_cases.len(),
    };
    Ok(MetricReport {
        task: task.to_string(),
        adapter: adapter.to_string(),
        per_label,
        aggregate,
        radius: config.radius,
        seeds: BTreeMap::from([("seed".to_string(), config.seed)]),
        config_hash: String::new(),
    })
}

fn evaluate(
    adapter: &Adapter,
    targets: &[TargetSlice],
    slices: &[SliceResult],
    label_count: u8,
    config: &PipelineConfig,
) -> Result<Option<MetricReport>> {
    let scored: Vec<EvalSlice> = targets
        .iter()
        .zip(slices)
        .filter_map(|(t, s)| {
            let gt = t.ground_truth.as_ref()?;
            let predicted = match (config.task, &s.refined) {
                (Task::Segment, Some(refined)) => refined,
                _ => &s.filtered,
            };
            Some(EvalSlice {
                index: s.index,
                predicted,
                ground_truth: gt,
            })
        })
        .collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let task = match config.task {
        Task::Localize => "localize",
        Task::Segment => "segment",
    };
    evaluate_masks(task, adapter.name(), &scored, label_count, config).map(Some)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl RunOutput {
    /// Writes masks, landmarks, prompt files, refined masks and the report
    /// under `dir`. Returns the written paths relative to `dir`, sorted.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        self.write_inner(dir.as_ref()).map_err(|e| e.in_stage("write"))
    }

    fn write_inner(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        create_dir(&dir.join("masks"))?;
        for s in &self.slices {
            let rel = PathBuf::from(format!("masks/slice_{:03}.pxm", s.index));
            write_label_mask(&s.filtered, dir.join(&rel))?;
            written.push(rel);
            if let Some(request) = &s.prompts {
                create_dir(&dir.join("prompts"))?;
                let rel = PathBuf::from(format!("prompts/slice_{:03}.json", s.index));
                export_prompts(request, dir.join(&rel))?;
                written.push(rel);
            }
            if let Some(refined) = &s.refined {
                create_dir(&dir.join("refined"))?;
                let rel = PathBuf::from(format!("refined/slice_{:03}.pxm", s.index));
                write_label_mask(refined, dir.join(&rel))?;
                written.push(rel);
            }
        }
        let landmarks: Vec<&Landmark> = self.slices.iter().flat_map(|s| &s.landmarks).collect();
        let path = dir.join("landmarks.json");
        let json = serde_json::to_string_pretty(&landmarks).expect("landmarks serialize");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        written.push("landmarks.json".into());
        if let Some(report) = &self.report {
            emit_report(report, dir.join("report.json"))?;
            written.push("report.json".into());
            written.push("report.txt".into());
        }
        written.sort();
        Ok(written)
    }
}

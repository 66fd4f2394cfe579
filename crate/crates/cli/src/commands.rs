//! Subcommand implementations. Each writes its artifacts plus a
//! `manifest.json` under the configured output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;

use pxadapt::adapters::{
    fit_classifier, fit_contrastive, load_contrastive, save_contrastive, ClassifierConfig,
    ContrastiveConfig, ReferenceReduction, TemplateReduction, TrainConfig, CONTRASTIVE_MAGIC,
};
use pxadapt::eval::{emit_report, read_report, MetricReport};
use pxadapt::feature_store::{
    l2_normalize, read_feature_map, read_label_mask, write_feature_map, write_label_mask,
    FeatureMap, IntensityImage, LabelMask, FEATURE_MAGIC, MASK_MAGIC,
};
use pxadapt::nn::{load_model, save_model, AdamConfig, MlpModel, MODEL_MAGIC};
use pxadapt::pipeline::{
    evaluate_masks, import_prompts, run_pipeline, Adapter, Connectivity, EvalSlice,
    PipelineConfig, RefinerChoice, TargetSlice, Task, Template,
};
use pxadapt::sampling::{sample_classification_set_pooled, sample_contrastive_pairs_pooled};
use pxadapt::synth::{
    confound_scenario, empty_slice_scenario, generate, separable_scenario,
    two_intensity_scenario, ScenarioSpec,
};

use crate::config::{AdapterKind, CaseUnit, ConfigError, Reduction, RefinerKind, RunConfig, ScenarioName};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(pxadapt::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad or missing input data, 4 for
    /// failures inside the pipeline.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Core(e) => {
                write!(f, "{e}")?;
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    write!(f, ": {s}")?;
                    source = s.source();
                }
                Ok(())
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<pxadapt::Error> for CliError {
    fn from(e: pxadapt::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, source: std::io::Error) -> pxadapt::Error {
    pxadapt::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e).into())
}

#[derive(Serialize)]
struct Excluded {
    out: PathBuf,
    created_unix_seconds: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    config_hash: String,
    seeds: BTreeMap<&'static str, u64>,
    artifacts: Vec<String>,
    /// Everything that may legitimately differ between identical runs.
    excluded: Excluded,
}

fn write_manifest(command: &str, config: &RunConfig, mut artifacts: Vec<String>) -> CliResult {
    artifacts.sort();
    let manifest = Manifest {
        command,
        config: config.hashed_view(),
        config_hash: config.hash(),
        seeds: BTreeMap::from([("seed", config.seed)]),
        artifacts,
        excluded: Excluded {
            out: config.out.clone(),
            created_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        },
    };
    write_json(&config.out.join("manifest.json"), &manifest)
}

fn load_features(path: &Path, normalize: bool) -> CliResult<FeatureMap> {
    let map = read_feature_map(path)?;
    Ok(if normalize { l2_normalize(&map, 1e-12) } else { map })
}

fn load_slices(features: &[PathBuf], masks: &[PathBuf], normalize: bool) -> CliResult<Vec<(FeatureMap, LabelMask)>> {
    features
        .iter()
        .zip(masks)
        .map(|(f, m)| {
            let pair = (load_features(f, normalize)?, read_label_mask(m)?);
            pair.0.same_grid(&pair.1)?;
            Ok(pair)
        })
        .collect()
}

fn scenario_spec(config: &RunConfig) -> CliResult<ScenarioSpec> {
    if let Some(path) = &config.scenario_file {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        return serde_json::from_str(&text).map_err(|e| {
            pxadapt::Error::Malformed {
                what: "scenario file",
                message: e.to_string(),
            }
            .into()
        });
    }
    Ok(match config.scenario {
        ScenarioName::Separable => separable_scenario(config.seed),
        ScenarioName::Confound => confound_scenario(config.seed),
        ScenarioName::TwoIntensity => two_intensity_scenario(config.seed),
        ScenarioName::EmptySlices => empty_slice_scenario(config.seed, 2),
    })
}

pub fn synth(config: &RunConfig) -> CliResult {
    let spec = scenario_spec(config)?;
    let scenario = generate(&spec).map_err(|e| e.in_stage("synth"))?;
    create_dir(&config.out)?;
    let mut artifacts = vec!["scenario.json".to_string()];
    write_json(&config.out.join("scenario.json"), &spec)?;
    for (i, s) in scenario.slices.iter().enumerate() {
        let (features, image, mask) = (
            format!("features_{i:03}.pxf"),
            format!("image_{i:03}.pxf"),
            format!("mask_{i:03}.pxm"),
        );
        write_feature_map(&s.features, config.out.join(&features))?;
        write_feature_map(&s.image.to_feature_map(), config.out.join(&image))?;
        write_label_mask(&s.mask, config.out.join(&mask))?;
        artifacts.extend([features, image, mask]);
    }
    info!("wrote {} slices to {}", scenario.slices.len(), config.out.display());
    write_manifest("synth", config, artifacts)
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        adam: AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    }
}

#[derive(Serialize)]
struct TrainingSummary {
    adapter: AdapterKind,
    examples: usize,
    per_class: Vec<usize>,
    epoch_losses: Vec<f64>,
}

pub fn train(config: &RunConfig) -> CliResult {
    let slices = load_slices(&config.train_features, &config.train_masks, config.normalize)?;
    let refs: Vec<(&FeatureMap, &LabelMask)> = slices.iter().map(|(f, m)| (f, m)).collect();
    create_dir(&config.out)?;
    let (file, summary) = match config.adapter {
        AdapterKind::Contrastive => {
            let pairs = sample_contrastive_pairs_pooled(
                &refs,
                config.pairs_per_label,
                config.min_negative_offset,
                config.seed,
            )
            .map_err(|e| e.in_stage("sampling"))?;
            let model_config = ContrastiveConfig {
                embed_width: config.embed_width,
                twin_hidden: config.twin_hidden,
                head_hidden: config.head_hidden,
                train: train_config(config),
            };
            info!("training contrastive adapter on {} pairs", pairs.entries.len());
            let (model, losses) =
                fit_contrastive(&pairs, &model_config, config.seed).map_err(|e| e.in_stage("train"))?;
            save_contrastive(&model, config.out.join("model.pxc"))?;
            let summary = TrainingSummary {
                adapter: config.adapter,
                examples: pairs.entries.len(),
                per_class: (0..pairs.pair_class_count).map(|c| pairs.count(c)).collect(),
                epoch_losses: losses,
            };
            ("model.pxc", summary)
        }
        AdapterKind::Classification => {
            let set = sample_classification_set_pooled(&refs, config.seed).map_err(|e| e.in_stage("sampling"))?;
            let model_config = ClassifierConfig {
                hidden: config.hidden.clone(),
                train: train_config(config),
            };
            info!("training classification adapter on {} pixels", set.entries.len());
            let (model, losses) =
                fit_classifier(&set, &model_config, config.seed).map_err(|e| e.in_stage("train"))?;
            save_model(&model, config.out.join("model.pxn"))?;
            let summary = TrainingSummary {
                adapter: config.adapter,
                examples: set.entries.len(),
                per_class: (0..set.class_count).map(|c| set.count(c)).collect(),
                epoch_losses: losses,
            };
            ("model.pxn", summary)
        }
        AdapterKind::Basic => unreachable!("rejected by config validation"),
    };
    write_json(&config.out.join("training.json"), &summary)?;
    write_manifest("train", config, vec![file.to_string(), "training.json".to_string()])
}

fn pipeline_config(config: &RunConfig, task: Task) -> CliResult<PipelineConfig> {
    Ok(PipelineConfig {
        task,
        connectivity: Connectivity::from_neighbours(config.connectivity)?,
        min_size: config.min_size,
        prompt_count: config.prompts,
        radius: config.radius,
        refiner: match config.refiner {
            RefinerKind::Mock => RefinerChoice::Mock {
                tolerance: config.tolerance,
            },
            RefinerKind::External => RefinerChoice::External,
        },
        case_unit: match config.case_unit {
            CaseUnit::Slice => pxadapt::pipeline::CaseUnit::Slice,
            CaseUnit::Volume => pxadapt::pipeline::CaseUnit::Volume,
        },
        seed: config.seed,
    })
}

fn adapter(config: &RunConfig) -> CliResult<Adapter> {
    let model_path = || config.model.as_ref().expect("validated: model present");
    Ok(match config.adapter {
        AdapterKind::Basic => Adapter::Basic {
            threshold: config.threshold,
            reduction: match config.reduction {
                Reduction::Mean => TemplateReduction::Mean,
                Reduction::Max => TemplateReduction::Max,
            },
        },
        AdapterKind::Classification => Adapter::Classification(load_model(model_path())?),
        AdapterKind::Contrastive => Adapter::Contrastive {
            model: load_contrastive(model_path())?,
            k: config.k,
            reduction: match config.reduction {
                Reduction::Mean => ReferenceReduction::Mean,
                Reduction::Max => ReferenceReduction::Max,
            },
            background_margin: config.background_margin,
        },
    })
}

fn finish_report(report: &mut MetricReport, config: &RunConfig) {
    report.config_hash = config.hash();
    report.seeds = BTreeMap::from([("seed".to_string(), config.seed)]);
}

/// `localize` and `segment`.
pub fn run(config: &RunConfig, task: Task) -> CliResult {
    let command = match task {
        Task::Localize => "localize",
        Task::Segment => "segment",
    };
    let template_features = config.template_features.as_ref().expect("validated");
    let template_mask = config.template_mask.as_ref().expect("validated");
    let template = Template {
        features: load_features(template_features, config.normalize)?,
        mask: read_label_mask(template_mask)?,
    };
    template.features.same_grid(&template.mask)?;
    let adapter = adapter(config)?;
    let targets = config
        .features
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let image = match config.images.get(i) {
                Some(p) => Some(IntensityImage::from_feature_map(read_feature_map(p)?)?),
                None => None,
            };
            Ok(TargetSlice {
                index: i,
                features: load_features(path, config.normalize)?,
                ground_truth: config.masks.get(i).map(read_label_mask).transpose()?,
                image,
                image_path: config.images.get(i).map(|p| p.display().to_string()),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    info!("{command}: {} target slices with the {} adapter", targets.len(), adapter.name());
    let mut output = run_pipeline(&adapter, &template, &targets, &pipeline_config(config, task)?)?;
    if let Some(report) = output.report.as_mut() {
        finish_report(report, config);
        print!("{}", report.table());
    }
    create_dir(&config.out)?;
    let written = output.write(&config.out)?;
    write_manifest(command, config, written.iter().map(|p| p.display().to_string()).collect())
}

pub fn eval(config: &RunConfig) -> CliResult {
    let predictions = config
        .predictions
        .iter()
        .map(read_label_mask)
        .collect::<Result<Vec<_>, _>>()?;
    let truths = config.masks.iter().map(read_label_mask).collect::<Result<Vec<_>, _>>()?;
    let slices: Vec<EvalSlice> = predictions
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(index, (predicted, ground_truth))| EvalSlice {
            index,
            predicted,
            ground_truth,
        })
        .collect();
    let label_count = truths
        .iter()
        .chain(&predictions)
        .map(LabelMask::label_count)
        .max()
        .unwrap_or(0);
    let adapter_name = match config.adapter {
        AdapterKind::Basic => "basic",
        AdapterKind::Classification => "classification",
        AdapterKind::Contrastive => "contrastive",
    };
    let mut report = evaluate_masks("eval", adapter_name, &slices, label_count, &pipeline_config(config, Task::Localize)?)
        .map_err(|e| e.in_stage("evaluate"))?;
    finish_report(&mut report, config);
    create_dir(&config.out)?;
    emit_report(&report, config.out.join("report.json"))?;
    print!("{}", report.table());
    write_manifest("eval", config, vec!["report.json".into(), "report.txt".into()])
}

fn describe_model(model: &MlpModel) -> String {
    model
        .specs()
        .iter()
        .map(|s| format!("{}->{} {:?}", s.in_dim, s.out_dim, s.activation).to_lowercase())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Prints the header fields (and a short summary) of each artifact.
pub fn inspect(files: &[PathBuf]) -> CliResult {
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let magic = bytes.get(..4).unwrap_or(&[]);
        let shown = path.display();
        if magic == FEATURE_MAGIC {
            let map = read_feature_map(path)?;
            println!(
                "{shown}: PXF1 feature map, height {}, width {}, dim {}",
                map.height(),
                map.width(),
                map.dim()
            );
        } else if magic == MASK_MAGIC {
            let mask = read_label_mask(path)?;
            let counts: Vec<String> = (0..=mask.label_count())
                .map(|l| format!("{l}:{}", mask.count(l)))
                .collect();
            println!(
                "{shown}: PXM1 label mask, height {}, width {}, label_count {}, pixels per label [{}]",
                mask.height(),
                mask.width(),
                mask.label_count(),
                counts.join(" ")
            );
        } else if magic == MODEL_MAGIC {
            let model = load_model(path)?;
            println!(
                "{shown}: PXN1 model, {} parameters, layers [{}]",
                model.parameter_count(),
                describe_model(&model)
            );
        } else if magic == CONTRASTIVE_MAGIC {
            let model = load_contrastive(path)?;
            println!(
                "{shown}: PXC1 contrastive model, {} labels, twin [{}], head [{}]",
                model.label_count(),
                describe_model(model.twin()),
                describe_model(model.head())
            );
        } else if let Ok(report) = read_report(path) {
            println!("{shown}: metric report");
            print!("{}", report.table());
        } else if let Ok(request) = import_prompts(path) {
            let per_label: Vec<String> = request
                .prompts
                .iter()
                .map(|p| format!("{}:{}", p.label, p.points.len()))
                .collect();
            println!(
                "{shown}: prompt file for {} ({}x{}), points per label [{}]",
                request.image,
                request.height,
                request.width,
                per_label.join(" ")
            );
        } else {
            return Err(pxadapt::Error::BadMagic {
                path: path.clone(),
                expected: "PXF1, PXM1, PXN1, PXC1, a report or a prompt file".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            }
            .into());
        }
    }
    Ok(())
}

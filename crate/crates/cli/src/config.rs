//! Run configuration: a flat TOML file plus command-line flags.
//!
//! Every key can come from the file or from a flag of the same name (with
//! dashes). Flags win over the file, the file wins over the defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PXADAPT_OUT";
const DEFAULT_OUT_ROOT: &str = "pxadapt-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Basic,
    Classification,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Mock,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CaseUnit {
    Slice,
    Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    Separable,
    Confound,
    TwoIntensity,
    EmptySlices,
}

/// Config keys as given in a file or on the command line; unset keys are
/// `None`.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    /// Adapter to train or run.
    #[arg(long, value_enum)]
    pub adapter: Option<AdapterKind>,
    /// Target feature maps (PXF1), one per slice.
    #[arg(long, num_args = 1..)]
    pub features: Option<Vec<PathBuf>>,
    /// Ground-truth masks (PXM1) for the targets; enables evaluation.
    #[arg(long, num_args = 1..)]
    pub masks: Option<Vec<PathBuf>>,
    /// Intensity images (PXF1, dim 1) for the built-in refiner.
    #[arg(long, num_args = 1..)]
    pub images: Option<Vec<PathBuf>>,
    /// Predicted masks to score with `eval`.
    #[arg(long, num_args = 1..)]
    pub predictions: Option<Vec<PathBuf>>,
    /// Training feature maps.
    #[arg(long, num_args = 1..)]
    pub train_features: Option<Vec<PathBuf>>,
    /// Training masks, paired with `train_features`.
    #[arg(long, num_args = 1..)]
    pub train_masks: Option<Vec<PathBuf>>,
    /// Annotated template slice features.
    #[arg(long)]
    pub template_features: Option<PathBuf>,
    /// Annotated template slice mask.
    #[arg(long)]
    pub template_mask: Option<PathBuf>,
    /// Trained model file (PXN1 classifier or PXC1 contrastive).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Built-in synthetic scenario.
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioName>,
    /// JSON scenario description; replaces `scenario`.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Cosine threshold of the basic adapter, in [-1, 1].
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Template (basic) or reference (contrastive) reduction.
    #[arg(long, value_enum)]
    pub reduction: Option<Reduction>,
    /// Positive and negative pairs drawn per label.
    #[arg(long)]
    pub pairs_per_label: Option<usize>,
    /// Minimum Chebyshev distance of negative partners from the region.
    #[arg(long)]
    pub min_negative_offset: Option<usize>,
    /// Reference pixels per label for the contrastive adapter.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Classifier hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Contrastive embedding width.
    #[arg(long)]
    pub embed_width: Option<usize>,
    /// Contrastive twin hidden width.
    #[arg(long)]
    pub twin_hidden: Option<usize>,
    /// Contrastive head hidden width.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    /// Components smaller than this many pixels are removed.
    #[arg(long)]
    pub min_size: Option<usize>,
    /// Component connectivity, 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u32>,
    /// Prompt points per label.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Localization hit radius in pixels (strict).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_enum)]
    pub refiner: Option<RefinerKind>,
    /// Intensity tolerance of the built-in refiner.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Extra margin a label score must clear over the no-match score.
    #[arg(long, allow_negative_numbers = true)]
    pub background_margin: Option<f64>,
    /// Localization case unit.
    #[arg(long, value_enum)]
    pub case_unit: Option<CaseUnit>,
    /// Scale every feature vector to unit length before use.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The effective configuration after merging flags, file and defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub adapter: AdapterKind,
    pub features: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub images: Vec<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub train_features: Vec<PathBuf>,
    pub train_masks: Vec<PathBuf>,
    pub template_features: Option<PathBuf>,
    pub template_mask: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub scenario: ScenarioName,
    pub scenario_file: Option<PathBuf>,
    pub threshold: f64,
    pub reduction: Reduction,
    pub pairs_per_label: usize,
    pub min_negative_offset: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embed_width: usize,
    pub twin_hidden: usize,
    pub head_hidden: usize,
    pub min_size: usize,
    pub connectivity: u32,
    pub prompts: usize,
    pub radius: f64,
    pub refiner: RefinerKind,
    pub tolerance: f64,
    pub background_margin: f64,
    pub case_unit: CaseUnit,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterKind::Contrastive,
            features: Vec::new(),
            masks: Vec::new(),
            images: Vec::new(),
            predictions: Vec::new(),
            train_features: Vec::new(),
            train_masks: Vec::new(),
            template_features: None,
            template_mask: None,
            model: None,
            out: PathBuf::from(DEFAULT_OUT_ROOT),
            scenario: ScenarioName::Separable,
            scenario_file: None,
            threshold: 0.5,
            reduction: Reduction::Mean,
            pairs_per_label: 1000,
            min_negative_offset: 0,
            k: 16,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            hidden: vec![256, 128],
            embed_width: 64,
            twin_hidden: 64,
            head_hidden: 64,
            min_size: 5,
            connectivity: 8,
            prompts: 10,
            radius: 10.0,
            refiner: RefinerKind::Mock,
            tolerance: 0.5,
            background_margin: 0.0,
            case_unit: CaseUnit::Slice,
            normalize: false,
            seed: 0,
        }
    }
}

/// A problem with the configuration itself; always names the key or file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub fn read_config_file(path: &Path) -> Result<PartialConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("config file {}: {e}", path.display())))
}

/// Merges `flags` over `file` over the defaults. `out_root` (from the
/// environment) replaces the default output root; the command name is
/// appended to it.
pub fn resolve(
    flags: PartialConfig,
    file: PartialConfig,
    out_root: Option<PathBuf>,
    command: &str,
) -> RunConfig {
    let d = RunConfig::default();
    macro_rules! pick {
        ($field:ident) => {
            flags.$field.or(file.$field).unwrap_or(d.$field)
        };
        ($field:ident, opt) => {
            flags.$field.or(file.$field)
        };
    }
    let default_out = out_root.unwrap_or(d.out.clone()).join(command);
    RunConfig {
        adapter: pick!(adapter),
        features: pick!(features),
        masks: pick!(masks),
        images: pick!(images),
        predictions: pick!(predictions),
        train_features: pick!(train_features),
        train_masks: pick!(train_masks),
        template_features: pick!(template_features, opt),
        template_mask: pick!(template_mask, opt),
        model: pick!(model, opt),
        out: flags.out.or(file.out).unwrap_or(default_out),
        scenario: pick!(scenario),
        scenario_file: pick!(scenario_file, opt),
        threshold: pick!(threshold),
        reduction: pick!(reduction),
        pairs_per_label: pick!(pairs_per_label),
        min_negative_offset: pick!(min_negative_offset),
        k: pick!(k),
        epochs: pick!(epochs),
        batch_size: pick!(batch_size),
        learning_rate: pick!(learning_rate),
        hidden: pick!(hidden),
        embed_width: pick!(embed_width),
        twin_hidden: pick!(twin_hidden),
        head_hidden: pick!(head_hidden),
        min_size: pick!(min_size),
        connectivity: pick!(connectivity),
        prompts: pick!(prompts),
        radius: pick!(radius),
        refiner: pick!(refiner),
        tolerance: pick!(tolerance),
        background_margin: pick!(background_margin),
        case_unit: pick!(case_unit),
        normalize: pick!(normalize),
        seed: pick!(seed),
    }
}

impl RunConfig {
    /// Range checks plus the paths each command needs.
    pub fn validate(&self, command: &str) -> Result<(), ConfigError> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return err(format!("threshold: {} is outside [-1, 1]", self.threshold));
        }
        for (key, v) in [
            ("pairs_per_label", self.pairs_per_label),
            ("k", self.k),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("embed_width", self.embed_width),
            ("twin_hidden", self.twin_hidden),
            ("head_hidden", self.head_hidden),
            ("prompts", self.prompts),
        ] {
            if v == 0 {
                return err(format!("{key}: must be at least 1"));
            }
        }
        if self.hidden.contains(&0) {
            return err("hidden: widths must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate: {} must be positive", self.learning_rate));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return err(format!("connectivity: {} is not 4 or 8", self.connectivity));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return err(format!("radius: {} must be positive", self.radius));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return err(format!("tolerance: {} must be non-negative", self.tolerance));
        }
        if !self.background_margin.is_finite() {
            return err("background_margin: must be finite");
        }

        let need_list = |key: &str, v: &[PathBuf]| {
            if v.is_empty() {
                err(format!("{key}: required for `{command}`"))
            } else {
                Ok(())
            }
        };
        let need = |key: &str, v: &Option<PathBuf>| {
            if v.is_none() {
                err(format!("{key}: required for `{command}`"))
            } else {
                Ok(())
            }
        };
        let same_len = |key: &str, v: &[PathBuf], other: &str, n: usize| {
            if !v.is_empty() && v.len() != n {
                err(format!("{key}: {} paths but {other} has {n}", v.len()))
            } else {
                Ok(())
            }
        };
        match command {
            "train" => {
                if self.adapter == AdapterKind::Basic {
                    return err("adapter: basic has no training step");
                }
                need_list("train_features", &self.train_features)?;
                need_list("train_masks", &self.train_masks)?;
                same_len("train_masks", &self.train_masks, "train_features", self.train_features.len())?;
            }
            "localize" | "segment" => {
                need_list("features", &self.features)?;
                need("template_features", &self.template_features)?;
                need("template_mask", &self.template_mask)?;
                if self.adapter != AdapterKind::Basic {
                    need("model", &self.model)?;
                }
                same_len("masks", &self.masks, "features", self.features.len())?;
                if command == "segment" && self.refiner == RefinerKind::Mock {
                    need_list("images", &self.images)?;
                }
                same_len("images", &self.images, "features", self.features.len())?;
            }
            "eval" => {
                need_list("predictions", &self.predictions)?;
                need_list("masks", &self.masks)?;
                same_len("masks", &self.masks, "predictions", self.predictions.len())?;
            }
            _ => {}
        }
        Ok(())
    }

    /// The hashed view of the config: every key except the output location.
    pub fn hashed_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("out");
        v
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON of
    /// [`Self::hashed_view`], hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.hashed_view()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Help footer listing every config key with its default.
pub fn defaults_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = String::from(
        "Config keys (TOML file via --config, or --key flags; flags win) and defaults:\n",
    );
    for (key, value) in defaults.as_object().expect("config is an object") {
        let shown = match (key.as_str(), value) {
            ("out", _) => format!("${OUT_ENV}/<command>, else {DEFAULT_OUT_ROOT}/<command>"),
            (_, serde_json::Value::Null) => "(none)".to_string(),
            (_, serde_json::Value::Array(a)) if a.is_empty() => "(none)".to_string(),
            _ => value.to_string(),
        };
        out.push_str(&format!("  {key} = {shown}\n"));
    }
    out
}

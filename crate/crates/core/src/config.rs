//! Experiment configuration: one TOML file, unknown keys rejected, every
//! field defaulted, `key=value` overrides applied before validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ross_autograd::DType;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Result, RossError};
use crate::mmlm::ModelConfig;
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::schedules::{make_beta_schedule_with, BetaSchedule, ScheduleKind, SigmaMode, DEFAULT_STEPS};
use crate::synthdata::DatasetSizes;
use crate::tokenizers::{AeConfig, TokenizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

/// The only optimizer; kept as a named field so configs read naturally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Adamw,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerName::Adamw,
            lr: 3e-4,
            weight_decay: 0.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Defaults depend on the kind.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub sigma: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: DEFAULT_STEPS,
            beta_min: None,
            beta_max: None,
            sigma: SigmaMode::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<BetaSchedule> {
        let (lo, hi) = self.kind.default_bounds();
        make_beta_schedule_with(
            self.kind,
            self.steps,
            self.beta_min.unwrap_or(lo),
            self.beta_max.unwrap_or(hi),
            self.sigma,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Patch autoencoder used by `latent_ae` and `vq`.
    pub ae: AeConfig,
    pub frozen_seed: u64,
    pub frozen_d_lat: usize,
    /// Training images used to fit the autoencoder and the standardizer.
    pub fit_images: usize,
    /// Load a saved tokenizer instead of building one.
    pub path: Option<PathBuf>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            ae: AeConfig::default(),
            frozen_seed: 0,
            frozen_d_lat: TokenizerKind::FrozenFeature.default_d_lat(4),
            fit_images: 2000,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub seed: u64,
    pub precision: Precision,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the step count below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    pub warmup_ratio: f64,
    pub lr_decay: LrDecay,
    /// Checkpoint + validation probe every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Validation samples probed at each evaluation (0 = all).
    pub eval_samples: usize,
    pub clip_norm: f64,
    /// Train only the projector and visual machinery for the first
    /// `stage1_fraction` of steps.
    pub two_stage: bool,
    pub stage1_fraction: f64,
    /// Also supervise the question tokens.
    pub supervise_instruction: bool,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            warmup_ratio: 0.03,
            lr_decay: LrDecay::Cosine,
            eval_every: 0,
            eval_samples: 0,
            clip_norm: 1.0,
            two_stage: false,
            stage1_fraction: 0.1,
            supervise_instruction: false,
            train_limit: None,
        }
    }
}

/// Everything that determines a training run; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainOptions,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub tokenizer: TokenizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let fail = |m: String| Err(RossError::config(m));
        if t.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if t.epochs == 0 && t.max_steps.is_none() {
            return fail("train.epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            return fail(format!("train.warmup_ratio {} outside [0, 1)", t.warmup_ratio));
        }
        if !(t.clip_norm > 0.0) {
            return fail("train.clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&t.stage1_fraction) {
            return fail(format!("train.stage1_fraction {} outside [0, 1)", t.stage1_fraction));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(o.eps > 0.0) {
            return fail("optimizer.lr and eps must be positive, weight_decay non-negative".into());
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("optimizer.betas {:?} outside [0, 1)", o.betas));
        }
        self.model.validate()?;
        self.objective.validate()?;
        if self.objective.kind.uses_denoiser() {
            DenoiserConfig {
                d_lat: 1,
                ..self.denoiser
            }
            .validate()?;
            self.schedule.build()?;
        }
        let uses_ae = matches!(self.objective.target_tokenizer(), Some(TokenizerKind::LatentAe | TokenizerKind::Vq));
        if uses_ae && self.tokenizer.path.is_none() && self.tokenizer.ae.patch != self.model.patch_size {
            return fail(format!(
                "tokenizer.ae.patch {} must equal model.patch_size {}",
                self.tokenizer.ae.patch, self.model.patch_size
            ));
        }
        if self.objective.kind != ObjectiveKind::None && self.tokenizer.fit_images == 0 {
            return fail("tokenizer.fit_images must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Generator seed and split sizes used by `gen-data`.
    pub seed: u64,
    pub sizes: DatasetSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            sizes: DatasetSizes::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayers {
    #[default]
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub layers: AttentionLayers,
    /// Test samples used for attention statistics and saliency (0 = all).
    pub samples: usize,
    /// Images reconstructed by `reconstruct`.
    pub reconstruct_images: usize,
    pub reconstruct_seed: u64,
    /// Also write PNG renders next to the array files.
    pub png: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            layers: AttentionLayers::Final,
            samples: 0,
            reconstruct_images: 8,
            reconstruct_seed: 0,
            png: true,
        }
    }
}

/// The full experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainOptions,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub tokenizer: TokenizerConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            train: t.train,
            optimizer: t.optimizer,
            model: t.model,
            denoiser: t.denoiser,
            schedule: t.schedule,
            objective: t.objective,
            tokenizer: t.tokenizer,
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            train: self.train.clone(),
            optimizer: self.optimizer,
            model: self.model,
            denoiser: self.denoiser,
            schedule: self.schedule,
            objective: self.objective,
            tokenizer: self.tokenizer.clone(),
        }
    }

    pub fn set_training(&mut self, t: TrainConfig) {
        self.train = t.train;
        self.optimizer = t.optimizer;
        self.model = t.model;
        self.denoiser = t.denoiser;
        self.schedule = t.schedule;
        self.objective = t.objective;
        self.tokenizer = t.tokenizer;
    }

    pub fn validate(&self) -> Result<()> {
        self.training().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    /// Parses TOML text, applies `key=value` overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| RossError::config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| RossError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RossError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            RossError::Config(m) => RossError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| RossError::config(format!("cannot serialize config: {e}")))
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal and falls
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| RossError::config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RossError::config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| RossError::config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(RossError::UnknownKind {
                what: "precision",
                value: s.into(),
            }),
        }
    }
}

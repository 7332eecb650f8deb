//! Run configuration: a TOML file with `dataset`, `encoder`, `model`,
//! `diffusion`, `training` and `eval` sections. Every key is optional.

use std::path::{Path, PathBuf};

use diffup_core::diffusion::{ScheduleKind, SamplerConfig};
use diffup_core::evalkit::{ClassPool, EvalSpec, DEFAULT_EPISODES};
use diffup_core::synthshapes::{AnnotationKind, Split};
use diffup_core::trainer::TrainConfig;
use diffup_core::uqdd::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const DATA_DIR_ENV: &str = "DIFFUP_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Dataset directory; falls back to `$DIFFUP_DATA_DIR`, then `data`.
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fold whose base classes supply distractor clutter.
    pub clutter_fold: usize,
    pub max_clutter: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { root: None, seed: 0, train_per_class: 100, test_per_class: 40, clutter_fold: 0, max_clutter: 2 }
    }
}

impl DatasetConfig {
    pub fn resolved_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub name: String,
    /// Registry file; defaults to `<dataset root>/encoders.toml`.
    pub registry: Option<PathBuf>,
    /// Base-class images per class for the text bank fit.
    pub text_bank_images: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { name: "rp-32".into(), registry: None, text_bank_images: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { schedule: ScheduleKind::Cosine, steps: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shots: usize,
    pub annotation: AnnotationKind,
    pub with_text: bool,
    pub ddim_steps: usize,
    pub ensemble: usize,
    pub batch_episodes: usize,
    pub seed: u64,
    pub allow_base: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            episodes: DEFAULT_EPISODES,
            shots: 1,
            annotation: AnnotationKind::Mask,
            with_text: true,
            ddim_steps: s.n_steps,
            ensemble: s.n_ensemble,
            batch_episodes: 4,
            seed: 1000,
            allow_base: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::desk(),
            diffusion: DiffusionConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Propagates the `diffusion` section into the model and training
    /// settings that repeat it.
    pub fn sync(&mut self) {
        self.model.diffusion_steps = self.diffusion.steps;
        self.training.diffusion_steps = self.diffusion.steps;
        self.training.schedule = self.diffusion.schedule;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.eval.episodes == 0 || self.eval.ddim_steps == 0 || self.eval.ensemble == 0 {
            return Err(Error::Config("eval episodes, ddim_steps and ensemble must be positive".into()));
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.dataset.resolved_root()
    }

    pub fn registry_path(&self) -> PathBuf {
        self.encoder.registry.clone().unwrap_or_else(|| self.data_root().join("encoders.toml"))
    }

    /// Novel-class evaluation of the configured fold.
    pub fn eval_spec(&self) -> EvalSpec {
        let e = &self.eval;
        EvalSpec {
            fold: self.training.fold,
            pool: if e.allow_base { ClassPool::Base } else { ClassPool::Novel },
            allow_base: e.allow_base,
            split: Split::Test,
            shots: e.shots,
            annotation: e.annotation,
            with_text: e.with_text,
            n_episodes: e.episodes,
            seed: e.seed,
            n_steps: e.ddim_steps,
            n_ensemble: e.ensemble,
            batch_episodes: e.batch_episodes,
        }
    }
}

//! Run configuration: one TOML document describes a full pipeline run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adv::DiscriminatorConfig;
use crate::data::toybench::ToyBenchConfig;
use crate::det::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::{LrDecay, LrSchedule, OptimKind};
use crate::par::ExecMode;
use crate::selftrain::ThresholdSchedule;
use crate::train::{LambdaMode, TrainConfig};

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "MDADET_OUT_ROOT";

/// Where the benchmark comes from: generated in memory from a config, or
/// loaded from a directory written by `generate-bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchSource {
    Generate {
        seed: u64,
        #[serde(default)]
        config: ToyBenchConfig,
    },
    Load {
        root: PathBuf,
    },
}

impl Default for BenchSource {
    fn default() -> Self {
        BenchSource::Generate { seed: 7, config: ToyBenchConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Mode {
    #[default]
    Off,
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub stage1: Stage1Mode,
    /// Directory of externally translated source train images
    /// (required when `stage1 = "external"`).
    pub stage1_external_dir: Option<PathBuf>,
    /// Fit one translation per target instead of the merged-target default;
    /// the translated copies are concatenated into the training source.
    pub stage1_per_target: bool,
    pub stage2: bool,
    pub stage3: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            stage1: Stage1Mode::Off,
            stage1_external_dir: None,
            stage1_per_target: false,
            stage2: true,
            stage3: false,
        }
    }
}

/// Optimizer settings; the learning-rate schedule is piecewise-constant with
/// at most one decay, mirroring the train-long-then-drop recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    /// Stage-2 iteration budget.
    pub iterations: usize,
    pub base_lr: f64,
    pub decay_at: Option<u64>,
    pub decay_factor: f64,
    /// Stage-3 per-round budget.
    pub round_iterations: usize,
    pub clip_grad_norm: Option<f64>,
    pub optimizer: OptimKind,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            iterations: 2000,
            base_lr: 2e-4,
            decay_at: Some(1000),
            decay_factor: 0.1,
            round_iterations: 500,
            clip_grad_norm: Some(10.0),
            optimizer: OptimKind::default(),
        }
    }
}

impl OptimSettings {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            decays: self
                .decay_at
                .map(|at_iter| LrDecay { at_iter, factor: self.decay_factor })
                .into_iter()
                .collect(),
        }
    }
}

/// Self-training behavior flags (stage 3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainToggles {
    pub adversarial: bool,
    pub pseudo_only: bool,
    pub reinit_each_round: bool,
}

impl Default for SelfTrainToggles {
    fn default() -> Self {
        SelfTrainToggles { adversarial: true, pseudo_only: false, reinit_each_round: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Master seed for model init and training streams. The benchmark has
    /// its own seed so seed sweeps share the data.
    pub seed: u64,
    pub bench: BenchSource,
    pub detector: DetectorConfig,
    pub discriminator: DiscriminatorConfig,
    pub stages: StageToggles,
    pub optim: OptimSettings,
    pub schedule: ThresholdSchedule,
    pub selftrain: SelfTrainToggles,
    /// Images per domain per batch, as `[domain_id, count]` pairs.
    pub batch_composition: Vec<[usize; 2]>,
    /// Restrict training to these target domain ids (evaluation still covers
    /// every domain). `None` trains against all targets.
    pub train_targets: Option<Vec<usize>>,
    pub eval_iou: f64,
    pub exec_mode: ExecMode,
    /// Stage-2 weights for a run that starts at stage 3.
    pub stage2_checkpoint: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            out_dir: PathBuf::from("out/run"),
            seed: 1,
            bench: BenchSource::default(),
            detector: DetectorConfig::default(),
            discriminator: DiscriminatorConfig::multiclass_at_c3(2),
            stages: StageToggles::default(),
            optim: OptimSettings::default(),
            schedule: ThresholdSchedule::default(),
            selftrain: SelfTrainToggles::default(),
            batch_composition: vec![[0, 4], [1, 2], [2, 2]],
            train_targets: None,
            eval_iou: 0.5,
            exec_mode: ExecMode::default(),
            stage2_checkpoint: None,
            log_every: 25,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Runtime(format!("config serialize: {e}")))
    }

    pub fn composition_map(&self) -> BTreeMap<usize, usize> {
        self.batch_composition.iter().map(|&[d, n]| (d, n)).collect()
    }

    /// Output directory after applying the `MDADET_OUT_ROOT` override to
    /// relative paths.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("run name is empty".into()));
        }
        self.detector.validate()?;
        self.schedule.thresholds()?;
        if self.batch_composition.is_empty()
            || self.batch_composition.iter().all(|&[_, n]| n == 0)
        {
            return Err(Error::Config("batch composition is empty".into()));
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for &[d, _] in &self.batch_composition {
                if !seen.insert(d) {
                    return Err(Error::Config(format!(
                        "batch composition repeats domain {d}"
                    )));
                }
            }
        }
        if !(self.optim.base_lr.is_finite() && self.optim.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base learning rate {} must be positive",
                self.optim.base_lr
            )));
        }
        if !(self.optim.decay_factor.is_finite() && self.optim.decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "lr decay factor {} must be positive",
                self.optim.decay_factor
            )));
        }
        if !(0.0 < self.eval_iou && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!(
                "eval IoU threshold {} outside (0, 1]",
                self.eval_iou
            )));
        }
        if self.stages.stage3 && !self.stages.stage2 && self.stage2_checkpoint.is_none() {
            return Err(Error::Config(
                "stage 3 requires stage 2 in the same run or an explicit stage2_checkpoint"
                    .into(),
            ));
        }
        if self.stages.stage1 == Stage1Mode::External && self.stages.stage1_external_dir.is_none()
        {
            return Err(Error::Config(
                "stage1 = \"external\" requires stage1_external_dir".into(),
            ));
        }
        if let Some(ids) = &self.train_targets {
            if ids.is_empty() {
                return Err(Error::Config("train_targets is empty".into()));
            }
        }
        Ok(())
    }

    /// The stage-2 training configuration (adversarial ramp active).
    pub fn stage2_train_config(&self, composition: BTreeMap<usize, usize>) -> TrainConfig {
        TrainConfig {
            iterations: self.optim.iterations,
            batch_composition: composition,
            optimizer: self.optim.optimizer,
            lr: self.optim.lr_schedule(),
            clip_grad_norm: self.optim.clip_grad_norm,
            lambda_mode: LambdaMode::Progress,
            log_every: self.log_every,
            exec_mode: self.exec_mode,
        }
    }
}

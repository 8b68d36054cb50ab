//! Experiment configuration, loaded from JSON.
//!
//! Every block is optional and falls back to its default; unknown keys are
//! rejected. Seeds are bases: case `k` of a batch uses `base + k`.

use std::path::{Path, PathBuf};

use ctmoco_core::ctrecon::{FanBeamGeometry, PhantomSampler};
use ctmoco_core::motion::PerturbationSpec;
use ctmoco_core::optimizer::{OptimizerConfig, StepRule};
use ctmoco_core::pfode::{OdeConfig, TraceMode};
use ctmoco_core::scorefield::NoiseSchedule;
use ctmoco_core::scorenet::{Architecture, SigmaLaw, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::weights::Normalization;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: FanBeamGeometry,
    pub phantom: PhantomSampler,
    pub schedule: ScheduleBlock,
    pub ode: OdeConfig,
    pub trace: TraceBlock,
    pub optimizer: OptimizerBlock,
    pub perturbation: PerturbationBlock,
    pub spline: SplineBlock,
    pub scorenet: ScoreNetBlock,
    pub metrics: MetricsBlock,
    pub experiment: BatchBlock,
    pub paths: PathsBlock,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: FanBeamGeometry::default(),
            phantom: PhantomSampler::default(),
            schedule: ScheduleBlock::default(),
            ode: OdeConfig::default(),
            trace: TraceBlock::default(),
            optimizer: OptimizerBlock::default(),
            perturbation: PerturbationBlock::default(),
            spline: SplineBlock::default(),
            scorenet: ScoreNetBlock::default(),
            metrics: MetricsBlock::default(),
            experiment: BatchBlock::default(),
            paths: PathsBlock::default(),
            seeds: Seeds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceBlock {
    pub mode: TraceMode,
    pub probes: usize,
}

impl Default for TraceBlock {
    fn default() -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            probes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    pub iterations: usize,
    pub r0: f64,
    pub q: f64,
    pub first_step: Option<f64>,
    pub step_rule: StepRule,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            iterations: d.iterations,
            r0: d.r0,
            q: d.q,
            first_step: d.first_step,
            step_rule: d.step_rule,
        }
    }
}

impl OptimizerBlock {
    pub fn with_seed(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            iterations: self.iterations,
            r0: self.r0,
            q: self.q,
            seed,
            first_step: self.first_step,
            step_rule: self.step_rule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBlock {
    pub nodes: usize,
    pub amplitude_mm: f64,
    pub amplitude_deg: f64,
}

impl Default for PerturbationBlock {
    fn default() -> Self {
        let d = PerturbationSpec::default();
        Self {
            nodes: d.nodes,
            amplitude_mm: d.amplitude_t,
            amplitude_deg: d.amplitude_r,
        }
    }
}

impl PerturbationBlock {
    pub fn with_seed(&self, seed: u64) -> PerturbationSpec {
        PerturbationSpec {
            nodes: self.nodes,
            amplitude_t: self.amplitude_mm,
            amplitude_r: self.amplitude_deg,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineBlock {
    pub nodes: usize,
}

impl Default for SplineBlock {
    fn default() -> Self {
        Self { nodes: 30 }
    }
}

/// Which images the score network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingImages {
    /// Rasterized phantoms as sampled.
    Phantom,
    /// Motion-free filtered backprojections of the phantoms, matching what
    /// the compensation objective sees.
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreNetBlock {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub sigma_law: SigmaLaw,
    pub grad_clip: Option<f64>,
    pub ema: f64,
    pub dataset_size: usize,
    pub training_images: TrainingImages,
    pub normalization: Normalization,
}

impl Default for ScoreNetBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            architecture: Architecture::default(),
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            sigma_law: t.sigma_law,
            grad_clip: t.grad_clip,
            ema: t.ema,
            dataset_size: 128,
            training_images: TrainingImages::Reconstruction,
            normalization: Normalization::default(),
        }
    }
}

impl ScoreNetBlock {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            sigma_law: self.sigma_law,
            seed,
            grad_clip: self.grad_clip,
            ema: self.ema,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsBlock {
    /// Intensity range used by SSIM.
    pub data_range: f64,
    /// Display window of PNG previews.
    pub window: [f64; 2],
}

impl Default for MetricsBlock {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            window: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchBlock {
    pub cases: usize,
}

impl Default for BatchBlock {
    fn default() -> Self {
        Self { cases: 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsBlock {
    /// Score-network weights used by the likelihood objective when no
    /// `--weights` flag is given.
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub phantom: u64,
    pub perturbation: u64,
    pub optimizer: u64,
    pub train: u64,
    pub training_data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            phantom: 1000,
            perturbation: 2000,
            optimizer: 3000,
            train: 4000,
            training_data: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (pretty-printed) JSON.
    pub fn hash(&self) -> String {
        io::sha256_hex(self.to_json().as_bytes())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.sigma_min, self.schedule.sigma_max).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(config_err)?;
        self.phantom.validate().map_err(config_err)?;
        let schedule = self.schedule()?;
        self.ode.validate().map_err(config_err)?;
        if self.trace.probes == 0 {
            return Err(Error::Config("trace.probes must be at least 1".into()));
        }
        self.optimizer.with_seed(0).validate().map_err(config_err)?;
        if self.perturbation.nodes < 2 || self.spline.nodes < 2 {
            return Err(Error::Config("splines need at least 2 nodes".into()));
        }
        if !(self.perturbation.amplitude_mm >= 0.0 && self.perturbation.amplitude_deg >= 0.0) {
            return Err(Error::Config("perturbation amplitudes must be non-negative".into()));
        }
        self.scorenet.architecture.validate().map_err(config_err)?;
        self.scorenet.train_config(0).validate(&schedule).map_err(config_err)?;
        if self.scorenet.dataset_size == 0 {
            return Err(Error::Config("scorenet.dataset_size must be positive".into()));
        }
        let n = self.scorenet.normalization;
        if !(n.scale.is_finite() && n.scale != 0.0 && n.offset.is_finite()) {
            return Err(Error::Config("normalization needs a finite non-zero scale".into()));
        }
        if !(self.metrics.data_range > 0.0) || !(self.metrics.window[1] > self.metrics.window[0]) {
            return Err(Error::Config("metrics range and window must be non-empty".into()));
        }
        if self.experiment.cases == 0 {
            return Err(Error::Config("experiment.cases must be positive".into()));
        }
        Ok(())
    }
}

fn config_err(e: ctmoco_core::Error) -> Error {
    Error::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"bogus": 1}"#, r#"{"optimizer": {"iterations": 3, "lr": 1}}"#] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_blocks_keep_other_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"optimizer": {"iterations": 3}}"#).unwrap();
        assert_eq!(cfg.optimizer.iterations, 3);
        assert_eq!(cfg.optimizer.r0, 100.0);
        assert_eq!(cfg.optimizer.q, 0.97);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"schedule": {"sigma_min": 1.0, "sigma_max": 0.5}}"#,
            r#"{"optimizer": {"q": 1.5}}"#,
            r#"{"trace": {"mode": "hutchinson", "probes": 0}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }
}

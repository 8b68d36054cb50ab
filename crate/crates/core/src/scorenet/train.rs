//! Denoising score matching.
//!
//! Per sample the loss is `‖σ·s(x + σz, t) + z‖²` with `z ~ N(0, I)` and `t`
//! drawn so that `σ(t)` follows the configured law; the batch loss is the
//! mean over samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ScoreNet;
use crate::grid::{SeededRng, Shape};
use crate::scorefield::{NoiseSchedule, ScoreFunction};
use crate::{Error, Result};
use crate::math::{ln, powi, sq, sqrt};

/// Distribution of the training noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "law", rename_all = "snake_case"))]
pub enum SigmaLaw {
    /// `log σ` uniform on `[log σ_min, log σ_max]`.
    LogUniform,
    /// `log σ` uniform on `[log lo, log hi]`, a sub-range of the schedule.
    LogUniformRange { lo: f64, hi: f64 },
}

impl SigmaLaw {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if let SigmaLaw::LogUniformRange { lo, hi } = *self {
            if !(lo >= schedule.sigma_min() && hi <= schedule.sigma_max() && lo < hi) {
                return Err(Error::invalid(format!(
                    "sigma range [{lo}, {hi}] must lie inside [{}, {}]",
                    schedule.sigma_min(),
                    schedule.sigma_max()
                )));
            }
        }
        Ok(())
    }

    /// Maps a uniform draw in `[0, 1)` to a diffusion time.
    fn time(&self, schedule: &NoiseSchedule, u: f64) -> f64 {
        match *self {
            SigmaLaw::LogUniform => u,
            SigmaLaw::LogUniformRange { lo, hi } => {
                let a = ln(lo / schedule.sigma_min()) / schedule.log_ratio();
                let b = ln(hi / schedule.sigma_min()) / schedule.log_ratio();
                (a + u * (b - a)).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub sigma_law: SigmaLaw,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Smoothing factor of the reported loss curve.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            learning_rate: 2e-3,
            sigma_law: SigmaLaw::LogUniform,
            seed: 0,
            grad_clip: Some(10.0),
            ema: 0.98,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::invalid("ema factor must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("gradient clip must be positive"));
            }
        }
        self.sigma_law.validate(schedule)
    }
}

/// Deterministic supply of clean training images.
pub trait ImageSource {
    fn shape(&self) -> Shape;
    /// The image with the given index; equal indices give equal images.
    fn image(&self, index: u64) -> Result<Vec<f64>>;
}

/// A fixed in-memory set, indexed cyclically.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    shape: Shape,
    images: Vec<Vec<f64>>,
}

impl DatasetSource {
    pub fn new(shape: Shape, images: Vec<Vec<f64>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(bad) = images.iter().find(|i| i.len() != shape.len()) {
            return Err(Error::shape(format!("{shape} image"), bad.len()));
        }
        Ok(Self { shape, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageSource for DatasetSource {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn image(&self, index: u64) -> Result<Vec<f64>> {
        Ok(self.images[(index % self.images.len() as u64) as usize].clone())
    }
}

/// One noisy sample: time, noise level, perturbed input and the noise.
struct Noised {
    t: f64,
    sigma: f64,
    input: Vec<f64>,
    z: Vec<f64>,
}

fn noise_batch(
    batch: &[&[f64]],
    schedule: &NoiseSchedule,
    law: SigmaLaw,
    rng: &SeededRng,
) -> Vec<Noised> {
    let mut gen = rng.generator();
    batch
        .iter()
        .map(|x| {
            let t = law.time(schedule, gen.random::<f64>());
            let sigma = schedule.sigma_at(t);
            let z: Vec<f64> = (0..x.len()).map(|_| gen.sample::<f64, _>(StandardNormal)).collect();
            let input = x.iter().zip(&z).map(|(xi, zi)| xi + sigma * zi).collect();
            Noised { t, sigma, input, z }
        })
        .collect()
}

fn check_batch(batch: &[&[f64]], shape: Shape) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    if let Some(bad) = batch.iter().find(|x| x.len() != shape.len()) {
        return Err(Error::shape(format!("{shape} image"), bad.len()));
    }
    Ok(())
}

fn sample_loss(sigma: f64, s: &[f64], z: &[f64]) -> f64 {
    s.iter().zip(z).map(|(si, zi)| sq(sigma * si + zi)).sum()
}

/// DSM loss of an arbitrary score function (no gradient).
pub fn dsm_loss_value(
    score: &impl ScoreFunction,
    batch: &[&[f64]],
    shape: Shape,
    schedule: &NoiseSchedule,
    law: SigmaLaw,
    rng: &SeededRng,
) -> Result<f64> {
    check_batch(batch, shape)?;
    let mut total = 0.0;
    for n in noise_batch(batch, schedule, law, rng) {
        let s = score.evaluate(&n.input, shape, n.t)?;
        total += sample_loss(n.sigma, &s, &n.z);
    }
    finite_loss(total / batch.len() as f64, 0)
}

fn finite_loss(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::TrainingDivergence { step, loss })
    }
}

/// DSM loss of the network and its gradient with respect to the parameters.
pub fn dsm_loss(
    net: &ScoreNet,
    batch: &[&[f64]],
    shape: Shape,
    law: SigmaLaw,
    rng: &SeededRng,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch, shape)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; net.params().len()];
    let mut total = 0.0;
    for n in noise_batch(batch, net.schedule(), law, rng) {
        let mut loss = 0.0;
        net.accumulate_param_grad(
            &n.input,
            shape,
            n.t,
            |s| {
                loss = sample_loss(n.sigma, s, &n.z);
                s.iter()
                    .zip(&n.z)
                    .map(|(si, zi)| 2.0 * scale * n.sigma * (n.sigma * si + zi))
                    .collect()
            },
            &mut grad,
        )?;
        total += loss;
    }
    Ok((finite_loss(total * scale, 0)?, grad))
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Bias-corrected exponential moving average of `losses`.
    pub smoothed: Vec<f64>,
}

impl TrainReport {
    pub fn initial_smoothed(&self) -> Option<f64> {
        self.smoothed.first().copied()
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - powi(Self::BETA1, self.t);
        let c2 = 1.0 - powi(Self::BETA2, self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let step = lr * (self.m[i] / c1) / (sqrt(self.v[i] / c2) + Self::EPS);
            // stored weights are f32, keep the in-memory copy identical
            params[i] = ((params[i] - step) as f32) as f64;
        }
    }
}

/// Trains `net` in place with Adam.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::TrainingDivergence`] and `net` keeps the weights of the last
/// finite step.
pub fn train(
    net: &mut ScoreNet,
    source: &impl ImageSource,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate(net.schedule())?;
    let shape = source.shape();
    let mut adam = Adam::new(net.params().len());
    let mut report = TrainReport::default();
    let mut ema = 0.0;
    let mut weight = 0.0;
    for step in 0..config.steps {
        let step_rng = SeededRng::new(config.seed, 2 * step as u64);
        let mut picker = SeededRng::new(config.seed, 2 * step as u64 + 1).generator();
        let images = (0..config.batch_size)
            .map(|_| source.image(picker.random::<u64>()))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let (loss, mut grad) = match dsm_loss(net, &batch, shape, config.sigma_law, &step_rng) {
            Ok(r) => r,
            Err(Error::TrainingDivergence { loss, .. }) => {
                return Err(Error::TrainingDivergence { step, loss })
            }
            Err(e) => return Err(e),
        };
        let gnorm = sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if !gnorm.is_finite() {
            return Err(Error::TrainingDivergence { step, loss: gnorm });
        }
        if let Some(clip) = config.grad_clip {
            if gnorm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / gnorm);
            }
        }
        adam.update(net.params_mut(), &grad, config.learning_rate);
        ema = config.ema * ema + (1.0 - config.ema) * loss;
        weight = config.ema * weight + (1.0 - config.ema);
        report.losses.push(loss);
        report.smoothed.push(ema / weight);
        on_step(step, loss);
    }
    Ok(report)
}

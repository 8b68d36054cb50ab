//! Gradient-based motion compensation over spline node vectors.
//!
//! Iteration `n` reconstructs with the motion `γ⁽ⁿ⁾`, evaluates the
//! objective, pulls its image gradient back through the backprojection and
//! the spline weights, and takes the plain step `γ⁽ⁿ⁺¹⁾ = γ⁽ⁿ⁾ ± r⁽ⁿ⁾·g`
//! with `r⁽ⁿ⁾ = r₀·qⁿ`. [`StepRule::MaxNormalized`] divides `g` by its
//! largest entry first, for objectives whose gradient scale swings by
//! orders of magnitude between iterates.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::ctrecon::{backproject, recon_vjp, FilteredSinogram};
use crate::grid::{Image, SeededRng, Shape};
use crate::motion::MotionSpline;
use crate::pfode::{log_likelihood, OdeConfig, TraceEstimatorConfig, TraceMode};
use crate::scorefield::{NoiseSchedule, ScoreFunction};
use crate::{Error, Result};
use crate::math::{powi, sqrt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Orientation {
    Maximize,
    Minimize,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::Maximize => 1.0,
            Orientation::Minimize => -1.0,
        }
    }

    /// Whether `a` is a better objective value than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Orientation::Maximize => a > b,
            Orientation::Minimize => a < b,
        }
    }
}

/// Image-quality objective with gradient.
pub trait Objective {
    fn orientation(&self) -> Orientation;

    /// Value and image gradient. Stochastic objectives draw all their
    /// randomness from `rng`, so equal `rng` means an identical objective.
    fn evaluate(&self, image: &Image, rng: SeededRng) -> Result<(f64, Vec<f64>)>;
}

/// Mean squared error to a reference image (minimized).
#[derive(Debug, Clone, PartialEq)]
pub struct MseObjective {
    truth: Image,
}

impl MseObjective {
    pub fn new(truth: Image) -> Self {
        Self { truth }
    }
}

impl Objective for MseObjective {
    fn orientation(&self) -> Orientation {
        Orientation::Minimize
    }

    fn evaluate(&self, image: &Image, _rng: SeededRng) -> Result<(f64, Vec<f64>)> {
        image.check_same_shape(&self.truth)?;
        let d = image.len() as f64;
        let diff: Vec<f64> = image.data().iter().zip(self.truth.data()).map(|(a, b)| a - b).collect();
        let value = diff.iter().map(|v| v * v).sum::<f64>() / d;
        Ok((value, diff.iter().map(|v| 2.0 * v / d).collect()))
    }
}

/// Probability-flow log-likelihood of the image (maximized). A fresh probe
/// set is drawn from the `rng` of every call.
#[derive(Debug, Clone)]
pub struct LikelihoodObjective<S> {
    pub score: S,
    pub schedule: NoiseSchedule,
    pub ode: OdeConfig,
    pub mode: TraceMode,
    pub probes: usize,
    /// The score sees `(x - offset)·scale`.
    pub offset: f64,
    pub scale: f64,
}

impl<S: ScoreFunction> LikelihoodObjective<S> {
    pub fn new(score: S, schedule: NoiseSchedule, ode: OdeConfig, mode: TraceMode, probes: usize) -> Self {
        Self {
            score,
            schedule,
            ode,
            mode,
            probes,
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn trace_config(&self, rng: SeededRng) -> TraceEstimatorConfig {
        match self.mode {
            TraceMode::Exact => TraceEstimatorConfig::exact(),
            TraceMode::Hutchinson => TraceEstimatorConfig::hutchinson(self.probes, rng),
        }
    }
}

impl<S: ScoreFunction> Objective for LikelihoodObjective<S> {
    fn orientation(&self) -> Orientation {
        Orientation::Maximize
    }

    fn evaluate(&self, image: &Image, rng: SeededRng) -> Result<(f64, Vec<f64>)> {
        let x = image.with_data(image.data().iter().map(|v| (v - self.offset) * self.scale).collect())?;
        let res = log_likelihood(&self.score, &self.schedule, &self.ode, &self.trace_config(rng), &x, true)?;
        let grad = res.gradient.unwrap_or_default().into_iter().map(|g| g * self.scale).collect();
        Ok((res.logp, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub r0: f64,
    pub q: f64,
    pub seed: u64,
    /// When set, `r0` is replaced so that the first step moves the largest
    /// node by this amount (mm or degrees).
    #[cfg_attr(feature = "serde", serde(default))]
    pub first_step: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub step_rule: StepRule,
}

/// How the gradient is turned into an update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StepRule {
    /// `γ ± r·g`.
    #[default]
    Plain,
    /// `γ ± r·g / max|g|`: the largest node moves by exactly `r`.
    MaxNormalized,
}

impl StepRule {
    /// Direction for the raw gradient `g`; zero stays zero.
    pub fn direction(self, gradient: &[f64]) -> Vec<f64> {
        match self {
            StepRule::Plain => gradient.to_vec(),
            StepRule::MaxNormalized => {
                let gmax = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                if gmax > 0.0 {
                    gradient.iter().map(|g| g / gmax).collect()
                } else {
                    gradient.to_vec()
                }
            }
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            r0: 100.0,
            q: 0.97,
            seed: 0,
            first_step: None,
            step_rule: StepRule::Plain,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::invalid("r0 must be positive"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid("q must lie in (0, 1]"));
        }
        if let Some(s) = self.first_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid("first step must be positive"));
            }
        }
        Ok(())
    }
}

/// `r₀·qⁿ`.
pub fn step_size(config: &OptimizerConfig, n: usize) -> f64 {
    config.r0 * powi(config.q, n as i32)
}

/// One update `γ ± r·g` (ascent when maximizing).
pub fn step(gamma: &[f64], gradient: &[f64], r: f64, orientation: Orientation) -> Result<Vec<f64>> {
    if gamma.len() != gradient.len() {
        return Err(Error::shape(gamma.len(), gradient.len()));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            context: "non-finite motion gradient".to_string(),
        });
    }
    let s = orientation.sign() * r;
    Ok(gamma.iter().zip(gradient).map(|(x, g)| x + s * g).collect())
}

/// Fixed inputs of one compensation run.
#[derive(Debug, Clone)]
pub struct CompensationProblem {
    pub filtered: FilteredSinogram,
    pub shape: Shape,
    pub spacing: f64,
    pub nodes: usize,
}

/// Objective value, its gradient with respect to `γ`, and the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub image: Image,
}

impl CompensationProblem {
    pub fn reconstruct(&self, gamma: &[f64]) -> Result<Image> {
        let spline = MotionSpline::unpack(self.nodes, self.filtered.geometry().n_views, gamma)?;
        backproject(&self.filtered, Some(&spline.per_view()), self.shape, self.spacing)
    }

    /// Runs reconstruction, objective and the chain rule at `γ`.
    pub fn evaluate(&self, objective: &impl Objective, gamma: &[f64], rng: SeededRng) -> Result<Evaluation> {
        let spline = MotionSpline::unpack(self.nodes, self.filtered.geometry().n_views, gamma)?;
        let motion = spline.per_view();
        let image = backproject(&self.filtered, Some(&motion), self.shape, self.spacing)?;
        let (value, grad_image) = objective.evaluate(&image, rng)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                context: "objective value is not finite".to_string(),
            });
        }
        let upstream = image.with_data(grad_image).map_err(|_| Error::Divergence {
            step: 0,
            context: "objective gradient is not finite".to_string(),
        })?;
        let per_view = recon_vjp(&self.filtered, Some(&motion), &upstream)?;
        let gradient = spline.chain_rule(&per_view)?;
        Ok(Evaluation { value, gradient, image })
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptRecord {
    pub iteration: usize,
    pub gamma: Vec<f64>,
    pub value: f64,
    pub step_size: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "status", rename_all = "snake_case"))]
pub enum RunStatus {
    Completed,
    /// The run stopped early; the result holds the best iterate seen.
    Degraded { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    pub gamma: Vec<f64>,
    pub image: Image,
    pub trace: Vec<OptRecord>,
    pub status: RunStatus,
    /// Step scale actually used.
    pub r0: f64,
}

/// Runs the compensation loop from `γ⁽⁰⁾ = 0`. The trace has
/// `iterations + 1` records, the last one for the final iterate.
/// `clock` supplies wall time in seconds when available.
pub fn compensate(
    problem: &CompensationProblem,
    objective: &impl Objective,
    config: &OptimizerConfig,
    clock: Option<&dyn Fn() -> f64>,
) -> Result<Compensation> {
    config.validate()?;
    let orientation = objective.orientation();
    let now = || clock.map_or(0.0, |c| c());
    let start = now();
    let mut gamma = vec![0.0; 3 * problem.nodes];
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, Vec<f64>, Image)> = None;
    let mut r0 = config.r0;
    let mut status = RunStatus::Completed;

    for n in 0..=config.iterations {
        let eval = match problem.evaluate(objective, &gamma, SeededRng::new(config.seed, n as u64)) {
            Ok(e) if e.gradient.iter().all(|g| g.is_finite()) => e,
            Ok(_) => {
                status = degraded(n, "non-finite motion gradient");
                break;
            }
            Err(e) => {
                status = degraded(n, &format!("{e}"));
                break;
            }
        };
        let grad_norm = sqrt(eval.gradient.iter().map(|g| g * g).sum::<f64>());
        let direction = config.step_rule.direction(&eval.gradient);
        if n == 0 {
            if let Some(target) = config.first_step {
                let gmax = direction.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                if gmax > 0.0 {
                    r0 = target / gmax;
                }
            }
        }
        let r = r0 * powi(config.q, n as i32);
        trace.push(OptRecord {
            iteration: n,
            gamma: gamma.clone(),
            value: eval.value,
            step_size: r,
            grad_norm,
            wall_time_s: now() - start,
        });
        if best.as_ref().is_none_or(|(v, _, _)| orientation.better(eval.value, *v)) {
            best = Some((eval.value, gamma.clone(), eval.image.clone()));
        }
        if n == config.iterations {
            return Ok(Compensation {
                gamma,
                image: eval.image,
                trace,
                status,
                r0,
            });
        }
        gamma = step(&gamma, &direction, r, orientation)?;
    }

    match best {
        Some((_, gamma, image)) => Ok(Compensation {
            gamma,
            image,
            trace,
            status,
            r0,
        }),
        None => Err(match status {
            RunStatus::Degraded { iteration, reason } => Error::Divergence { step: iteration, context: reason },
            RunStatus::Completed => Error::invalid("no iterate evaluated"),
        }),
    }
}

fn degraded(iteration: usize, reason: &str) -> RunStatus {
    RunStatus::Degraded {
        iteration,
        reason: reason.to_string(),
    }
}

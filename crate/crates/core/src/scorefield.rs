//! Variance-exploding noise schedule, probability-flow drift and closed-form
//! score oracles.
//!
//! The perturbation kernel of the VE process adds isotropic Gaussian noise
//! with variance `σ(t)² - σ_min²` on top of the data, so a Gaussian data
//! distribution `N(μ, s²·I)` has the time-`t` marginal
//! `N(μ, (s² + σ(t)² - σ_min²)·I)`. The analytic scores below are the exact
//! gradients of these marginals and serve as oracles for the ODE engine.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::grid::{dot, Shape};
use crate::{Error, Result};
use crate::math::{exp, ln, sq, sqrt};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Geometric VE schedule `σ(t) = σ_min·(σ_max/σ_min)^t` on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
}

impl NoiseSchedule {
    pub const T_END: f64 = 1.0;

    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite() && sigma_min > 0.0) {
            return Err(Error::invalid(format!(
                "schedule needs finite sigma_min > 0, got ({sigma_min}, {sigma_max})"
            )));
        }
        if sigma_max <= sigma_min {
            return Err(Error::invalid(format!(
                "schedule needs sigma_max > sigma_min, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn t_end(&self) -> f64 {
        Self::T_END
    }

    /// `ln(σ_max / σ_min)`.
    pub fn log_ratio(&self) -> f64 {
        ln(self.sigma_max / self.sigma_min)
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=Self::T_END).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.sigma_at(t))
    }

    pub fn diffusion_g(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.sigma_at(t) * sqrt(2.0 * self.log_ratio()))
    }

    pub(crate) fn sigma_at(&self, t: f64) -> f64 {
        self.sigma_min * exp(self.log_ratio() * t)
    }

    /// `g(t)² = 2·σ(t)²·ln(σ_max/σ_min)`.
    pub(crate) fn g_squared_at(&self, t: f64) -> f64 {
        let s = self.sigma_at(t);
        2.0 * s * s * self.log_ratio()
    }

    /// Extra variance the VE kernel has added by time `t`.
    pub(crate) fn added_variance_at(&self, t: f64) -> f64 {
        let s = self.sigma_at(t);
        s * s - self.sigma_min * self.sigma_min
    }

    /// Inverse of `sigma`: the time at which the schedule reaches `sigma`.
    pub fn time_of_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(Error::invalid(format!("sigma {sigma} outside the schedule range")));
        }
        Ok((ln(sigma / self.sigma_min) / self.log_ratio()).clamp(0.0, Self::T_END))
    }
}

/// A time-conditional approximation of `∇_x log p_t(x)`.
///
/// Besides the score itself the ODE engine needs forward (JVP) and reverse
/// (VJP) derivatives, including the reverse derivative of the tangent, which
/// is what the adjoint of a Hutchinson divergence term consumes.
pub trait ScoreFunction {
    /// `s(x, t)`.
    fn evaluate(&self, x: &[f64], shape: Shape, t: f64) -> Result<Vec<f64>>;

    /// `(s(x, t), J(x, t)·dir)` where `J = ∂s/∂x`.
    fn evaluate_jvp(&self, x: &[f64], shape: Shape, t: f64, dir: &[f64])
        -> Result<(Vec<f64>, Vec<f64>)>;

    /// Gradient with respect to `x` of `⟨out_bar, s(x, t)⟩ + ⟨tangent_bar, J(x, t)·dir⟩`.
    ///
    /// With `tangent_bar = None` this is the plain VJP `Jᵀ·out_bar` and `dir`
    /// is ignored.
    fn vjp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>>;

    /// `(s(x, t), vjp(...))` in one call; implementations that share work
    /// between the two override this.
    fn evaluate_with_vjp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.evaluate(x, shape, t)?;
        let g = self.vjp(x, shape, t, dir, out_bar, tangent_bar)?;
        Ok((s, g))
    }
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for &S {
    fn evaluate_with_vjp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).evaluate_with_vjp(x, shape, t, dir, out_bar, tangent_bar)
    }

    fn evaluate(&self, x: &[f64], shape: Shape, t: f64) -> Result<Vec<f64>> {
        (**self).evaluate(x, shape, t)
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).evaluate_jvp(x, shape, t, dir)
    }

    fn vjp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        (**self).vjp(x, shape, t, dir, out_bar, tangent_bar)
    }
}

/// Closed-form log-density of a VE-perturbed distribution.
pub trait AnalyticDensity {
    fn log_density(&self, x: &[f64], t: f64) -> Result<f64>;
}

/// Exact log-density of `density` at time `t`.
pub fn analytic_logp(density: &impl AnalyticDensity, x: &[f64], t: f64) -> Result<f64> {
    NoiseSchedule::check_time(t)?;
    density.log_density(x, t)
}

/// Probability-flow drift `f̃(x, t) = -½·g(t)²·s(x, t)` (the VE forward drift is zero).
pub fn pf_drift(
    schedule: &NoiseSchedule,
    score: &impl ScoreFunction,
    x: &[f64],
    shape: Shape,
    t: f64,
) -> Result<Vec<f64>> {
    NoiseSchedule::check_time(t)?;
    let c = -0.5 * schedule.g_squared_at(t);
    let mut s = score.evaluate(x, shape, t)?;
    s.iter_mut().for_each(|v| *v *= c);
    Ok(s)
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(format!("{what} of length {expected}"), got))
    }
}

/// Score of `N(mean, s²·I)` data under the VE perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub variance_data: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianScore {
    pub fn new(mean: Vec<f64>, variance_data: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(variance_data >= 0.0 && variance_data.is_finite()) {
            return Err(Error::invalid("data variance must be finite and non-negative"));
        }
        if mean.is_empty() {
            return Err(Error::invalid("mean must not be empty"));
        }
        Ok(Self {
            mean,
            variance_data,
            schedule,
        })
    }

    /// Marginal variance `s² + σ(t)² - σ_min²`.
    pub fn marginal_variance(&self, t: f64) -> f64 {
        self.variance_data + self.schedule.added_variance_at(t)
    }
}

impl ScoreFunction for GaussianScore {
    fn evaluate(&self, x: &[f64], _shape: Shape, t: f64) -> Result<Vec<f64>> {
        check_len("input", self.mean.len(), x.len())?;
        let v = self.marginal_variance(t);
        Ok(x.iter().zip(&self.mean).map(|(xi, mi)| -(xi - mi) / v).collect())
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("direction", x.len(), dir.len())?;
        let v = self.marginal_variance(t);
        let s = self.evaluate(x, shape, t)?;
        Ok((s, dir.iter().map(|d| -d / v).collect()))
    }

    fn vjp(
        &self,
        x: &[f64],
        _shape: Shape,
        t: f64,
        _dir: &[f64],
        out_bar: &[f64],
        _tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        check_len("input", self.mean.len(), x.len())?;
        check_len("cotangent", x.len(), out_bar.len())?;
        // The Jacobian does not depend on x, so the tangent term has no gradient.
        let v = self.marginal_variance(t);
        Ok(out_bar.iter().map(|b| -b / v).collect())
    }
}

impl AnalyticDensity for GaussianScore {
    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        check_len("input", self.mean.len(), x.len())?;
        let v = self.marginal_variance(t);
        let d = x.len() as f64;
        let r2: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        Ok(-0.5 * d * (LN_2PI + ln(v)) - 0.5 * r2 / v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance_data: f64,
}

/// Score of an isotropic Gaussian mixture under the VE perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureScore {
    pub components: Vec<MixtureComponent>,
    pub schedule: NoiseSchedule,
}

/// Per-component quantities at a point: responsibility, variance and
/// component score `g_k = -(x - μ_k)/v_k`.
struct MixtureState {
    resp: Vec<f64>,
    var: Vec<f64>,
    comp_scores: Vec<Vec<f64>>,
    score: Vec<f64>,
    log_density: f64,
}

impl GaussianMixtureScore {
    pub fn new(components: Vec<MixtureComponent>, schedule: NoiseSchedule) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::invalid("mixture means must not be empty"));
        }
        let mut total = 0.0;
        for c in &components {
            check_len("component mean", dim, c.mean.len())?;
            if !(c.weight >= 0.0 && c.variance_data >= 0.0) {
                return Err(Error::invalid("mixture weights and variances must be non-negative"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self {
            components,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn state(&self, x: &[f64], t: f64) -> Result<MixtureState> {
        check_len("input", self.dim(), x.len())?;
        let d = x.len() as f64;
        let added = self.schedule.added_variance_at(t);
        let mut logw = Vec::with_capacity(self.components.len());
        let mut var = Vec::with_capacity(self.components.len());
        let mut comp_scores = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let v = c.variance_data + added;
            let g: Vec<f64> = x.iter().zip(&c.mean).map(|(a, m)| -(a - m) / v).collect();
            let r2 = dot(&g, &g) * v * v;
            let lw = if c.weight > 0.0 {
                ln(c.weight) - 0.5 * d * (LN_2PI + ln(v)) - 0.5 * r2 / v
            } else {
                f64::NEG_INFINITY
            };
            logw.push(lw);
            var.push(v);
            comp_scores.push(g);
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logw.iter().map(|l| exp(l - max)).sum();
        let log_density = max + ln(sum);
        let resp: Vec<f64> = logw.iter().map(|l| exp(l - log_density)).collect();
        let mut score = vec![0.0; x.len()];
        for (r, g) in resp.iter().zip(&comp_scores) {
            score.iter_mut().zip(g).for_each(|(s, gi)| *s += r * gi);
        }
        Ok(MixtureState {
            resp,
            var,
            comp_scores,
            score,
            log_density,
        })
    }

    /// `J·u` for the mixture Jacobian
    /// `J = Σ_k r_k (g_k g_kᵀ - I/v_k) - s sᵀ`.
    fn jacobian_apply(st: &MixtureState, u: &[f64]) -> Vec<f64> {
        let su = dot(&st.score, u);
        let mut out: Vec<f64> = st.score.iter().map(|s| -s * su).collect();
        for ((r, v), g) in st.resp.iter().zip(&st.var).zip(&st.comp_scores) {
            if *r == 0.0 {
                continue;
            }
            let gu = dot(g, u);
            out.iter_mut()
                .zip(u)
                .zip(g)
                .for_each(|((o, ui), gi)| *o += r * (gi * gu - ui / v));
        }
        out
    }
}

impl ScoreFunction for GaussianMixtureScore {
    fn evaluate(&self, x: &[f64], _shape: Shape, t: f64) -> Result<Vec<f64>> {
        Ok(self.state(x, t)?.score)
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        _shape: Shape,
        t: f64,
        dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("direction", x.len(), dir.len())?;
        let st = self.state(x, t)?;
        let tangent = Self::jacobian_apply(&st, dir);
        Ok((st.score, tangent))
    }

    fn vjp(
        &self,
        x: &[f64],
        _shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        check_len("cotangent", x.len(), out_bar.len())?;
        let st = self.state(x, t)?;
        // J is symmetric.
        let mut grad = Self::jacobian_apply(&st, out_bar);
        let Some(c) = tangent_bar else {
            return Ok(grad);
        };
        check_len("direction", x.len(), dir.len())?;
        check_len("tangent cotangent", x.len(), c.len())?;
        let u = dir;
        // q(x) = cᵀ J(x) u, differentiated through responsibilities, component
        // scores and the -s sᵀ term.
        let cu = dot(c, u);
        let su = dot(&st.score, u);
        let cs = dot(c, &st.score);
        for ((r, v), g) in st.resp.iter().zip(&st.var).zip(&st.comp_scores) {
            if *r == 0.0 {
                continue;
            }
            let gu = dot(g, u);
            let cg = dot(c, g);
            let q_k = -cu / v + cg * gu;
            for i in 0..grad.len() {
                grad[i] += r * ((g[i] - st.score[i]) * q_k - gu * c[i] / v - cg * u[i] / v);
            }
        }
        let jc = Self::jacobian_apply(&st, c);
        let ju = Self::jacobian_apply(&st, u);
        for i in 0..grad.len() {
            grad[i] -= su * jc[i] + cs * ju[i];
        }
        Ok(grad)
    }
}

impl AnalyticDensity for GaussianMixtureScore {
    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.state(x, t)?.log_density)
    }
}

/// Affine score `s(x, t) = λ(t)·(A·x + b)` with `λ(t) = 1 / (1 + σ(t)² - σ_min²)`.
///
/// Not a score of any particular density unless `A` is symmetric negative
/// definite; it exists to exercise trace estimators on Jacobians that are not
/// multiples of the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    /// Row-major `d×d`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl AffineScore {
    pub fn new(matrix: Vec<f64>, offset: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        let d = offset.len();
        if d == 0 {
            return Err(Error::invalid("affine score needs a non-empty offset"));
        }
        check_len("matrix", d * d, matrix.len())?;
        Ok(Self {
            matrix,
            offset,
            schedule,
        })
    }

    pub fn scale(&self, t: f64) -> f64 {
        1.0 / (1.0 + self.schedule.added_variance_at(t))
    }

    pub fn matrix_trace(&self) -> f64 {
        let d = self.offset.len();
        (0..d).map(|i| self.matrix[i * d + i]).sum()
    }

    /// `∫₀¹ tr ∇f̃ dt` in closed form. With `dσ/dt = σ·ln(σ_max/σ_min)`,
    /// `-½∫g²λ dt = -½·ln(1 - σ_min² + σ_max²)`.
    pub fn exact_divergence_integral(&self) -> f64 {
        let smin2 = sq(self.schedule.sigma_min());
        let smax2 = sq(self.schedule.sigma_max());
        -0.5 * ln(1.0 - smin2 + smax2) * self.matrix_trace()
    }

    fn matvec(&self, v: &[f64], transpose: bool) -> Vec<f64> {
        let d = self.offset.len();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let a = if transpose {
                            self.matrix[j * d + i]
                        } else {
                            self.matrix[i * d + j]
                        };
                        a * v[j]
                    })
                    .sum()
            })
            .collect()
    }
}

impl ScoreFunction for AffineScore {
    fn evaluate(&self, x: &[f64], _shape: Shape, t: f64) -> Result<Vec<f64>> {
        check_len("input", self.offset.len(), x.len())?;
        let l = self.scale(t);
        Ok(self
            .matvec(x, false)
            .into_iter()
            .zip(&self.offset)
            .map(|(ax, b)| l * (ax + b))
            .collect())
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("direction", x.len(), dir.len())?;
        let l = self.scale(t);
        let s = self.evaluate(x, shape, t)?;
        Ok((s, self.matvec(dir, false).into_iter().map(|v| l * v).collect()))
    }

    fn vjp(
        &self,
        x: &[f64],
        _shape: Shape,
        t: f64,
        _dir: &[f64],
        out_bar: &[f64],
        _tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        check_len("input", self.offset.len(), x.len())?;
        check_len("cotangent", x.len(), out_bar.len())?;
        let l = self.scale(t);
        Ok(self.matvec(out_bar, true).into_iter().map(|v| l * v).collect())
    }
}

/// Score that is identically zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreFunction for ZeroScore {
    fn evaluate(&self, x: &[f64], _shape: Shape, _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        _shape: Shape,
        _t: f64,
        _dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((vec![0.0; x.len()], vec![0.0; x.len()]))
    }

    fn vjp(
        &self,
        x: &[f64],
        _shape: Shape,
        _t: f64,
        _dir: &[f64],
        _out_bar: &[f64],
        _tangent_bar: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

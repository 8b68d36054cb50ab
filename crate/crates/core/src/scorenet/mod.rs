//! Small convolutional score network.
//!
//! Layout: a 3×3 input convolution over two channels (the σ-scaled image and
//! a constant `ln σ(t)` map) followed by SiLU, `layers - 2` residual blocks
//! `h ← h + SiLU(conv(h))`, and a 3×3 output convolution to one channel. The
//! network output `F` is turned into a score by `s = F / σ(t)`.
//!
//! All passes are written by hand: forward, forward-mode tangent (for
//! `J·v`), and a reverse pass over the primal and tangent computations, which
//! gives the gradient of `⟨ā, s⟩ + ⟨ṫ̄, J·v⟩` with respect to the input and,
//! when asked, the parameters.

mod conv;
pub mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{SeededRng, Shape};
use crate::scorefield::{NoiseSchedule, ScoreFunction};
use crate::{Error, Result};

use conv::ConvShape;
use crate::math::{exp, ln, sqrt};

pub use train::{dsm_loss, dsm_loss_value, train, DatasetSource, ImageSource, SigmaLaw, TrainConfig, TrainReport};

/// Network hyper-parameters. Part of the weight manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Architecture {
    /// Number of 3×3 convolutions, including input and output layers (≥ 2).
    pub layers: usize,
    pub channels: usize,
    /// Input scaling `1/sqrt(σ_data² + σ²)`.
    pub sigma_data: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: 6,
            channels: 32,
            sigma_data: 0.5,
        }
    }
}

impl Architecture {
    pub const INPUT_CHANNELS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.channels == 0 {
            return Err(Error::IncompatibleWeights(format!(
                "architecture needs at least 2 layers and 1 channel, got {} layers / {} channels",
                self.layers, self.channels
            )));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        Ok(())
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let c = self.channels;
        let mut shapes = vec![ConvShape {
            cin: Self::INPUT_CHANNELS,
            cout: c,
        }];
        shapes.extend((0..self.layers - 2).map(|_| ConvShape { cin: c, cout: c }));
        shapes.push(ConvShape { cin: c, cout: 1 });
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.conv_shapes().iter().map(ConvShape::param_count).sum()
    }

    /// Side length of the square receptive field in pixels.
    pub fn receptive_field(&self) -> usize {
        2 * self.layers + 1
    }

    /// Canonical description used for the manifest's architecture hash.
    pub fn descriptor(&self) -> String {
        let shapes: Vec<String> = self
            .conv_shapes()
            .iter()
            .map(|s| format!("conv3x3({}->{})", s.cin, s.cout))
            .collect();
        format!(
            "scorenet/v1;silu;residual;input=[x*c_in,ln_sigma];output=F/sigma;sigma_data={:e};layers={};{}",
            self.sigma_data,
            self.layers,
            shapes.join(",")
        )
    }
}

/// Score network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    arch: Architecture,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

/// Saved activations of one forward pass.
struct Tape {
    h: usize,
    w: usize,
    sigma: f64,
    c_in: f64,
    /// Input channels, then post-activation output of every non-final layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of every non-final layer.
    pre: Vec<Vec<f64>>,
    /// Tangents matching `acts` and `pre`, when a direction was given.
    acts_dot: Option<Vec<Vec<f64>>>,
    pre_dot: Option<Vec<Vec<f64>>>,
    out: Vec<f64>,
    out_dot: Option<Vec<f64>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + exp(-z))
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_d1(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[inline]
fn silu_d2(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}

impl ScoreNet {
    /// Freshly initialized network (scaled normal weights, zero biases).
    pub fn new(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.conv_shapes();
        let mut params = Vec::with_capacity(arch.param_count());
        let last = shapes.len() - 1;
        for (l, s) in shapes.iter().enumerate() {
            let fan_in = (s.cin * 9) as f64;
            let gain = match l {
                0 => 1.0,
                l if l == last => 0.1,
                _ => 0.5,
            };
            let scale = gain * sqrt(2.0 / fan_in);
            let draws = SeededRng::new(seed, l as u64).normal(s.weight_count());
            params.extend(draws.iter().map(|v| ((v * scale) as f32) as f64));
            params.extend(core::iter::repeat_n(0.0, s.cout));
        }
        Ok(Self {
            arch,
            schedule,
            params,
        })
    }

    pub fn from_params(arch: Architecture, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::IncompatibleWeights(format!(
                "architecture expects {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::IncompatibleWeights("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            schedule,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check(&self, x: &[f64], shape: Shape) -> Result<()> {
        if x.len() != shape.len() || shape.is_empty() {
            return Err(Error::shape(format!("{shape} field"), x.len()));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], shape: Shape, t: f64, dir: Option<&[f64]>) -> Tape {
        let (h, w) = (shape.height, shape.width);
        let n = h * w;
        let sigma = self.schedule.sigma_at(t);
        let c_in = 1.0 / sqrt(self.arch.sigma_data * self.arch.sigma_data + sigma * sigma);
        let mut input = Vec::with_capacity(2 * n);
        input.extend(x.iter().map(|v| v * c_in));
        input.extend(core::iter::repeat_n(ln(sigma), n));
        let mut acts = vec![input];
        let mut pre = Vec::new();
        let mut acts_dot = dir.map(|d| {
            let mut v = Vec::with_capacity(2 * n);
            v.extend(d.iter().map(|e| e * c_in));
            v.extend(core::iter::repeat_n(0.0, n));
            vec![v]
        });
        let mut pre_dot = dir.map(|_| Vec::new());

        let shapes = self.arch.conv_shapes();
        let last = shapes.len() - 1;
        let mut offset = 0;
        let mut out = Vec::new();
        let mut out_dot = None;
        for (l, s) in shapes.iter().enumerate() {
            let p = &self.params[offset..offset + s.param_count()];
            offset += s.param_count();
            let mut z = vec![0.0; s.cout * n];
            s.forward(p, &acts[l], h, w, true, &mut z);
            let z_dot = acts_dot.as_ref().map(|ad| {
                let mut zd = vec![0.0; s.cout * n];
                s.forward(p, &ad[l], h, w, false, &mut zd);
                zd
            });
            if l == last {
                out = z;
                out_dot = z_dot;
                break;
            }
            let residual = l > 0;
            let a: Vec<f64> = if residual {
                acts[l].iter().zip(&z).map(|(hp, zi)| hp + silu(*zi)).collect()
            } else {
                z.iter().map(|zi| silu(*zi)).collect()
            };
            if let (Some(ad), Some(zd)) = (acts_dot.as_mut(), z_dot.as_ref()) {
                let prev = &ad[l];
                let a_dot: Vec<f64> = z
                    .iter()
                    .zip(zd)
                    .enumerate()
                    .map(|(i, (zi, zdi))| {
                        let base = if residual { prev[i] } else { 0.0 };
                        base + silu_d1(*zi) * zdi
                    })
                    .collect();
                ad.push(a_dot);
            }
            if let (Some(pd), Some(zd)) = (pre_dot.as_mut(), z_dot) {
                pd.push(zd);
            }
            acts.push(a);
            pre.push(z);
        }
        Tape {
            h,
            w,
            sigma,
            c_in,
            acts,
            pre,
            acts_dot,
            pre_dot,
            out,
            out_dot,
        }
    }

    /// Reverse pass. Returns the input gradient; accumulates parameter
    /// gradients into `grad_params` when given.
    fn backward(
        &self,
        tape: &Tape,
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (h, w) = (tape.h, tape.w);
        let n = h * w;
        let shapes = self.arch.conv_shapes();
        let last = shapes.len() - 1;
        let tangent_bar = tangent_bar.filter(|_| tape.acts_dot.is_some());

        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for s in &shapes {
            offsets.push(acc);
            acc += s.param_count();
        }

        // Cotangents of the current layer's conv output and of its tangent.
        let mut z_bar: Vec<f64> = out_bar.iter().map(|v| v / tape.sigma).collect();
        let mut z_dot_bar: Option<Vec<f64>> =
            tangent_bar.map(|tb| tb.iter().map(|v| v / tape.sigma).collect());
        // Residual contribution to the cotangent of the current layer's input.
        let mut skip = vec![0.0; shapes[last].cin * n];
        let mut skip_dot = z_dot_bar.as_ref().map(|_| skip.clone());

        for l in (0..=last).rev() {
            let s = shapes[l];
            let p = &self.params[offsets[l]..offsets[l] + s.param_count()];
            if let Some(gp) = grad_params.as_deref_mut() {
                let g = &mut gp[offsets[l]..offsets[l] + s.param_count()];
                s.backward_params(&z_bar, &tape.acts[l], h, w, true, g);
                if let (Some(zdb), Some(ad)) = (z_dot_bar.as_ref(), tape.acts_dot.as_ref()) {
                    s.backward_params(zdb, &ad[l], h, w, false, g);
                }
            }
            let mut a_bar = skip;
            s.backward_input(p, &z_bar, h, w, &mut a_bar);
            let a_dot_bar = skip_dot.map(|mut v| {
                if let Some(zdb) = z_dot_bar.as_ref() {
                    s.backward_input(p, zdb, h, w, &mut v);
                }
                v
            });
            if l == 0 {
                return a_bar[..n].iter().map(|v| v * tape.c_in).collect();
            }
            // acts[l] = SiLU(pre[l-1]) (+ acts[l-1] when layer l-1 is residual)
            let z = &tape.pre[l - 1];
            let mut next_z_bar = vec![0.0; z.len()];
            let mut next_z_dot_bar = a_dot_bar.as_ref().map(|_| vec![0.0; z.len()]);
            for i in 0..z.len() {
                let d1 = silu_d1(z[i]);
                let mut zb = d1 * a_bar[i];
                if let (Some(adb), Some(pd), Some(nzdb)) =
                    (a_dot_bar.as_ref(), tape.pre_dot.as_ref(), next_z_dot_bar.as_mut())
                {
                    zb += silu_d2(z[i]) * pd[l - 1][i] * adb[i];
                    nzdb[i] = d1 * adb[i];
                }
                next_z_bar[i] = zb;
            }
            if l - 1 > 0 {
                skip = a_bar;
                skip_dot = a_dot_bar;
            } else {
                skip = vec![0.0; shapes[0].cin * n];
                skip_dot = a_dot_bar.map(|_| vec![0.0; shapes[0].cin * n]);
            }
            z_bar = next_z_bar;
            z_dot_bar = next_z_dot_bar;
        }
        unreachable!("layer 0 returns")
    }

    /// Gradient of `⟨out_bar, s(x, t)⟩` with respect to the parameters
    /// (accumulated into `grad_params`), returning `s(x, t)`.
    pub(crate) fn accumulate_param_grad(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        out_bar_fn: impl FnOnce(&[f64]) -> Vec<f64>,
        grad_params: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check(x, shape)?;
        let tape = self.forward(x, shape, t, None);
        let s: Vec<f64> = tape.out.iter().map(|v| v / tape.sigma).collect();
        let out_bar = out_bar_fn(&s);
        self.backward(&tape, &out_bar, None, Some(grad_params));
        Ok(s)
    }
}

impl ScoreFunction for ScoreNet {
    fn evaluate(&self, x: &[f64], shape: Shape, t: f64) -> Result<Vec<f64>> {
        self.check(x, shape)?;
        let tape = self.forward(x, shape, t, None);
        Ok(tape.out.iter().map(|v| v / tape.sigma).collect())
    }

    fn evaluate_jvp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(x, shape)?;
        self.check(dir, shape)?;
        let tape = self.forward(x, shape, t, Some(dir));
        let s = tape.out.iter().map(|v| v / tape.sigma).collect();
        let sd = tape
            .out_dot
            .as_ref()
            .map(|o| o.iter().map(|v| v / tape.sigma).collect())
            .unwrap_or_default();
        Ok((s, sd))
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
        Ok(self.evaluate_with_vjp(x, shape, t, dir, out_bar, tangent_bar)?.1)
    }

    fn evaluate_with_vjp(
        &self,
        x: &[f64],
        shape: Shape,
        t: f64,
        dir: &[f64],
        out_bar: &[f64],
        tangent_bar: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(x, shape)?;
        self.check(out_bar, shape)?;
        if let Some(tb) = tangent_bar {
            self.check(dir, shape)?;
            self.check(tb, shape)?;
        }
        let tape = self.forward(x, shape, t, tangent_bar.map(|_| dir));
        let s = tape.out.iter().map(|v| v / tape.sigma).collect();
        let g = self.backward(&tape, out_bar, tangent_bar, None);
        Ok((s, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::dot;

    fn small_net(seed: u64) -> ScoreNet {
        let arch = Architecture {
            layers: 4,
            channels: 3,
            sigma_data: 0.5,
        };
        let mut net = ScoreNet::new(arch, NoiseSchedule::new(0.01, 50.0).unwrap(), seed).unwrap();
        // perturb biases so every code path is exercised with non-trivial values
        let noise = SeededRng::new(seed, 99).normal(net.params.len());
        for (p, n) in net.params.iter_mut().zip(noise) {
            *p += 0.05 * n;
        }
        net
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut p = x.to_vec();
        p[i] += h;
        let a = f(&p);
        p[i] -= 2.0 * h;
        let b = f(&p);
        (a - b) / (2.0 * h)
    }

    #[test]
    fn jvp_and_second_order_vjp_match_finite_differences() {
        let net = small_net(1);
        let shape = Shape::new(5, 4);
        let d = shape.len();
        let x = SeededRng::new(2, 0).normal(d);
        let u = SeededRng::new(3, 0).normal(d);
        let a = SeededRng::new(4, 0).normal(d);
        let c = SeededRng::new(5, 0).normal(d);
        for t in [0.05, 0.4, 0.9] {
            let (_, ju) = net.evaluate_jvp(&x, shape, t, &u).unwrap();
            for i in [0, 7, 19] {
                let col: f64 = (0..d)
                    .map(|j| fd(|y| net.evaluate(y, shape, t).unwrap()[i], &x, j, 1e-5) * u[j])
                    .sum();
                assert!((col - ju[i]).abs() < 1e-6 * ju[i].abs().max(1.0), "{col} vs {}", ju[i]);
            }
            let plain = net.vjp(&x, shape, t, &u, &a, None).unwrap();
            let full = net.vjp(&x, shape, t, &u, &a, Some(&c)).unwrap();
            for i in 0..d {
                let num_plain = fd(|y| dot(&a, &net.evaluate(y, shape, t).unwrap()), &x, i, 1e-5);
                assert!((num_plain - plain[i]).abs() < 1e-6 * plain[i].abs().max(1.0));
                let phi = |y: &[f64]| {
                    let (s, ju) = net.evaluate_jvp(y, shape, t, &u).unwrap();
                    dot(&a, &s) + dot(&c, &ju)
                };
                let num = fd(phi, &x, i, 1e-5);
                assert!((num - full[i]).abs() < 1e-5 * full[i].abs().max(1.0), "{num} vs {}", full[i]);
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = small_net(7);
        let shape = Shape::new(4, 4);
        let x = SeededRng::new(8, 0).normal(16);
        let a = SeededRng::new(9, 0).normal(16);
        let t = 0.3;
        let mut gp = vec![0.0; net.params.len()];
        net.accumulate_param_grad(&x, shape, t, |_| a.clone(), &mut gp).unwrap();
        let idx = SeededRng::new(10, 0).uniform(10);
        for r in idx {
            let k = (r * net.params.len() as f64) as usize;
            let f = |p: &[f64]| {
                let n = ScoreNet::from_params(net.arch, net.schedule, p.to_vec()).unwrap();
                dot(&a, &n.evaluate(&x, shape, t).unwrap())
            };
            let num = fd(f, &net.params, k, 1e-5);
            assert!((num - gp[k]).abs() <= 1e-4 * num.abs().max(1e-3), "param {k}: {num} vs {}", gp[k]);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = small_net(3);
        let shape = Shape::new(6, 3);
        let x = SeededRng::new(1, 1).normal(18);
        let a = net.evaluate(&x, shape, 0.5).unwrap();
        let b = net.evaluate(&x, shape, 0.5).unwrap();
        assert_eq!(a.len(), 18);
        assert_eq!(a, b);
        assert!(net.evaluate(&x, Shape::new(5, 3), 0.5).is_err());
    }

    #[test]
    fn empirical_lipschitz_bound_is_finite() {
        let net = small_net(4);
        let shape = Shape::new(6, 6);
        let x = SeededRng::new(2, 2).normal(36);
        let s0 = net.evaluate(&x, shape, 0.5).unwrap();
        for k in 0..5 {
            let delta: Vec<f64> = SeededRng::new(3, k).normal(36).iter().map(|v| v * 1e-3).collect();
            let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let s1 = net.evaluate(&xp, shape, 0.5).unwrap();
            let num: f64 = s0.iter().zip(&s1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den = dot(&delta, &delta).sqrt();
            assert!((num / den).is_finite());
        }
    }

    #[test]
    fn rejects_wrong_parameter_count() {
        let arch = Architecture::default();
        let sched = NoiseSchedule::new(0.01, 50.0).unwrap();
        assert!(matches!(
            ScoreNet::from_params(arch, sched, vec![0.0; 3]),
            Err(Error::IncompatibleWeights(_))
        ));
        assert_eq!(arch.receptive_field(), 13);
    }
}

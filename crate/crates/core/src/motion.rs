//! Spline parameterization of per-view rigid motion.
//!
//! Each of `tx` (mm), `ty` (mm) and `r` (degrees) is a cubic Catmull-Rom
//! spline through `nodes` values at uniformly spaced positions over the view
//! range `[0, n_views - 1]`, with the end nodes replicated. The packed
//! parameter vector is `[tx nodes…, ty nodes…, r nodes…]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::ctrecon::RigidParams;
use crate::grid::SeededRng;
use crate::{Error, Result};
use crate::math::{floor, sqrt};

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpline {
    n_views: usize,
    /// `[tx, ty, r]` node values; `r` in degrees.
    values: [Vec<f64>; 3],
}

/// Up to four `(node, weight)` pairs; repeated nodes are merged.
pub type NodeWeights = ([usize; 4], [f64; 4], usize);

impl MotionSpline {
    pub fn zeros(nodes: usize, n_views: usize) -> Result<Self> {
        Self::new(n_views, [vec![0.0; nodes], vec![0.0; nodes], vec![0.0; nodes]])
    }

    pub fn new(n_views: usize, values: [Vec<f64>; 3]) -> Result<Self> {
        let nodes = values[0].len();
        if nodes == 0 || n_views == 0 {
            return Err(Error::invalid("a motion spline needs at least one node and one view"));
        }
        if values.iter().any(|v| v.len() != nodes) {
            return Err(Error::invalid("tx, ty and r need the same node count"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("node values must be finite"));
        }
        Ok(Self { n_views, values })
    }

    /// Spline from a packed vector `γ = [tx…, ty…, r…]`.
    pub fn unpack(nodes: usize, n_views: usize, gamma: &[f64]) -> Result<Self> {
        if nodes == 0 || gamma.len() != 3 * nodes {
            return Err(Error::shape(format!("{} parameters (3 x {nodes} nodes)", 3 * nodes), gamma.len()));
        }
        Self::new(
            n_views,
            [
                gamma[..nodes].to_vec(),
                gamma[nodes..2 * nodes].to_vec(),
                gamma[2 * nodes..].to_vec(),
            ],
        )
    }

    pub fn pack(&self) -> Vec<f64> {
        self.values.concat()
    }

    pub fn nodes(&self) -> usize {
        self.values[0].len()
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    /// Node values `[tx, ty, r]`, `r` in degrees.
    pub fn values(&self) -> &[Vec<f64>; 3] {
        &self.values
    }

    /// Position of node `k` on the view axis.
    pub fn node_time(&self, k: usize) -> f64 {
        let n = self.nodes();
        if n == 1 {
            0.0
        } else {
            k as f64 * (self.n_views as f64 - 1.0) / (n as f64 - 1.0)
        }
    }

    /// Interpolation weights of the nodes contributing at `view`.
    pub fn weights(&self, view: usize) -> Result<NodeWeights> {
        if view >= self.n_views {
            return Err(Error::invalid(format!("view {view} outside [0, {})", self.n_views)));
        }
        Ok(self.weights_at(view as f64))
    }

    fn weights_at(&self, time: f64) -> NodeWeights {
        let n = self.nodes();
        if n == 1 || self.n_views == 1 {
            return ([0; 4], [1.0, 0.0, 0.0, 0.0], 1);
        }
        let x = time * (n as f64 - 1.0) / (self.n_views as f64 - 1.0);
        let i = (floor(x) as usize).min(n - 2);
        let f = x - i as f64;
        let (f2, f3) = (f * f, f * f * f);
        let w = [
            0.5 * (-f3 + 2.0 * f2 - f),
            0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
            0.5 * (-3.0 * f3 + 4.0 * f2 + f),
            0.5 * (f3 - f2),
        ];
        let idx = [i.saturating_sub(1), i, i + 1, (i + 2).min(n - 1)];
        let mut out_idx = [0usize; 4];
        let mut out_w = [0.0; 4];
        let mut len = 0;
        for (k, wk) in idx.iter().zip(w) {
            match out_idx[..len].iter().position(|j| j == k) {
                Some(p) => out_w[p] += wk,
                None => {
                    out_idx[len] = *k;
                    out_w[len] = wk;
                    len += 1;
                }
            }
        }
        (out_idx, out_w, len)
    }

    /// Motion at one view, rotation converted to radians.
    pub fn evaluate(&self, view: usize) -> Result<RigidParams> {
        let (idx, w, len) = self.weights(view)?;
        let mut p = [0.0; 3];
        for (k, v) in self.values.iter().enumerate() {
            p[k] = (0..len).map(|j| w[j] * v[idx[j]]).sum();
        }
        Ok(RigidParams::new(p[0], p[1], p[2].to_radians()))
    }

    /// Motion at every view.
    pub fn per_view(&self) -> Vec<RigidParams> {
        (0..self.n_views)
            .map(|v| self.evaluate(v).expect("view in range"))
            .collect()
    }

    /// Maps per-view gradients `[d/dtx, d/dty, d/dr (radians)]` onto the
    /// packed node vector.
    pub fn chain_rule(&self, per_view: &[[f64; 3]]) -> Result<Vec<f64>> {
        if per_view.len() != self.n_views {
            return Err(Error::shape(format!("{} views", self.n_views), per_view.len()));
        }
        let n = self.nodes();
        let mut out = vec![0.0; 3 * n];
        let deg = core::f64::consts::PI / 180.0;
        for (view, g) in per_view.iter().enumerate() {
            let (idx, w, len) = self.weights_at(view as f64);
            for j in 0..len {
                out[idx[j]] += w[j] * g[0];
                out[n + idx[j]] += w[j] * g[1];
                out[2 * n + idx[j]] += w[j] * g[2] * deg;
            }
        }
        Ok(out)
    }

    /// Largest absolute value over all views, `[tx, ty, r (degrees)]`.
    pub fn max_abs(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for p in self.per_view() {
            m[0] = m[0].max(p.tx.abs());
            m[1] = m[1].max(p.ty.abs());
            m[2] = m[2].max(p.r.to_degrees().abs());
        }
        m
    }

    /// Least-squares fit of a `nodes`-node spline to this spline's per-view
    /// values.
    pub fn resample(&self, nodes: usize) -> Result<MotionSpline> {
        let target = self.per_view();
        let mut out = MotionSpline::zeros(nodes, self.n_views)?;
        let mut gram = vec![0.0; nodes * nodes];
        let mut rhs = [vec![0.0; nodes], vec![0.0; nodes], vec![0.0; nodes]];
        for (view, p) in target.iter().enumerate() {
            let (idx, w, len) = out.weights_at(view as f64);
            let vals = [p.tx, p.ty, p.r.to_degrees()];
            for a in 0..len {
                for b in 0..len {
                    gram[idx[a] * nodes + idx[b]] += w[a] * w[b];
                }
                for k in 0..3 {
                    rhs[k][idx[a]] += w[a] * vals[k];
                }
            }
        }
        let chol = cholesky(&gram, nodes)
            .ok_or_else(|| Error::invalid(format!("{nodes} nodes are not resolvable on {} views", self.n_views)))?;
        for k in 0..3 {
            out.values[k] = cholesky_solve(&chol, nodes, &rhs[k]);
        }
        Ok(out)
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 1e-12 {
                    return None;
                }
                l[i * n + i] = sqrt(d);
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Ground-truth motion pattern generator.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PerturbationSpec {
    pub nodes: usize,
    pub amplitude_t: f64,
    /// Degrees.
    pub amplitude_r: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            nodes: 10,
            amplitude_t: 5.0,
            amplitude_r: 5.0,
            seed: 0,
        }
    }
}

/// Node values drawn uniformly in `[-amplitude, amplitude]`, one random
/// stream per parameter.
pub fn random_perturbation(spec: &PerturbationSpec, n_views: usize) -> Result<MotionSpline> {
    if !(spec.amplitude_t >= 0.0 && spec.amplitude_r >= 0.0) {
        return Err(Error::invalid("perturbation amplitudes must be non-negative"));
    }
    let amps = [spec.amplitude_t, spec.amplitude_t, spec.amplitude_r];
    let values = core::array::from_fn(|k| {
        let mut rng = SeededRng::new(spec.seed, k as u64).generator();
        (0..spec.nodes)
            .map(|_| {
                let u: f64 = rng.random();
                // `+ 0.0` turns the -0.0 of a zero amplitude into +0.0
                amps[k] * (2.0 * u - 1.0) + 0.0
            })
            .collect()
    });
    MotionSpline::new(n_views, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_and_constant_splines() {
        let z = MotionSpline::zeros(30, 360).unwrap();
        assert!(z.per_view().iter().all(|p| *p == RigidParams::default()));
        let c = MotionSpline::new(360, [vec![2.0; 7], vec![-1.0; 7], vec![3.0; 7]]).unwrap();
        for v in [0, 17, 200, 359] {
            let p = c.evaluate(v).unwrap();
            assert!((p.tx - 2.0).abs() < 1e-12 && (p.ty + 1.0).abs() < 1e-12);
            assert!((p.r - 3.0f64.to_radians()).abs() < 1e-12);
        }
        assert!(c.evaluate(360).is_err());
    }

    #[test]
    fn interpolates_nodes() {
        // 31 views, 4 nodes → nodes at views 0, 10, 20, 30
        let s = MotionSpline::new(31, [vec![1.0, -2.0, 4.0, 0.5], vec![0.0; 4], vec![0.0; 4]]).unwrap();
        for (k, view) in [0usize, 10, 20, 30].into_iter().enumerate() {
            assert!((s.evaluate(view).unwrap().tx - s.values()[0][k]).abs() < 1e-12);
            assert_eq!(s.node_time(k), view as f64);
        }
    }

    #[test]
    fn pack_roundtrip_and_length_check() {
        let g: Vec<f64> = (0..90).map(|i| i as f64 * 0.1).collect();
        let s = MotionSpline::unpack(30, 360, &g).unwrap();
        assert_eq!(s.pack(), g);
        assert!(MotionSpline::unpack(30, 360, &g[..89]).is_err());
        assert_eq!(MotionSpline::unpack(30, 360, &[0.0; 90]).unwrap(), MotionSpline::zeros(30, 360).unwrap());
    }

    #[test]
    fn chain_rule_weights_equal_finite_differences() {
        let s = MotionSpline::unpack(30, 360, &SeededRng::new(1, 0).normal(90)).unwrap();
        let g: Vec<[f64; 3]> = SeededRng::new(2, 0).normal(3 * 360).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let dg = s.chain_rule(&g).unwrap();
        let f = |gamma: &[f64]| -> f64 {
            let sp = MotionSpline::unpack(30, 360, gamma).unwrap();
            sp.per_view().iter().zip(&g).map(|(p, w)| p.tx * w[0] + p.ty * w[1] + p.r * w[2]).sum()
        };
        let gamma = s.pack();
        for k in [0, 5, 29, 30, 47, 60, 75, 89] {
            let mut a = gamma.clone();
            let mut b = gamma.clone();
            a[k] += 1.0;
            b[k] -= 1.0;
            // linear in γ: the unit central difference is exact up to rounding
            let num = (f(&a) - f(&b)) / 2.0;
            assert!((num - dg[k]).abs() < 1e-10 * (1.0 + num.abs()), "{k}: {num} vs {}", dg[k]);
        }
    }

    #[test]
    fn perturbation_is_deterministic_and_bounded() {
        let spec = PerturbationSpec { seed: 4, ..PerturbationSpec::default() };
        let a = random_perturbation(&spec, 360).unwrap();
        assert_eq!(a, random_perturbation(&spec, 360).unwrap());
        assert_eq!(a.nodes(), 10);
        assert!(a.values().iter().flatten().all(|v| v.abs() <= 5.0));
        let zero = random_perturbation(&PerturbationSpec { amplitude_t: 0.0, amplitude_r: 0.0, ..spec }, 360).unwrap();
        assert_eq!(zero, MotionSpline::zeros(10, 360).unwrap());
        assert!(zero.values().iter().flatten().all(|v| v.is_sign_positive()));
    }

    #[test]
    fn overshoot_stays_below_bound() {
        let mut worst = 0.0f64;
        for seed in 0..1000 {
            let s = random_perturbation(&PerturbationSpec { seed, ..PerturbationSpec::default() }, 360).unwrap();
            worst = worst.max(s.max_abs()[0]);
        }
        assert!(worst <= 1.2 * 5.0, "{worst}");
    }

    #[test]
    fn ten_node_patterns_resample_onto_thirty_nodes() {
        for seed in 0..20 {
            let s = random_perturbation(&PerturbationSpec { seed, ..PerturbationSpec::default() }, 360).unwrap();
            let fine = s.resample(30).unwrap();
            let worst = s
                .per_view()
                .iter()
                .zip(fine.per_view())
                .map(|(a, b)| (a.tx - b.tx).abs().max((a.ty - b.ty).abs()).max((a.r - b.r).to_degrees().abs()))
                .fold(0.0, f64::max);
            // 2% of the 5 mm / 5° amplitude
            assert!(worst < 0.1, "seed {seed}: {worst}");
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_linear_in_nodes(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let x = SeededRng::new(seed, 0).normal(30);
            let y = SeededRng::new(seed, 1).normal(30);
            let sx = MotionSpline::unpack(10, 100, &x).unwrap();
            let sy = MotionSpline::unpack(10, 100, &y).unwrap();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
            let sc = MotionSpline::unpack(10, 100, &combo).unwrap();
            for v in 0..100 {
                let (px, py, pc) = (sx.evaluate(v).unwrap(), sy.evaluate(v).unwrap(), sc.evaluate(v).unwrap());
                prop_assert!((pc.tx - (a * px.tx + py.tx)).abs() < 1e-10);
                prop_assert!((pc.r - (a * px.r + py.r)).abs() < 1e-10);
            }
        }
    }
}

//! Image, geometry and motion-parameter error metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::ctrecon::{FanBeamGeometry, RigidParams};
use crate::grid::Image;
use crate::{Error, Result};
use crate::math::{exp, floor, sq, sqrt};

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| sq(x - y)).sum();
    Ok(sqrt(sum / a.len() as f64))
}

/// SSIM window and stabilizing constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean structural similarity over all fully contained Gaussian windows.
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    ssim_with(a, b, data_range, &SsimConfig::default())
}

pub fn ssim_with(a: &Image, b: &Image, data_range: f64, cfg: &SsimConfig) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::invalid("SSIM data range must be positive"));
    }
    let n = cfg.window;
    if n == 0 || a.height() < n || a.width() < n {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than the {n}x{n} SSIM window",
            a.height(),
            a.width()
        )));
    }
    let half = (n as f64 - 1.0) * 0.5;
    let g1: Vec<f64> = (0..n).map(|i| exp(-sq(i as f64 - half) / (2.0 * cfg.sigma * cfg.sigma))).collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let c1 = sq(cfg.k1 * data_range);
    let c2 = sq(cfg.k2 * data_range);
    let (h, w) = (a.height(), a.width());
    let (xa, xb) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - n {
        for c0 in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = g1[i] * g1[j];
                    let idx = (r0 + i) * w + c0 + j;
                    let (p, q) = (xa[idx], xb[idx]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Virtual fiducials at distance `radius` on the coordinate axes.
fn fiducials(radius: f64) -> [[f64; 2]; 4] {
    [[radius, 0.0], [-radius, 0.0], [0.0, radius], [0.0, -radius]]
}

/// Mean absolute detector-coordinate difference (mm) between projecting
/// four fiducials at (±50, 0), (0, ±50) mm under both trajectories.
pub fn reprojection_error(gt: &[RigidParams], est: &[RigidParams], geometry: &FanBeamGeometry) -> Result<f64> {
    reprojection_error_at(gt, est, geometry, 50.0)
}

pub fn reprojection_error_at(
    gt: &[RigidParams],
    est: &[RigidParams],
    geometry: &FanBeamGeometry,
    radius: f64,
) -> Result<f64> {
    geometry.validate()?;
    for m in [gt, est] {
        if m.len() != geometry.n_views {
            return Err(Error::shape(format!("{} views of motion", geometry.n_views), m.len()));
        }
    }
    let mut total = 0.0;
    for view in 0..geometry.n_views {
        for p in fiducials(radius) {
            let a = geometry.project_point(view, gt[view], p);
            let b = geometry.project_point(view, est[view], p);
            match (a, b) {
                (Some(a), Some(b)) => total += (a - b).abs(),
                _ => return Err(Error::invalid("fiducial behind the source")),
            }
        }
    }
    Ok(total / (4 * geometry.n_views) as f64)
}

/// Per-view mean absolute error of `(tx mm, ty mm, r degrees)`.
pub fn motion_mae(gt: &[RigidParams], est: &[RigidParams]) -> Result<[f64; 3]> {
    if gt.len() != est.len() || gt.is_empty() {
        return Err(Error::shape(format!("{} views", gt.len()), est.len()));
    }
    let mut acc = [0.0; 3];
    for (a, b) in gt.iter().zip(est) {
        acc[0] += (a.tx - b.tx).abs();
        acc[1] += (a.ty - b.ty).abs();
        acc[2] += (a.r - b.r).to_degrees().abs();
    }
    let n = gt.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Metrics of one case.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CaseMetrics {
    pub rmse: f64,
    pub ssim: f64,
    pub rpe_mm: f64,
    pub mae_tx_mm: f64,
    pub mae_ty_mm: f64,
    pub mae_r_deg: f64,
}

impl CaseMetrics {
    /// Compares a reconstruction and its trajectory against the ground truth.
    pub fn evaluate(
        truth: &Image,
        recon: &Image,
        data_range: f64,
        gt_motion: &[RigidParams],
        est_motion: &[RigidParams],
        geometry: &FanBeamGeometry,
    ) -> Result<Self> {
        let [mae_tx_mm, mae_ty_mm, mae_r_deg] = motion_mae(gt_motion, est_motion)?;
        Ok(Self {
            rmse: rmse(truth, recon)?,
            ssim: ssim(truth, recon, data_range)?,
            rpe_mm: reprojection_error(gt_motion, est_motion, geometry)?,
            mae_tx_mm,
            mae_ty_mm,
            mae_r_deg,
        })
    }

    fn fields(&self) -> [f64; 6] {
        [self.rmse, self.ssim, self.rpe_mm, self.mae_tx_mm, self.mae_ty_mm, self.mae_r_deg]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self {
            rmse: f[0],
            ssim: f[1],
            rpe_mm: f[2],
            mae_tx_mm: f[3],
            mae_ty_mm: f[4],
            mae_r_deg: f[5],
        }
    }
}

/// Box-plot summary.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear-interpolation quantiles of a non-empty sample.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to summarize"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let i = floor(pos) as usize;
            let f = pos - i as f64;
            if i + 1 < v.len() { v[i] + f * (v[i + 1] - v[i]) } else { v[i] }
        };
        Ok(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Per-case metrics plus their mean and quantiles.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: CaseMetrics,
    pub rmse_quantiles: Quantiles,
    pub ssim_quantiles: Quantiles,
    pub rpe_quantiles: Quantiles,
    pub mae_tx_quantiles: Quantiles,
    pub mae_ty_quantiles: Quantiles,
    pub mae_r_quantiles: Quantiles,
}

impl EvalReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::invalid("report needs at least one case"));
        }
        if cases.iter().any(|c| c.fields().iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("metrics must be finite"));
        }
        let column = |k: usize| -> Vec<f64> { cases.iter().map(|c| c.fields()[k]).collect() };
        let n = cases.len() as f64;
        let mean = CaseMetrics::from_fields(core::array::from_fn(|k| column(k).iter().sum::<f64>() / n));
        Ok(Self {
            mean,
            rmse_quantiles: Quantiles::of(&column(0))?,
            ssim_quantiles: Quantiles::of(&column(1))?,
            rpe_quantiles: Quantiles::of(&column(2))?,
            mae_tx_quantiles: Quantiles::of(&column(3))?,
            mae_ty_quantiles: Quantiles::of(&column(4))?,
            mae_r_quantiles: Quantiles::of(&column(5))?,
            cases,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrecon::{shepp_logan, ViewFrame};
    use crate::grid::{SeededRng, Shape};
    use alloc::vec;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, data: Vec<f64>) -> Image {
        Image::new(h, w, 1.0, data).unwrap()
    }

    #[test]
    fn rmse_basics() {
        let a = img(4, 4, SeededRng::new(1, 0).normal(16));
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = img(4, 4, a.data().iter().map(|v| v + 1.0).collect());
        assert!((rmse(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = img(4, 4, SeededRng::new(2, 0).normal(16));
        let mut brute = 0.0;
        for i in 0..16 {
            brute += (a.data()[i] - c.data()[i]) * (a.data()[i] - c.data()[i]);
        }
        assert!((rmse(&a, &c).unwrap() - (brute / 16.0).sqrt()).abs() < 1e-12);
        assert!(rmse(&a, &img(2, 8, vec![0.0; 16])).is_err());
    }

    #[test]
    fn ssim_identity_inversion_and_constants() {
        let a = shepp_logan(Shape::new(64, 64), 1.0, 2).unwrap();
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let inverted = img(64, 64, a.data().iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&a, &inverted, 1.0).unwrap() < 0.5);
        let (p, q) = (0.3, 0.5);
        let ca = img(16, 16, vec![p; 256]);
        let cb = img(16, 16, vec![q; 256]);
        let c1 = (0.01f64).powi(2);
        let expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&ca, &cb, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!(ssim(&ca, &cb, 0.0).is_err());
    }

    #[test]
    fn zero_motion_rpe_and_mae() {
        let g = FanBeamGeometry::default();
        let m = vec![RigidParams::new(1.0, -2.0, 0.05); g.n_views];
        assert_eq!(reprojection_error(&m, &m, &g).unwrap(), 0.0);
        assert_eq!(reprojection_error_at(&m, &m, &g, 100.0).unwrap(), 0.0);
        assert_eq!(motion_mae(&m, &m).unwrap(), [0.0; 3]);
        let shifted: Vec<RigidParams> = m.iter().map(|p| RigidParams::new(p.tx + 1.0, p.ty, p.r)).collect();
        let mae = motion_mae(&m, &shifted).unwrap();
        assert!((mae[0] - 1.0).abs() < 1e-12 && mae[1] == 0.0 && mae[2] == 0.0);
    }

    #[test]
    fn rpe_grows_with_detector_parallel_shift() {
        let g = FanBeamGeometry { n_views: 36, ..FanBeamGeometry::default() };
        let gt = vec![RigidParams::default(); g.n_views];
        let mut last = 0.0;
        for delta in [0.5, 1.0, 2.0, 4.0] {
            // shift every view along its own detector axis
            let est: Vec<RigidParams> = (0..g.n_views)
                .map(|v| {
                    let f = ViewFrame::new(&g, v, RigidParams::default());
                    RigidParams::new(delta * f.e[0], delta * f.e[1], 0.0)
                })
                .collect();
            let rpe = reprojection_error(&gt, &est, &g).unwrap();
            assert!(rpe > last, "{rpe} after {last}");
            last = rpe;
        }
    }

    #[test]
    fn report_aggregates() {
        let case = |x: f64| CaseMetrics { rmse: x, ssim: 1.0 - x, rpe_mm: 2.0 * x, mae_tx_mm: x, mae_ty_mm: x, mae_r_deg: x };
        let r = EvalReport::new(vec![case(0.1), case(0.2), case(0.3), case(0.4)]).unwrap();
        assert!((r.mean.rmse - 0.25).abs() < 1e-12);
        assert!((r.rmse_quantiles.median - 0.25).abs() < 1e-12);
        assert!((r.rmse_quantiles.q1 - 0.175).abs() < 1e-12);
        assert_eq!(r.ssim_quantiles.max, 0.9);
        assert!(EvalReport::new(vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_are_symmetric(seed in 0u64..10_000) {
            let a = img(16, 16, SeededRng::new(seed, 0).uniform(256));
            let b = img(16, 16, SeededRng::new(seed, 1).uniform(256));
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }
}

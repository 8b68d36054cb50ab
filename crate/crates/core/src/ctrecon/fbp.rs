//! Fan-beam filtered backprojection and its derivative with respect to the
//! per-view rigid motion.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::projector::Lattice;
use super::{check_motion, view_motion, FanBeamGeometry, RigidParams, Sinogram, ViewFrame};
use crate::fft::{fft_in_place, Complex};
use crate::grid::{Image, Shape};
use crate::{Error, Result};
use crate::math::{cos, floor, sq, sqrt};

/// Hann-apodized Ram-Lak filter in the isocenter detector coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RampFilter {
    bins: usize,
    /// Real frequency response including the integration step.
    response: Vec<f64>,
}

impl RampFilter {
    pub fn new(geometry: &FanBeamGeometry) -> Result<Self> {
        geometry.validate()?;
        let bins = geometry.detector_bins;
        let pad = (2 * bins).next_power_of_two();
        let ds = geometry.iso_bin_spacing();
        let mut kernel: Vec<Complex> = (0..pad)
            .map(|n| {
                let m = if n <= pad / 2 { n as isize } else { n as isize - pad as isize };
                let v = if m == 0 {
                    1.0 / (4.0 * ds * ds)
                } else if m % 2 != 0 {
                    -1.0 / sq(PI * m as f64 * ds)
                } else {
                    0.0
                };
                Complex::new(v, 0.0)
            })
            .collect();
        fft_in_place(&mut kernel, false);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let f = k.min(pad - k) as f64 / (pad / 2) as f64;
                let hann = 0.5 * (1.0 + cos(PI * f));
                c.re * hann * ds
            })
            .collect();
        Ok(Self { bins, response })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::default(); self.response.len()];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        fft_in_place(&mut buf, false);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            b.re *= h;
            b.im *= h;
        }
        fft_in_place(&mut buf, true);
        buf[..self.bins].iter().map(|c| c.re).collect()
    }
}

/// Cosine-weighted, ramp-filtered projections. Filtering does not depend on
/// motion, so one filtered sinogram serves every reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSinogram {
    geometry: FanBeamGeometry,
    data: Vec<f64>,
}

impl FilteredSinogram {
    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn row(&self, view: usize) -> &[f64] {
        let b = self.geometry.detector_bins;
        &self.data[view * b..(view + 1) * b]
    }
}

pub fn filter_sinogram(sinogram: &Sinogram) -> Result<FilteredSinogram> {
    let geometry = *sinogram.geometry();
    let filter = RampFilter::new(&geometry)?;
    let d = geometry.source_detector_mm;
    let weights: Vec<f64> = (0..geometry.detector_bins)
        .map(|k| {
            let u = geometry.bin_center(k);
            d / sqrt(d * d + u * u)
        })
        .collect();
    let mut data = Vec::with_capacity(sinogram.data().len());
    for view in 0..geometry.n_views {
        let row: Vec<f64> = sinogram.row(view).iter().zip(&weights).map(|(p, w)| p * w).collect();
        data.extend(filter.apply(&row));
    }
    Ok(FilteredSinogram { geometry, data })
}

/// Linear interpolation at fractional bin `pos`, zero outside the detector.
/// Returns the value and its derivative with respect to `pos`.
#[inline]
fn sample(row: &[f64], pos: f64) -> (f64, f64) {
    let last = (row.len() - 1) as f64;
    if !(pos >= 0.0 && pos <= last) {
        return (0.0, 0.0);
    }
    if row.len() == 1 {
        return (row[0], 0.0);
    }
    let i = (floor(pos) as usize).min(row.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (row[i], row[i + 1]);
    (a + f * (b - a), b - a)
}

/// Per-view backprojection constants.
struct BackprojView {
    frame: ViewFrame,
    r: f64,
    inv_ds: f64,
    center: f64,
}

impl BackprojView {
    fn new(geometry: &FanBeamGeometry, view: usize, m: RigidParams) -> Self {
        Self {
            frame: ViewFrame::new(geometry, view, m),
            r: geometry.source_isocenter_mm,
            inv_ds: 1.0 / geometry.iso_bin_spacing(),
            center: (geometry.detector_bins as f64 - 1.0) * 0.5,
        }
    }
}

/// Distance-weighted pixel-driven backprojection along the (possibly
/// motion-perturbed) trajectory.
pub fn backproject(
    filtered: &FilteredSinogram,
    motion: Option<&[RigidParams]>,
    shape: Shape,
    spacing: f64,
) -> Result<Image> {
    let geometry = filtered.geometry();
    check_motion(geometry, motion)?;
    let mut out = Image::zeros(shape.height, shape.width, spacing)?.into_data();
    let lat = Lattice::new(shape, spacing);
    for view in 0..geometry.n_views {
        let bv = BackprojView::new(geometry, view, view_motion(motion, view));
        let row = filtered.row(view);
        for (idx, o) in out.iter_mut().enumerate() {
            let p = lat.center(idx / lat.w, idx % lat.w);
            let q = if motion.is_some() { bv.frame.to_nominal(p) } else { p };
            let (a, b) = bv.frame.coords(q);
            let inv_u = 1.0 / (bv.r - b);
            let pos = bv.r * a * inv_u * bv.inv_ds + bv.center;
            let w = bv.r * bv.r * inv_u * inv_u;
            *o += w * sample(row, pos).0;
        }
    }
    let scale = PI / geometry.n_views as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Image::new(shape.height, shape.width, spacing, out)
}

/// Fan-beam FBP: cosine weighting, ramp filtering, backprojection over the
/// full circle with redundancy weight ½.
pub fn fbp_reconstruct(
    sinogram: &Sinogram,
    motion: Option<&[RigidParams]>,
    shape: Shape,
    spacing: f64,
) -> Result<Image> {
    check_motion(sinogram.geometry(), motion)?;
    backproject(&filter_sinogram(sinogram)?, motion, shape, spacing)
}

/// Gradient of `⟨upstream, backproject(filtered, motion)⟩` with respect to
/// each view's `(tx, ty, r)`, `r` in radians.
pub fn recon_vjp(
    filtered: &FilteredSinogram,
    motion: Option<&[RigidParams]>,
    upstream: &Image,
) -> Result<Vec<[f64; 3]>> {
    let geometry = filtered.geometry();
    check_motion(geometry, motion)?;
    if upstream.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("upstream gradient is not finite"));
    }
    let lat = Lattice::of(upstream);
    let scale = PI / geometry.n_views as f64;
    let mut grads = Vec::with_capacity(geometry.n_views);
    for view in 0..geometry.n_views {
        let bv = BackprojView::new(geometry, view, view_motion(motion, view));
        let f = &bv.frame;
        let row = filtered.row(view);
        let r = bv.r;
        let mut g = [0.0f64; 3];
        for (idx, &wu) in upstream.data().iter().enumerate() {
            if wu == 0.0 {
                continue;
            }
            let p = lat.center(idx / lat.w, idx % lat.w);
            let q = f.to_nominal(p);
            let (a, b) = f.coords(q);
            let inv_u = 1.0 / (r - b);
            let pos = r * a * inv_u * bv.inv_ds + bv.center;
            let (val, slope) = sample(row, pos);
            if val == 0.0 && slope == 0.0 {
                continue;
            }
            let w = r * r * inv_u * inv_u;
            let dval_ds = slope * bv.inv_ds;
            // d(w·val)/dq along s and e
            let cs = val * 2.0 * w * inv_u + w * dval_ds * r * a * inv_u * inv_u;
            let ce = w * dval_ds * r * inv_u;
            let gq = [
                wu * (cs * f.s[0] + ce * f.e[0]),
                wu * (cs * f.s[1] + ce * f.e[1]),
            ];
            // q = Rot(-r)(p - t): dq/dt = -Rot(-r), dq/dr = -J q
            g[0] -= f.cos_r * gq[0] - f.sin_r * gq[1];
            g[1] -= f.sin_r * gq[0] + f.cos_r * gq[1];
            g[2] += gq[0] * q[1] - gq[1] * q[0];
        }
        grads.push(g.map(|v| v * scale));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrecon::forward_project;
    use crate::grid::{dot, SeededRng};

    fn geometry() -> FanBeamGeometry {
        FanBeamGeometry {
            n_views: 90,
            detector_bins: 128,
            bin_spacing_mm: 2.5,
            ..FanBeamGeometry::default()
        }
    }

    fn blob_image(n: usize, sp: f64, seed: u64) -> Image {
        let c = SeededRng::new(seed, 0).uniform(6);
        let lat = Lattice::new(Shape::new(n, n), sp);
        let ext = n as f64 * sp * 0.25;
        let data = (0..n * n)
            .map(|i| {
                let p = lat.center(i / n, i % n);
                let mut v = 0.0;
                for k in 0..2 {
                    let cx = (c[3 * k] - 0.5) * ext;
                    let cy = (c[3 * k + 1] - 0.5) * ext;
                    let r2 = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)) / (ext * ext * (0.2 + c[3 * k + 2]));
                    v += (-r2 * 4.0).exp();
                }
                v
            })
            .collect();
        Image::new(n, n, sp, data).unwrap()
    }

    #[test]
    fn filter_response_is_an_apodized_ramp() {
        let g = geometry();
        let f = RampFilter::new(&g).unwrap();
        let pad = f.response.len();
        assert_eq!(pad, 256);
        // truncating the kernel leaves a small DC offset
        assert!(f.response[0].abs() < 0.5 / pad as f64);
        for k in [8, 32, 64, 100] {
            let nu = k as f64 / pad as f64;
            let hann = 0.5 * (1.0 + (PI * 2.0 * nu).cos());
            let expected = nu * hann / g.iso_bin_spacing();
            assert!((f.response[k] - expected).abs() < 1e-2 * expected, "k {k}: {} vs {expected}", f.response[k]);
            assert!((f.response[k] - f.response[pad - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sinogram_gives_zero_image_and_zero_motion_matches_fast_path() {
        let g = geometry();
        let shape = Shape::new(16, 16);
        let zero = Sinogram::zeros(g).unwrap();
        let img = fbp_reconstruct(&zero, None, shape, 4.0).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        let x = blob_image(16, 4.0, 1);
        let s = forward_project(&x, &g, None).unwrap();
        let motion = vec![RigidParams::default(); g.n_views];
        let a = fbp_reconstruct(&s, None, shape, 4.0).unwrap();
        let b = fbp_reconstruct(&s, Some(&motion), shape, 4.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruction_recovers_smooth_object() {
        let g = FanBeamGeometry {
            n_views: 180,
            detector_bins: 256,
            bin_spacing_mm: 1.5,
            ..FanBeamGeometry::default()
        };
        let x = blob_image(32, 4.0, 3);
        let s = forward_project(&x, &g, None).unwrap();
        let y = fbp_reconstruct(&s, None, x.shape(), 4.0).unwrap();
        let err = (x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 1024.0).sqrt();
        assert!(err < 0.03, "rmse {err}");
    }

    #[test]
    fn backprojection_is_linear() {
        let g = geometry();
        let a = Sinogram::new(g, SeededRng::new(1, 0).normal(g.n_views * g.detector_bins)).unwrap();
        let b = Sinogram::new(g, SeededRng::new(1, 1).normal(g.n_views * g.detector_bins)).unwrap();
        let c = Sinogram::new(g, a.data().iter().zip(b.data()).map(|(p, q)| 2.0 * p - q).collect()).unwrap();
        let shape = Shape::new(12, 12);
        let ra = fbp_reconstruct(&a, None, shape, 4.0).unwrap();
        let rb = fbp_reconstruct(&b, None, shape, 4.0).unwrap();
        let rc = fbp_reconstruct(&c, None, shape, 4.0).unwrap();
        for i in 0..144 {
            let e = 2.0 * ra.data()[i] - rb.data()[i];
            assert!((rc.data()[i] - e).abs() < 1e-10 * (1.0 + e.abs()));
        }
    }

    fn objective(filtered: &FilteredSinogram, motion: &[RigidParams], up: &Image) -> f64 {
        let img = backproject(filtered, Some(motion), up.shape(), up.spacing()).unwrap();
        dot(img.data(), up.data())
    }

    #[test]
    fn motion_gradient_matches_finite_differences() {
        let g = geometry();
        let x = blob_image(24, 4.0, 5);
        let s = forward_project(&x, &g, None).unwrap();
        let filtered = filter_sinogram(&s).unwrap();
        let motion: Vec<RigidParams> = SeededRng::new(6, 0)
            .normal(3 * g.n_views)
            .chunks(3)
            .map(|c| RigidParams::new(2.0 * c[0], 2.0 * c[1], 0.03 * c[2]))
            .collect();
        let up = Image::new(24, 24, 4.0, SeededRng::new(7, 0).normal(576)).unwrap();
        let grads = recon_vjp(&filtered, Some(&motion), &up).unwrap();
        for view in [0, 13, 44, 71, 89] {
            // small steps keep the difference clear of interpolation kinks
            for (k, h) in [(0, 1e-6), (1, 1e-6), (2, 1e-8)] {
                let eval = |d: f64| {
                    let mut m = motion.clone();
                    match k {
                        0 => m[view].tx += d,
                        1 => m[view].ty += d,
                        _ => m[view].r += d,
                    }
                    objective(&filtered, &m, &up)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads[view][k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs());
                assert!(rel < 1e-2, "view {view} param {k}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let g = geometry();
        let s = Sinogram::new(g, SeededRng::new(1, 0).normal(g.n_views * g.detector_bins)).unwrap();
        let f = filter_sinogram(&s).unwrap();
        let up = Image::zeros(8, 8, 4.0).unwrap();
        let grads = recon_vjp(&f, None, &up).unwrap();
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert_eq!(grads.len(), g.n_views);
    }

    #[test]
    fn centered_disk_has_no_rotation_gradient() {
        let g = geometry();
        // analytic disk sinogram: identical rows for every view
        let rho = 40.0;
        let (r, d) = (g.source_isocenter_mm, g.source_detector_mm);
        let row: Vec<f64> = (0..g.detector_bins)
            .map(|k| {
                let u = g.bin_center(k);
                let dist = r * u / (d * d + u * u).sqrt();
                2.0 * (rho * rho - dist * dist).max(0.0).sqrt()
            })
            .collect();
        let s = Sinogram::new(g, row.repeat(g.n_views)).unwrap();
        let f = filter_sinogram(&s).unwrap();
        for (n, sp) in [(24usize, 4.0), (48, 2.0), (96, 1.0)] {
            let lat = Lattice::new(Shape::new(n, n), sp);
            let bump = |c: [f64; 2]| -> Image {
                let data = (0..n * n)
                    .map(|i| {
                        let p = lat.center(i / n, i % n);
                        let r2 = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (30.0f64 * 30.0);
                        if r2 < 1.0 { (1.0 - r2).powi(3) } else { 0.0 }
                    })
                    .collect();
                Image::new(n, n, sp, data).unwrap()
            };
            let sym = recon_vjp(&f, None, &bump([0.0, 0.0])).unwrap();
            let off = recon_vjp(&f, None, &bump([12.0, -8.0])).unwrap();
            let scale = off.iter().map(|g| g[2].abs()).fold(0.0, f64::max);
            let worst = sym.iter().map(|g| g[2].abs()).fold(0.0, f64::max);
            assert!(scale > 0.0);
            assert!(worst < 1e-3 * scale, "{n}: {worst} vs {scale}");
        }
    }
}

//! Ray-driven projector with bilinear sampling and its exact adjoint.

use alloc::format;
use alloc::vec;

use super::{check_motion, view_motion, FanBeamGeometry, RigidParams, Sinogram, ViewFrame};
use crate::grid::{Image, Shape};
use crate::{Error, Result};
use crate::math::{ceil, floor, sqrt};

/// Pixel lattice of an image in physical coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lattice {
    pub h: usize,
    pub w: usize,
    pub sp: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Lattice {
    pub fn new(shape: Shape, spacing: f64) -> Self {
        Self {
            h: shape.height,
            w: shape.width,
            sp: spacing,
            cx: (shape.width as f64 - 1.0) * 0.5,
            cy: (shape.height as f64 - 1.0) * 0.5,
        }
    }

    pub fn of(image: &Image) -> Self {
        Self::new(image.shape(), image.spacing())
    }

    pub fn center(&self, row: usize, col: usize) -> [f64; 2] {
        [(col as f64 - self.cx) * self.sp, (self.cy - row as f64) * self.sp]
    }

    /// Calls `visit(pixel, weight)` for the bilinear weights at `p`; pixels
    /// outside the image contribute zero.
    #[inline]
    fn bilinear(&self, p: [f64; 2], mut visit: impl FnMut(usize, f64)) {
        let fc = p[0] / self.sp + self.cx;
        let fr = self.cy - p[1] / self.sp;
        let c0 = floor(fc);
        let r0 = floor(fr);
        let wc = fc - c0;
        let wr = fr - r0;
        let (c0, r0) = (c0 as isize, r0 as isize);
        for (dr, wy) in [(0isize, 1.0 - wr), (1, wr)] {
            let r = r0 + dr;
            if r < 0 || r >= self.h as isize || wy == 0.0 {
                continue;
            }
            for (dc, wx) in [(0isize, 1.0 - wc), (1, wc)] {
                let c = c0 + dc;
                if c < 0 || c >= self.w as isize || wx == 0.0 {
                    continue;
                }
                visit(r as usize * self.w + c as usize, wy * wx);
            }
        }
    }
}

fn check_fov(geom: &FanBeamGeometry, lat: &Lattice) -> Result<()> {
    geom.validate()?;
    let inscribed = 0.5 * (lat.h.min(lat.w) as f64) * lat.sp;
    let diag = 0.5 * sqrt((lat.h * lat.h + lat.w * lat.w) as f64) * lat.sp;
    if inscribed > geom.fov_radius() {
        return Err(Error::invalid(format!(
            "image disk of radius {inscribed} mm exceeds the field of view ({} mm)",
            geom.fov_radius()
        )));
    }
    if diag >= geom.source_isocenter_mm {
        return Err(Error::invalid("image extends past the source orbit"));
    }
    Ok(())
}

/// Walks the ray from `a` to `b` through the lattice, calling
/// `visit(pixel, weight)` so that the line integral is `Σ weight·f[pixel]`.
/// Samples sit at distances `(j + ½)·sp/2` from `a`, so the sample pattern
/// moves rigidly with the source.
fn trace_ray(lat: &Lattice, a: [f64; 2], b: [f64; 2], mut visit: impl FnMut(usize, f64)) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let hx = (lat.cx + 1.0) * lat.sp;
    let hy = (lat.cy + 1.0) * lat.sp;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (o, dd, half) in [(a[0], d[0], hx), (a[1], d[1], hy)] {
        if dd == 0.0 {
            if o.abs() > half {
                return;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-half - o) / dd, (half - o) / dd);
        if lo > hi {
            core::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    if t1 <= t0 {
        return;
    }
    let len = sqrt(d[0] * d[0] + d[1] * d[1]);
    let step = 0.5 * lat.sp;
    let dir = [d[0] / len, d[1] / len];
    let first = ceil(t0 * len / step - 0.5).max(0.0) as usize;
    let last = floor(t1 * len / step - 0.5);
    if last < first as f64 {
        return;
    }
    for j in first..=last as usize {
        let l = (j as f64 + 0.5) * step;
        lat.bilinear([a[0] + l * dir[0], a[1] + l * dir[1]], |idx, w| visit(idx, w * step));
    }
}

/// Source and detector bin positions of one view in the acquisition frame.
fn for_each_ray(geom: &FanBeamGeometry, view: usize, m: RigidParams, mut f: impl FnMut(usize, [f64; 2], [f64; 2])) {
    let frame = ViewFrame::new(geom, view, m);
    let r = geom.source_isocenter_mm;
    let back = geom.source_detector_mm - r;
    let src = frame.to_acquisition([r * frame.s[0], r * frame.s[1]]);
    for bin in 0..geom.detector_bins {
        let u = geom.bin_center(bin);
        let p = [-back * frame.s[0] + u * frame.e[0], -back * frame.s[1] + u * frame.e[1]];
        f(bin, src, frame.to_acquisition(p));
    }
}

/// Line integrals of `image` (mm-weighted) for every view and bin.
pub fn forward_project(image: &Image, geometry: &FanBeamGeometry, motion: Option<&[RigidParams]>) -> Result<Sinogram> {
    let lat = Lattice::of(image);
    check_fov(geometry, &lat)?;
    check_motion(geometry, motion)?;
    let bins = geometry.detector_bins;
    let f = image.data();
    let mut out = vec![0.0; geometry.n_views * bins];
    for view in 0..geometry.n_views {
        let row = &mut out[view * bins..(view + 1) * bins];
        for_each_ray(geometry, view, view_motion(motion, view), |bin, a, b| {
            let mut acc = 0.0;
            trace_ray(&lat, a, b, |idx, w| acc += w * f[idx]);
            row[bin] = acc;
        });
    }
    Sinogram::new(*geometry, out)
}

/// Exact adjoint of [`forward_project`]: maps a sinogram onto an image
/// lattice of the given shape and spacing.
pub fn backproject_adjoint(
    sinogram: &Sinogram,
    shape: Shape,
    spacing: f64,
    motion: Option<&[RigidParams]>,
) -> Result<Image> {
    let geometry = sinogram.geometry();
    let mut out = Image::zeros(shape.height, shape.width, spacing)?.into_data();
    let lat = Lattice::new(shape, spacing);
    check_fov(geometry, &lat)?;
    check_motion(geometry, motion)?;
    for view in 0..geometry.n_views {
        let row = sinogram.row(view);
        for_each_ray(geometry, view, view_motion(motion, view), |bin, a, b| {
            let y = row[bin];
            if y != 0.0 {
                trace_ray(&lat, a, b, |idx, w| out[idx] += w * y);
            }
        });
    }
    Image::new(shape.height, shape.width, spacing, out)
}

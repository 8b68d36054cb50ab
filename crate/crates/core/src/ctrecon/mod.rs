//! 2-D fan-beam CT: geometry, projector pair, filtered backprojection with
//! per-view rigid motion, the motion Jacobian of the backprojection, and
//! phantoms.
//!
//! View `i` sits at `β_i = 2πi/n` (counter-clockwise) with the source at
//! `R·(cos β, sin β)`, a flat detector centered at `-(D - R)·(cos β, sin β)`
//! and detector axis `(-sin β, cos β)`. Bin `k` is centered at
//! `u_k = (k - (bins - 1)/2)·Δ`.
//!
//! Motion convention: the rigid transform `p ↦ Rot(r)·p + (tx, ty)` of a
//! view's [`RigidParams`] moves that view's source and detector. Seen from
//! the acquisition frame the object moves by the inverse transform, so
//! `tx = -5` acquires the same data as the object shifted by `+5` mm.

mod fbp;
mod phantom;
mod projector;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::{Error, Result};
use crate::math::{atan, sin, sin_cos};

pub use fbp::{backproject, fbp_reconstruct, filter_sinogram, recon_vjp, FilteredSinogram, RampFilter};
pub use phantom::{shepp_logan, Ellipse, PhantomSampler};
pub use projector::{backproject_adjoint, forward_project};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub source_isocenter_mm: f64,
    pub source_detector_mm: f64,
    pub detector_bins: usize,
    pub bin_spacing_mm: f64,
}

impl Default for FanBeamGeometry {
    fn default() -> Self {
        Self {
            n_views: 360,
            source_isocenter_mm: 785.0,
            source_detector_mm: 1200.0,
            detector_bins: 700,
            bin_spacing_mm: 0.64,
        }
    }
}

impl FanBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        let (r, d) = (self.source_isocenter_mm, self.source_detector_mm);
        if self.n_views == 0 || self.detector_bins == 0 {
            return Err(Error::invalid("geometry needs at least one view and one bin"));
        }
        if !(r > 0.0 && d > r && d.is_finite()) {
            return Err(Error::invalid(format!(
                "need source_detector > source_isocenter > 0, got {d} and {r}"
            )));
        }
        if !(self.bin_spacing_mm > 0.0 && self.bin_spacing_mm.is_finite()) {
            return Err(Error::invalid("bin spacing must be positive"));
        }
        Ok(())
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        2.0 * PI * view as f64 / self.n_views as f64
    }

    /// Detector coordinate of a bin center (mm, on the detector).
    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 - (self.detector_bins as f64 - 1.0) * 0.5) * self.bin_spacing_mm
    }

    /// Bin spacing scaled to the isocenter.
    pub fn iso_bin_spacing(&self) -> f64 {
        self.bin_spacing_mm * self.source_isocenter_mm / self.source_detector_mm
    }

    /// Radius of the circle around the isocenter seen by every view.
    pub fn fov_radius(&self) -> f64 {
        let half = 0.5 * self.detector_bins as f64 * self.bin_spacing_mm;
        self.source_isocenter_mm * sin(atan(half / self.source_detector_mm))
    }

    /// Detector coordinate of the projection of point `p` (acquisition frame)
    /// in view `view`; `None` if the point is behind the source.
    pub fn project_point(&self, view: usize, motion: RigidParams, p: [f64; 2]) -> Option<f64> {
        let frame = ViewFrame::new(self, view, motion);
        let q = frame.to_nominal(p);
        let (a, b) = frame.coords(q);
        let den = self.source_isocenter_mm - b;
        (den > 0.0).then(|| self.source_detector_mm * a / den)
    }
}

/// Per-view rigid transform. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RigidParams {
    pub tx: f64,
    pub ty: f64,
    pub r: f64,
}

impl RigidParams {
    pub fn new(tx: f64, ty: f64, r: f64) -> Self {
        Self { tx, ty, r }
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.r.is_finite()
    }
}

/// Nominal view directions plus the view's rigid transform.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ViewFrame {
    /// Unit vector from the isocenter to the nominal source.
    pub s: [f64; 2],
    /// Detector axis.
    pub e: [f64; 2],
    pub cos_r: f64,
    pub sin_r: f64,
    pub t: [f64; 2],
}

impl ViewFrame {
    pub fn new(geom: &FanBeamGeometry, view: usize, m: RigidParams) -> Self {
        let (sb, cb) = sin_cos(geom.view_angle(view));
        let (sr, cr) = sin_cos(m.r);
        Self {
            s: [cb, sb],
            e: [-sb, cb],
            cos_r: cr,
            sin_r: sr,
            t: [m.tx, m.ty],
        }
    }

    /// `Rot(r)·p + t`: nominal frame to acquisition frame.
    pub fn to_acquisition(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.cos_r * p[0] - self.sin_r * p[1] + self.t[0],
            self.sin_r * p[0] + self.cos_r * p[1] + self.t[1],
        ]
    }

    /// `Rot(-r)·(p - t)`: acquisition frame to nominal frame.
    pub fn to_nominal(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - self.t[0], p[1] - self.t[1]];
        [
            self.cos_r * d[0] + self.sin_r * d[1],
            -self.sin_r * d[0] + self.cos_r * d[1],
        ]
    }

    /// `(⟨q, e⟩, ⟨q, s⟩)` of a nominal-frame point.
    pub fn coords(&self, q: [f64; 2]) -> (f64, f64) {
        (q[0] * self.e[0] + q[1] * self.e[1], q[0] * self.s[0] + q[1] * self.s[1])
    }
}

fn check_motion(geom: &FanBeamGeometry, motion: Option<&[RigidParams]>) -> Result<()> {
    if let Some(m) = motion {
        if m.len() != geom.n_views {
            return Err(Error::shape(format!("{} views of motion", geom.n_views), m.len()));
        }
        if m.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("motion parameters must be finite"));
        }
    }
    Ok(())
}

fn view_motion(motion: Option<&[RigidParams]>, view: usize) -> RigidParams {
    motion.map(|m| m[view]).unwrap_or_default()
}

/// Line integrals, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: FanBeamGeometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: FanBeamGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.n_views * geometry.detector_bins;
        if data.len() != n {
            return Err(Error::shape(
                format!("{n} values ({}x{})", geometry.n_views, geometry.detector_bins),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sinogram contains non-finite values"));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: FanBeamGeometry) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.n_views * geometry.detector_bins;
        Self::new(geometry, vec![0.0; n])
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, view: usize) -> &[f64] {
        let b = self.geometry.detector_bins;
        &self.data[view * b..(view + 1) * b]
    }

    pub fn get(&self, view: usize, bin: usize) -> f64 {
        self.data[view * self.geometry.detector_bins + bin]
    }

    pub fn quantized_f32(&self) -> Sinogram {
        Sinogram {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_inverse() {
        let g = FanBeamGeometry::default();
        let f = ViewFrame::new(&g, 37, RigidParams::new(1.5, -2.0, 0.3));
        let p = [12.0, -7.5];
        let q = f.to_acquisition(f.to_nominal(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn isocenter_projects_to_center_and_fov_is_plausible() {
        let g = FanBeamGeometry::default();
        for v in [0, 90, 181] {
            assert_eq!(g.project_point(v, RigidParams::default(), [0.0, 0.0]), Some(0.0));
        }
        // half-detector 224 mm at 1200 mm → ~146 mm at the isocenter
        assert!((g.fov_radius() - 145.0).abs() < 2.0);
        assert!((g.bin_center(0) + g.bin_center(699)).abs() < 1e-12);
    }

    #[test]
    fn geometry_validation() {
        let bad = FanBeamGeometry {
            source_detector_mm: 500.0,
            ..FanBeamGeometry::default()
        };
        assert!(bad.validate().is_err());
        assert!(Sinogram::new(FanBeamGeometry::default(), vec![0.0; 5]).is_err());
    }
}

//! Ellipse phantoms: a random head-like sampler and the modified Shepp-Logan.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::grid::{Image, SeededRng, Shape};
use crate::scorenet::ImageSource;
use crate::{Error, Result};
use crate::math::{cos, sin, sin_cos, sqrt};

/// Filled ellipse in physical coordinates (mm), rotated by `angle` radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub value: f64,
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = sin_cos(self.angle);
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

/// Averages `f` over a `k×k` sub-grid of every pixel.
fn rasterize(shape: Shape, spacing: f64, k: usize, f: impl Fn([f64; 2]) -> f64) -> Result<Image> {
    let k = k.max(1);
    let cx = (shape.width as f64 - 1.0) * 0.5;
    let cy = (shape.height as f64 - 1.0) * 0.5;
    let mut data = Vec::with_capacity(shape.len());
    for row in 0..shape.height {
        for col in 0..shape.width {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let dy = (i as f64 + 0.5) / k as f64 - 0.5;
                    let dx = (j as f64 + 0.5) / k as f64 - 0.5;
                    let x = (col as f64 + dx - cx) * spacing;
                    let y = (cy - row as f64 - dy) * spacing;
                    acc += f([x, y]);
                }
            }
            data.push(acc / (k * k) as f64);
        }
    }
    Image::new(shape.height, shape.width, spacing, data)
}

/// Modified Shepp-Logan head phantom (values in [0, 1]) scaled so that
/// its unit square spans the image.
pub fn shepp_logan(shape: Shape, spacing: f64, supersample: usize) -> Result<Image> {
    const TABLE: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    let half = 0.5 * shape.width.min(shape.height) as f64 * spacing;
    let ellipses: Vec<Ellipse> = TABLE
        .iter()
        .map(|e| Ellipse {
            value: e[0],
            axes: [e[1] * half, e[2] * half],
            center: [e[3] * half, e[4] * half],
            angle: e[5] * PI / 180.0,
        })
        .collect();
    rasterize(shape, spacing, supersample, |p| {
        ellipses.iter().filter(|e| e.contains(p)).map(|e| e.value).sum::<f64>()
    })
}

/// Random head-like ellipse phantoms with values in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PhantomSampler {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    /// Inclusive range of inner ellipse counts.
    pub ellipses: (usize, usize),
    /// Range of inner ellipse intensities.
    pub intensity: (f64, f64),
    /// Adds a bright outer shell and a soft-tissue interior.
    pub skull_ring: bool,
    pub supersample: usize,
}

impl Default for PhantomSampler {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            spacing_mm: 4.0,
            ellipses: (3, 8),
            intensity: (0.1, 0.8),
            skull_ring: true,
            supersample: 3,
        }
    }
}

impl PhantomSampler {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity;
        if self.height == 0 || self.width == 0 || !(self.spacing_mm > 0.0) {
            return Err(Error::invalid("phantom grid must be non-empty with positive spacing"));
        }
        if self.ellipses.0 > self.ellipses.1 {
            return Err(Error::invalid("ellipse count range is reversed"));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("intensity range must lie inside [0, 1]"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn sample(&self, seed: u64) -> Result<Image> {
        self.validate()?;
        let mut rng = SeededRng::new(seed, 0).generator();
        let half = 0.5 * self.height.min(self.width) as f64 * self.spacing_mm;
        let (lo, hi) = self.intensity;
        let mut layers: Vec<Ellipse> = Vec::new();
        // region the inner ellipses live in
        let (region, region_angle);
        if self.skull_ring {
            let a = half * rng.random_range(0.72..0.86);
            let b = a * rng.random_range(0.78..0.95);
            let angle = rng.random_range(-0.3..0.3);
            let thick = half * rng.random_range(0.05..0.08);
            layers.push(Ellipse { value: 1.0, center: [0.0, 0.0], axes: [a, b], angle });
            let brain = lo + 0.25 * (hi - lo) * rng.random::<f64>();
            layers.push(Ellipse { value: brain, center: [0.0, 0.0], axes: [a - thick, b - thick], angle });
            region = [a - thick, b - thick];
            region_angle = angle;
        } else {
            region = [0.7 * half, 0.7 * half];
            region_angle = 0.0;
        }
        let count = rng.random_range(self.ellipses.0..=self.ellipses.1);
        let (rs, rc) = sin_cos(region_angle);
        for _ in 0..count {
            let ea = region[0] * rng.random_range(0.08..0.4);
            let eb = region[1] * rng.random_range(0.08..0.4);
            // center drawn so the ellipse stays inside the region
            let rad = sqrt(rng.random::<f64>());
            let phi = rng.random_range(0.0..2.0 * PI);
            let u = rad * cos(phi) * (region[0] - ea.max(eb)).max(0.0);
            let v = rad * sin(phi) * (region[1] - ea.max(eb)).max(0.0);
            layers.push(Ellipse {
                value: rng.random_range(lo..=hi),
                center: [rc * u - rs * v, rs * u + rc * v],
                axes: [ea, eb],
                angle: rng.random_range(0.0..PI),
            });
        }
        rasterize(self.shape(), self.spacing_mm, self.supersample, |p| {
            // later layers paint over earlier ones
            layers.iter().rev().find(|e| e.contains(p)).map_or(0.0, |e| e.value)
        })
    }
}

impl ImageSource for PhantomSampler {
    fn shape(&self) -> Shape {
        PhantomSampler::shape(self)
    }

    fn image(&self, index: u64) -> Result<Vec<f64>> {
        Ok(self.sample(index)?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_is_deterministic_bounded_and_diverse() {
        let s = PhantomSampler::default();
        let a = s.sample(1).unwrap();
        assert_eq!(a, s.sample(1).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = s.sample(2).unwrap();
        let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differing * 100 >= a.len(), "{differing}");
    }

    #[test]
    fn no_ellipses_and_no_skull_is_background() {
        let s = PhantomSampler { ellipses: (0, 0), skull_ring: false, ..PhantomSampler::default() };
        assert!(s.sample(9).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = PhantomSampler { intensity: (0.5, 1.5), ..PhantomSampler::default() };
        assert!(bad.sample(0).is_err());
    }

    #[test]
    fn shepp_logan_levels() {
        let img = shepp_logan(Shape::new(128, 128), 1.0, 1).unwrap();
        assert!(img.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        // center pixel lies in the brain matter (1 - 0.8)
        assert!((img.get(64, 64) - 0.2).abs() < 1e-12 || (img.get(63, 63) - 0.2).abs() < 1e-12);
        // the skull at the top of the vertical axis is bright
        assert!((img.get(6, 64) - 1.0).abs() < 1e-12);
    }
}

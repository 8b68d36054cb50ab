//! Dense 2-D images and reproducible random streams.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Row-major scalar image with isotropic physical spacing (mm per pixel).
///
/// Pixel `(row, col)` has its center at
/// `x = (col - (width - 1) / 2) * spacing`, `y = ((height - 1) / 2 - row) * spacing`,
/// so row 0 is the top of the image and `y` points up.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
    height: usize,
    width: usize,
    spacing: f64,
}

impl Image {
    pub fn new(height: usize, width: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} values ({height}x{width})", height * width),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            data,
            height,
            width,
            spacing,
        })
    }

    pub fn zeros(height: usize, width: usize, spacing: f64) -> Result<Self> {
        Self::new(height, width, spacing, vec![0.0; height * width])
    }

    /// Same geometry as `self`, new payload.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.spacing, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    /// Physical position of a pixel center in mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cx = (self.width as f64 - 1.0) * 0.5;
        let cy = (self.height as f64 - 1.0) * 0.5;
        ((col as f64 - cx) * self.spacing, (cy - row as f64) * self.spacing)
    }

    /// Rounds every value to the nearest 32-bit float, the storage precision.
    pub fn quantized_f32(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Height and width of an image-shaped field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Euclidean inner product of two equally long slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Counter-based random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// selector, so the `k`-th 32-bit word of a stream is a pure function of
/// `(seed, stream, k)` regardless of threading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededRng {
    pub seed: u64,
    pub stream: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A different stream under the same seed.
    pub fn with_stream(self, stream: u64) -> Self {
        Self { stream, ..self }
    }

    /// Generator positioned at the first word of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        self.generator_at(0)
    }

    /// Generator positioned at 32-bit word `counter` of this stream.
    pub fn generator_at(&self, counter: u128) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(counter);
        rng
    }

    pub fn normal(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn uniform(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.random::<f64>()).collect()
    }
}

/// `n` independent ±1 draws.
pub fn rademacher(rng: &SeededRng, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("rademacher vector length must be at least 1"));
    }
    let mut gen = rng.generator();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let bits = gen.next_u64();
        let take = (n - out.len()).min(64);
        out.extend((0..take).map(|k| if (bits >> k) & 1 == 1 { 1.0 } else { -1.0 }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rademacher_support_and_determinism() {
        let rng = SeededRng::new(7, 0);
        let v = rademacher(&rng, 4).unwrap();
        assert!(v.iter().all(|x| x * x == 1.0));
        assert_eq!(v, rademacher(&rng, 4).unwrap());
        assert!(rademacher(&rng, 0).is_err());
    }

    #[test]
    fn rademacher_mean_is_small() {
        let n = 1_000_000;
        let v = rademacher(&SeededRng::new(11, 3), n).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        // 3 / sqrt(n) = 0.003
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = SeededRng::new(5, 0).normal(n);
        let b = SeededRng::new(5, 1).normal(n);
        let c = SeededRng::new(6, 0).normal(n);
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            let mx = x.iter().sum::<f64>() / n as f64;
            let my = y.iter().sum::<f64>() / n as f64;
            let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
            let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
            let rho = cov / (vx * vy).sqrt();
            assert!(rho.abs() < 0.01, "rho {rho}");
        }
    }

    #[test]
    fn generator_at_counter_matches_sequential_draws() {
        let rng = SeededRng::new(42, 9);
        let mut seq = rng.generator();
        let words: Vec<u32> = (0..16).map(|_| seq.next_u32()).collect();
        let mut jumped = rng.generator_at(10);
        assert_eq!(jumped.next_u32(), words[10]);
    }

    #[test]
    fn image_rejects_inconsistent_payload() {
        assert!(Image::new(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 0.0, vec![0.0; 4]).is_err());
        assert!(Image::new(1, 1, 1.0, vec![f64::NAN]).is_err());
        let img = Image::new(3, 5, 2.0, vec![0.0; 15]).unwrap();
        assert_eq!(img.pixel_center(1, 2), (0.0, 0.0));
        assert_eq!(img.pixel_center(0, 0), (-4.0, 2.0));
    }
}

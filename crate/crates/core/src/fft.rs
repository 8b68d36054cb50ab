//! Iterative radix-2 complex FFT, just enough for the ramp filter.

use alloc::vec::Vec;
use crate::math::{cos, sin};


#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
}

/// In-place FFT of a power-of-two length buffer. `inverse` applies the
/// conjugate transform and the 1/n normalization.
pub(crate) fn fft_in_place(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * core::f64::consts::PI / len as f64;
        let twiddles: Vec<Complex> = (0..len / 2)
            .map(|k| {
                let a = ang * k as f64;
                Complex::new(cos(a), sin(a))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2].mul(twiddles[k]);
                buf[start + k] = Complex::new(u.re + v.re, u.im + v.im);
                buf[start + k + len / 2] = Complex::new(u.re - v.re, u.im - v.im);
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for c in buf.iter_mut() {
            c.re *= scale;
            c.im *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matches_direct_dft() {
        let n = 16;
        let x: Vec<Complex> = (0..n)
            .map(|i| Complex::new((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut y = x.clone();
        fft_in_place(&mut y, false);
        for (k, yk) in y.iter().enumerate() {
            let mut acc = Complex::default();
            for (j, xj) in x.iter().enumerate() {
                let a = -2.0 * core::f64::consts::PI * (j * k) as f64 / n as f64;
                let w = Complex::new(cos(a), sin(a));
                let p = xj.mul(w);
                acc.re += p.re;
                acc.im += p.im;
            }
            assert!((acc.re - yk.re).abs() < 1e-12 && (acc.im - yk.im).abs() < 1e-12);
        }
        fft_in_place(&mut y, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a.re - b.re).abs() < 1e-12 && (a.im - b.im).abs() < 1e-12);
        }
        let mut one = vec![Complex::new(3.0, 0.0)];
        fft_in_place(&mut one, false);
        assert_eq!(one[0].re, 3.0);
    }
}

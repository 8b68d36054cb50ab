//! 3×3 same-padding convolution primitives on `[channel][row][col]` buffers.

/// `acc[y][x] += a · src[y + dy][x + dx]` wherever the source index is inside
/// the image; out-of-range source pixels read as zero.
#[inline]
pub(crate) fn shift_axpy(acc: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, a: f64) {
    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
    if x1 <= x0 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let dst = &mut acc[y * w + x0..y * w + x1];
        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (d, v) in dst.iter_mut().zip(s) {
            *d += a * v;
        }
    }
}

/// `Σ a[y][x] · src[y + dy][x + dx]` over in-range source pixels.
#[inline]
pub(crate) fn shift_dot(a: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
    if x1 <= x0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let p = &a[y * w + x0..y * w + x1];
        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        acc += p.iter().zip(s).map(|(u, v)| u * v).sum::<f64>();
    }
    acc
}

#[inline]
fn offset(k: usize) -> (isize, isize) {
    (k as isize / 3 - 1, k as isize % 3 - 1)
}

/// Geometry of one convolution layer. Weights are `[cout][cin][3][3]`
/// followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.cout
    }

    /// `out = W ⋆ input (+ bias)`.
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize, with_bias: bool, out: &mut [f64]) {
        let n = h * w;
        let (weights, bias) = params.split_at(self.weight_count());
        for co in 0..self.cout {
            let o = &mut out[co * n..(co + 1) * n];
            o.fill(if with_bias { bias[co] } else { 0.0 });
            for ci in 0..self.cin {
                let src = &input[ci * n..(ci + 1) * n];
                let wk = &weights[(co * self.cin + ci) * 9..(co * self.cin + ci + 1) * 9];
                for (k, &a) in wk.iter().enumerate() {
                    if a != 0.0 {
                        let (dy, dx) = offset(k);
                        shift_axpy(o, src, h, w, dy, dx, a);
                    }
                }
            }
        }
    }

    /// `grad_in += Wᵀ ⋆ grad_out`.
    pub fn backward_input(&self, params: &[f64], grad_out: &[f64], h: usize, w: usize, grad_in: &mut [f64]) {
        let n = h * w;
        let weights = &params[..self.weight_count()];
        for ci in 0..self.cin {
            let gi = &mut grad_in[ci * n..(ci + 1) * n];
            for co in 0..self.cout {
                let go = &grad_out[co * n..(co + 1) * n];
                let wk = &weights[(co * self.cin + ci) * 9..(co * self.cin + ci + 1) * 9];
                for (k, &a) in wk.iter().enumerate() {
                    if a != 0.0 {
                        let (dy, dx) = offset(k);
                        shift_axpy(gi, go, h, w, -dy, -dx, a);
                    }
                }
            }
        }
    }

    /// Accumulates `∂⟨grad_out, W ⋆ input⟩/∂W` (and the bias term when
    /// `with_bias`) into `grad_params`.
    pub fn backward_params(
        &self,
        grad_out: &[f64],
        input: &[f64],
        h: usize,
        w: usize,
        with_bias: bool,
        grad_params: &mut [f64],
    ) {
        let n = h * w;
        let (gw, gb) = grad_params.split_at_mut(self.weight_count());
        for co in 0..self.cout {
            let go = &grad_out[co * n..(co + 1) * n];
            if with_bias {
                gb[co] += go.iter().sum::<f64>();
            }
            for ci in 0..self.cin {
                let src = &input[ci * n..(ci + 1) * n];
                let base = (co * self.cin + ci) * 9;
                for k in 0..9 {
                    let (dy, dx) = offset(k);
                    gw[base + k] += shift_dot(go, src, h, w, dy, dx);
                }
            }
        }
    }
}

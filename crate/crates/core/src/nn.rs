//! Layer kernels on flat buffers: stride-1 "same" convolutions, max pooling,
//! dense layers. Forward and backward passes are written out by hand; the
//! model and the attribution engines compose them.

use alloc::vec;
use alloc::vec::Vec;

/// Geometry of a stride-1, zero-padded ("same") square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Visits every `(out_channel, in_channel, weight_index, rows, len)` where
    /// `rows` pairs each output row offset with the input row offset read
    /// through one kernel tap, over `len` contiguous columns.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, &[(usize, usize)], usize)) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        let pad = self.pad();
        let mut rows: Vec<(usize, usize)> = Vec::with_capacity(self.height);
        for ky in 0..k {
            let dy = ky as isize - pad;
            let y0 = (-dy).max(0);
            let y1 = (h - dy).min(h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0);
                let x1 = (w - dx).min(w);
                if x1 <= x0 || y1 <= y0 {
                    continue;
                }
                rows.clear();
                for y in y0..y1 {
                    rows.push(((y * w + x0) as usize, ((y + dy) * w + x0 + dx) as usize));
                }
                for oc in 0..self.out_channels {
                    for ic in 0..self.in_channels {
                        let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                        f(oc, ic, widx, &rows, (x1 - x0) as usize);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(geom: ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let hw = geom.height * geom.width;
    debug_assert_eq!(input.len(), geom.in_channels * hw);
    debug_assert_eq!(weight.len(), geom.weight_len());
    let mut out = vec![0.0; geom.out_channels * hw];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_exact_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    geom.for_each_tap(|oc, ic, widx, rows, len| {
        let wv = weight[widx];
        if wv == 0.0 {
            return;
        }
        let out_c = &mut out[oc * hw..(oc + 1) * hw];
        let in_c = &input[ic * hw..(ic + 1) * hw];
        for &(o, i) in rows {
            for (dst, src) in out_c[o..o + len].iter_mut().zip(&in_c[i..i + len]) {
                *dst += wv * src;
            }
        }
    });
    out
}

/// Accumulates the input gradient (transposed convolution of `grad_out`).
pub fn conv2d_backward_input(geom: ConvGeom, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let hw = geom.height * geom.width;
    geom.for_each_tap(|oc, ic, widx, rows, len| {
        let wv = weight[widx];
        if wv == 0.0 {
            return;
        }
        let g_c = &grad_out[oc * hw..(oc + 1) * hw];
        let gi_c = &mut grad_in[ic * hw..(ic + 1) * hw];
        for &(o, i) in rows {
            for (dst, src) in gi_c[i..i + len].iter_mut().zip(&g_c[o..o + len]) {
                *dst += wv * src;
            }
        }
    });
}

/// Accumulates weight and bias gradients.
pub fn conv2d_backward_params(
    geom: ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) {
    let hw = geom.height * geom.width;
    geom.for_each_tap(|oc, ic, widx, rows, len| {
        let g_c = &grad_out[oc * hw..(oc + 1) * hw];
        let in_c = &input[ic * hw..(ic + 1) * hw];
        let mut acc = 0.0;
        for &(o, i) in rows {
            acc += g_c[o..o + len].iter().zip(&in_c[i..i + len]).map(|(a, b)| a * b).sum::<f64>();
        }
        grad_weight[widx] += acc;
    });
    if let Some(gb) = grad_bias {
        for (oc, chunk) in grad_out.chunks_exact(hw).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
    }
}

/// Output of a max pool, with the flat input index each output was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// Max pooling of a `[C, H, W]` buffer into `out_h × out_w` adaptive bins.
/// With `H`, `W` divisible by 2 and half the output size this is 2×2/2 pooling.
pub fn adaptive_max_pool(input: &[f64], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Pooled {
    let mut values = Vec::with_capacity(channels * out_h * out_w);
    let mut argmax = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..out_h {
            let (ys, ye) = (oy * h / out_h, ((oy + 1) * h).div_ceil(out_h));
            for ox in 0..out_w {
                let (xs, xe) = (ox * w / out_w, ((ox + 1) * w).div_ceil(out_w));
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + ys * w + xs;
                for y in ys..ye {
                    for x in xs..xe {
                        let idx = base + y * w + x;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Pooled { values, argmax }
}

/// Routes output gradients (or relevances) back to the winning inputs.
pub fn max_pool_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx] += g;
    }
}

/// `y = W x + b` with `W` stored row-major as `[out, in]`.
pub fn dense_forward(weight: &[f64], bias: Option<&[f64]>, input: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = input.len();
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Accumulates `W^T g` into `grad_in`.
pub fn dense_backward_input(weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let in_dim = grad_in.len();
    for (o, g) in grad_out.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        for (gi, wv) in grad_in.iter_mut().zip(row) {
            *gi += wv * g;
        }
    }
}

pub fn dense_backward_params(
    grad_out: &[f64],
    input: &[f64],
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) {
    let in_dim = input.len();
    for (o, g) in grad_out.iter().enumerate() {
        let row = &mut grad_weight[o * in_dim..(o + 1) * in_dim];
        for (gw, x) in row.iter_mut().zip(input) {
            *gw += g * x;
        }
    }
    if let Some(gb) = grad_bias {
        for (b, g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Cross entropy of `logits` against `target`, with its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -libm::log(probs[target].max(f64::MIN_POSITIVE));
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop convolution used as an oracle.
    fn conv_naive(g: ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (h, w, k) = (g.height as isize, g.width as isize, g.kernel as isize);
        let pad = k / 2;
        let mut out = vec![0.0; g.out_channels * g.height * g.width];
        for oc in 0..g.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y + ky - pad, x + kx - pad);
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let wi = ((oc * g.in_channels + ic) * g.kernel + ky as usize) * g.kernel + kx as usize;
                                acc += weight[wi] * input[ic * (h * w) as usize + (iy * w + ix) as usize];
                            }
                        }
                    }
                    out[oc * (h * w) as usize + (y * w + x) as usize] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let g = ConvGeom { in_channels: 2, out_channels: 3, kernel: 3, height: 5, width: 4 };
        let input = pseudo(40, 1);
        let weight = pseudo(g.weight_len(), 2);
        let bias = [0.1, -0.2, 0.3];
        let fast = conv2d_forward(g, &input, &weight, Some(&bias));
        let slow = conv_naive(g, &input, &weight, &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom { in_channels: 2, out_channels: 2, kernel: 3, height: 4, width: 3 };
        let input = pseudo(24, 3);
        let weight = pseudo(g.weight_len(), 4);
        let upstream = pseudo(24, 5);
        let loss = |inp: &[f64], wt: &[f64]| -> f64 {
            conv2d_forward(g, inp, wt, None).iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut gin = vec![0.0; 24];
        conv2d_backward_input(g, &upstream, &weight, &mut gin);
        let mut gw = vec![0.0; g.weight_len()];
        let mut gb = vec![0.0; 2];
        conv2d_backward_params(g, &upstream, &input, &mut gw, Some(&mut gb));
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += eps;
            let mut m = input.clone();
            m[i] -= eps;
            let fd = (loss(&p, &weight) - loss(&m, &weight)) / (2.0 * eps);
            assert!((fd - gin[i]).abs() < 1e-6);
        }
        for i in 0..weight.len() {
            let mut p = weight.clone();
            p[i] += eps;
            let mut m = weight.clone();
            m[i] -= eps;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6);
        }
        assert!((gb[0] - upstream[..12].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pooling_picks_maxima() {
        let input = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0, 0.0, 0.0, 9.0, 1.0, 2.0, 2.0, 1.0, 6.0];
        let p = adaptive_max_pool(&input, 1, 4, 4, 2, 2);
        assert_eq!(p.values, vec![5.0, 8.0, 2.0, 9.0]);
        let global = adaptive_max_pool(&input, 1, 4, 4, 1, 1);
        assert_eq!(global.values, vec![9.0]);
        let mut g = vec![0.0; 16];
        max_pool_backward(&[1.0, 2.0, 3.0, 4.0], &p.argmax, &mut g);
        assert_eq!(g[1], 1.0);
        assert_eq!(g[6], 2.0);
        assert_eq!(g[10], 4.0);
    }

    #[test]
    fn dense_and_cross_entropy() {
        let w = [1.0, 2.0, -1.0, 0.5];
        let y = dense_forward(&w, Some(&[0.5, 0.0]), &[1.0, 1.0], 2);
        assert_eq!(y, vec![3.5, -0.5]);
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - libm::log(2.0)).abs() < 1e-12);
        assert_eq!(grad, vec![0.5, -0.5]);
        assert!((softplus(-2.0) + libm::log(sigmoid(2.0))).abs() < 1e-12);
        assert!((libm::log(1.0 - sigmoid(3.0)) + softplus(3.0)).abs() < 1e-12);
    }
}

//! Dense row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Number of spatial positions of a `[C, H, W]` tensor.
    pub fn spatial_len(&self) -> usize {
        match self.shape.as_slice() {
            [_, h, w] => h * w,
            [h, w] => h * w,
            s => s.iter().product(),
        }
    }
}

/// Bilinear resize of a `[H, W]` map (half-pixel centers, edge clamped).
pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (in_h, in_w) = match map.shape() {
        [h, w] => (*h, *w),
        s => panic!("resize_bilinear expects a 2-D map, got {s:?}"),
    };
    if in_h == out_h && in_w == out_w {
        return map.clone();
    }
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * in_w + x0] * (1.0 - wx) + src[y0 * in_w + x1] * wx;
            let bottom = src[y1 * in_w + x0] * (1.0 - wx) + src[y1 * in_w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Mean over channels of a `[C, H, W]` tensor, giving `[H, W]`.
pub fn channel_mean(t: &Tensor) -> Tensor {
    channel_reduce(t, true)
}

/// Sum over channels of a `[C, H, W]` tensor, giving `[H, W]`.
pub fn channel_sum(t: &Tensor) -> Tensor {
    channel_reduce(t, false)
}

fn channel_reduce(t: &Tensor, mean: bool) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected [C, H, W], got {s:?}"),
    };
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for ch in t.data().chunks_exact(hw) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    if mean && c > 0 {
        out.iter_mut().for_each(|v| *v /= c as f64);
    }
    Tensor::from_vec(&[h, w], out)
}

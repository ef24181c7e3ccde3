//! Minimal dense layers with hand-written backward passes.
//!
//! Everything is `f64` so finite-difference checks are meaningful. Feature maps
//! are channel-major (`C × H × W`).

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` for row-major operands, where `A` is
/// `m × k` (or `k × m` when transposed) and `B` is `k × n` (or `n × k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel convolution with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// `cout × (cin · k · k)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub in_shape: (usize, usize, usize),
    pub col: Vec<f64>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        Conv2d {
            cin,
            cout,
            k,
            stride,
            weight: (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn out_dim(&self, len: usize) -> usize {
        let pad = self.k / 2;
        (len + 2 * pad - self.k) / self.stride + 1
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, pad) = (self.k, self.stride, (self.k / 2) as isize);
        let p = oh * ow;
        let mut col = vec![0.0; self.cin * k * k * p];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let (c, h, w) = shape;
        let (k, s, pad) = (self.k, self.stride, (self.k / 2) as isize);
        let p = oh * ow;
        let mut dx = Tensor::zeros(c, h, w);
        for ci in 0..c {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Pre-activation output and the cache needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let (oh, ow) = (self.out_dim(x.h), self.out_dim(x.w));
        let col = self.im2col(x, oh, ow);
        let p = oh * ow;
        let mut out = Tensor::zeros(self.cout, oh, ow);
        for (co, chunk) in out.data.chunks_exact_mut(p).enumerate() {
            chunk.fill(self.bias[co]);
        }
        gemm(self.cout, self.cin * self.k * self.k, p, &self.weight, false, &col, false, 1.0, &mut out.data);
        (
            out,
            ConvCache {
                in_shape: (x.c, x.h, x.w),
                col,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns the
    /// input gradient (when `need_input` is set).
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &Tensor,
        grad: Option<&mut ConvGrad>,
        need_input: bool,
    ) -> Option<Tensor> {
        let p = dout.plane();
        let kk = self.cin * self.k * self.k;
        if let Some(g) = grad {
            // dW += dout · colᵀ
            gemm(self.cout, p, kk, &dout.data, false, &cache.col, true, 1.0, &mut g.weight);
            for (co, chunk) in dout.data.chunks_exact(p).enumerate() {
                g.bias[co] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![0.0; kk * p];
        gemm(kk, self.cout, p, &self.weight, true, &dout.data, false, 0.0, &mut dcol);
        Some(self.col2im(&dcol, cache.in_shape, dout.h, dout.w))
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully connected layer applied to a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    /// `nout × nin`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(nin: usize, nout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, gain * (2.0 / nin as f64).sqrt()).expect("finite std");
        Linear {
            nin,
            nout,
            weight: (0..nin * nout).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; nout],
        }
    }

    /// `rows × nin` in, `rows × nout` out.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.nout);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(rows, self.nin, self.nout, x, false, &self.weight, true, 1.0, &mut out);
        out
    }

    pub fn backward(&self, x: &[f64], dout: &[f64], rows: usize, grad: Option<&mut ConvGrad>) -> Vec<f64> {
        if let Some(g) = grad {
            gemm(self.nout, rows, self.nin, dout, true, x, false, 1.0, &mut g.weight);
            for row in dout.chunks_exact(self.nout) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        let mut dx = vec![0.0; rows * self.nin];
        gemm(rows, self.nout, self.nin, dout, false, &self.weight, false, 0.0, &mut dx);
        dx
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` where the post-activation value is not positive.
pub fn relu_backward(post: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(post) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Bilinear taps of one ROI-align sample: flat plane index and weight.
pub type Taps = [(usize, f64); 4];

/// Fixed-size ROI pooling by one bilinear sample per bin centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiAlign {
    pub bins: usize,
    pub stride: usize,
}

impl RoiAlign {
    pub fn out_len(&self, channels: usize) -> usize {
        channels * self.bins * self.bins
    }

    /// Sampling taps for an ROI given in input-pixel coordinates.
    pub fn taps(&self, h: usize, w: usize, roi: [f64; 4]) -> Vec<Taps> {
        let [x1, y1, x2, y2] = roi;
        let s = self.stride as f64;
        let bw = (x2 - x1) / self.bins as f64;
        let bh = (y2 - y1) / self.bins as f64;
        let mut out = Vec::with_capacity(self.bins * self.bins);
        for by in 0..self.bins {
            let fy = ((y1 + (by as f64 + 0.5) * bh) / s - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1i = (y0 + 1).min(h - 1);
            let ly = fy - y0 as f64;
            for bx in 0..self.bins {
                let fx = ((x1 + (bx as f64 + 0.5) * bw) / s - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1i = (x0 + 1).min(w - 1);
                let lx = fx - x0 as f64;
                out.push([
                    (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                    (y0 * w + x1i, (1.0 - ly) * lx),
                    (y1i * w + x0, ly * (1.0 - lx)),
                    (y1i * w + x1i, ly * lx),
                ]);
            }
        }
        out
    }

    /// Pools each ROI to a `C · bins²` row (channel-major within the row).
    pub fn forward(&self, feat: &Tensor, taps: &[Vec<Taps>]) -> Vec<f64> {
        let nb = self.bins * self.bins;
        let mut out = vec![0.0; taps.len() * feat.c * nb];
        for (r, roi_taps) in taps.iter().enumerate() {
            let row = &mut out[r * feat.c * nb..][..feat.c * nb];
            for c in 0..feat.c {
                let plane = &feat.data[c * feat.plane()..][..feat.plane()];
                for (b, t) in roi_taps.iter().enumerate() {
                    row[c * nb + b] = t.iter().map(|&(i, wt)| plane[i] * wt).sum();
                }
            }
        }
        out
    }

    pub fn backward(&self, feat_shape: (usize, usize, usize), taps: &[Vec<Taps>], dout: &[f64], dfeat: &mut Tensor) {
        let (c_n, h, w) = feat_shape;
        debug_assert_eq!((dfeat.c, dfeat.h, dfeat.w), feat_shape);
        let nb = self.bins * self.bins;
        for (r, roi_taps) in taps.iter().enumerate() {
            let row = &dout[r * c_n * nb..][..c_n * nb];
            for c in 0..c_n {
                let plane = &mut dfeat.data[c * h * w..][..h * w];
                for (b, t) in roi_taps.iter().enumerate() {
                    let g = row[c * nb + b];
                    if g != 0.0 {
                        for &(i, wt) in t {
                            plane[i] += g * wt;
                        }
                    }
                }
            }
        }
    }
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        AdamSlot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: u32, weight_decay: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(t as i32);
        let c2 = 1.0 - B2.powi(t as i32);
        for i in 0..params.len() {
            let g = grad[i] + weight_decay * params[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

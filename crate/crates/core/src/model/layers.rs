use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Param::new(vec![0.0; len])
    }

    pub fn filled(len: usize, v: f32) -> Self {
        Param::new(vec![v; len])
    }

    fn normal(len: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        Param::new((0..len).map(|_| dist.sample(rng) as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Stride-1 convolution with zero "same" padding; odd kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout][cin][k][k]`
    pub weight: Param,
    pub bias: Param,
}

thread_local! {
    static COL: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
    static DCOL: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a thread-local scratch buffer of at least `len` elements.
fn with_scratch<R>(key: &'static std::thread::LocalKey<std::cell::RefCell<Vec<f32>>>, len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    key.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let r = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - r as isize;
                    // dst[x] = srow[x + shift]
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    dst[..lo.min(w)].iter_mut().for_each(|v| *v = 0.0);
                    if lo < hi {
                        dst[lo..hi].copy_from_slice(&srow[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    }
                    dst[hi.max(lo).min(w)..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

fn col2im(col: &[f32], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let r = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let shift = kx as isize - r as isize;
                let lo = (-shift).max(0) as usize;
                let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &row[y * w..(y + 1) * w];
                    let d = &mut drow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (a, b) in d.iter_mut().zip(&crow[lo..hi]) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

impl Conv2d {
    /// Normal initialization with standard deviation `gain / sqrt(fan_in)`.
    pub fn new(cin: usize, cout: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = (cin * k * k) as f64;
        Conv2d {
            cin,
            cout,
            k,
            weight: Param::normal(cout * cin * k * k, gain / fan_in.sqrt(), rng),
            bias: Param::zeros(cout),
        }
    }

    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.kk();
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let col_len = if self.k == 1 { 0 } else { kk * hw };
        with_scratch(&COL, col_len, |col| {
            for i in 0..x.n {
                let o = out.sample_mut(i);
                for (co, b) in self.bias.value.iter().enumerate() {
                    o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *b);
                }
                let b: &[f32] = if self.k == 1 {
                    x.sample(i)
                } else {
                    im2col(x.sample(i), self.cin, h, w, self.k, col);
                    col
                };
                gemm(self.cout, kk, hw, &self.weight.value, kk, 1, b, hw, 1, 1.0, o);
            }
        });
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.kk();
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, cin, h, w));
        let col_len = if k == 1 { 0 } else { kk * hw };
        let dcol_len = if need_dx && k != 1 { kk * hw } else { 0 };
        let (weight, bias) = (&mut self.weight, &mut self.bias);
        with_scratch(&COL, col_len, |col| {
            with_scratch(&DCOL, dcol_len, |dcol| {
                for i in 0..x.n {
                    let g = dy.sample(i);
                    for co in 0..cout {
                        bias.grad[co] += g[co * hw..(co + 1) * hw].iter().sum::<f32>();
                    }
                    let b: &[f32] = if k == 1 {
                        x.sample(i)
                    } else {
                        im2col(x.sample(i), cin, h, w, k, col);
                        col
                    };
                    // dW[cout][kk] += dY[cout][hw] * col^T[hw][kk]
                    gemm(cout, hw, kk, g, hw, 1, b, 1, hw, 1.0, &mut weight.grad);
                    if let Some(dx) = dx.as_mut() {
                        // dcol[kk][hw] = W^T[kk][cout] * dY[cout][hw]
                        if k == 1 {
                            gemm(kk, cout, hw, &weight.value, 1, kk, g, hw, 1, 0.0, dx.sample_mut(i));
                        } else {
                            gemm(kk, cout, hw, &weight.value, 1, kk, g, hw, 1, 0.0, dcol);
                            col2im(dcol, cin, h, w, k, dx.sample_mut(i));
                        }
                    }
                }
            })
        });
        dx
    }

    /// Convolution of a sparse binary input given as active `(channel, y, x)`
    /// index lists per sample. Equals [`Conv2d::forward`] on the dense 0/1
    /// tensor.
    pub fn forward_sparse(&self, active: &[Vec<u32>], h: usize, w: usize) -> Tensor {
        let (k, r, cout) = (self.k, self.k / 2, self.cout);
        let hw = h * w;
        let wt = self.weight_by_tap();
        let mut out = Tensor::zeros(active.len(), cout, h, w);
        let mut acc = vec![0f32; hw * cout];
        for (i, idx) in active.iter().enumerate() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for &a in idx {
                let a = a as usize;
                let (c, p) = (a / hw, a % hw);
                let (y, x) = (p / w, p % w);
                for ky in 0..k {
                    let oy = y as isize - ky as isize + r as isize;
                    if oy < 0 || oy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = x as isize - kx as isize + r as isize;
                        if ox < 0 || ox >= w as isize {
                            continue;
                        }
                        let src = &wt[((c * k + ky) * k + kx) * cout..][..cout];
                        let dst = &mut acc[(oy as usize * w + ox as usize) * cout..][..cout];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            let o = out.sample_mut(i);
            for co in 0..cout {
                let b = self.bias.value[co];
                let plane = &mut o[co * hw..(co + 1) * hw];
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = acc[p * cout + co] + b;
                }
            }
        }
        out
    }

    /// Parameter gradients for [`Conv2d::forward_sparse`].
    pub fn backward_sparse(&mut self, active: &[Vec<u32>], dy: &Tensor) {
        let (k, r, cout, cin) = (self.k, self.k / 2, self.cout, self.cin);
        let (h, w) = (dy.h, dy.w);
        let hw = h * w;
        let mut gt = vec![0f32; cin * k * k * cout];
        let mut dyt = vec![0f32; hw * cout];
        for (i, idx) in active.iter().enumerate() {
            let g = dy.sample(i);
            for co in 0..cout {
                self.bias.grad[co] += g[co * hw..(co + 1) * hw].iter().sum::<f32>();
                for p in 0..hw {
                    dyt[p * cout + co] = g[co * hw + p];
                }
            }
            for &a in idx {
                let a = a as usize;
                let (c, p) = (a / hw, a % hw);
                let (y, x) = (p / w, p % w);
                for ky in 0..k {
                    let oy = y as isize - ky as isize + r as isize;
                    if oy < 0 || oy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = x as isize - kx as isize + r as isize;
                        if ox < 0 || ox >= w as isize {
                            continue;
                        }
                        let src = &dyt[(oy as usize * w + ox as usize) * cout..][..cout];
                        let dst = &mut gt[((c * k + ky) * k + kx) * cout..][..cout];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        let kk = cin * k * k;
        for t in 0..kk {
            for co in 0..cout {
                self.weight.grad[co * kk + t] += gt[t * cout + co];
            }
        }
    }

    /// Weights rearranged as `[cin][k][k][cout]`.
    fn weight_by_tap(&self) -> Vec<f32> {
        let kk = self.kk();
        let mut wt = vec![0f32; kk * self.cout];
        for co in 0..self.cout {
            for t in 0..kk {
                wt[t * self.cout + co] = self.weight.value[co * kk + t];
            }
        }
        wt
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2x2 {
    pub cin: usize,
    pub cout: usize,
    /// `[cout][2][2][cin]`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2x2 {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvTranspose2x2 {
            cin,
            cout,
            weight: Param::normal(cout * 4 * cin, (2.0 / cin as f64).sqrt(), rng),
            bias: Param::zeros(cout),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let rows = self.cout * 4;
        let mut tmp = vec![0f32; rows * hw];
        let mut out = Tensor::zeros(x.n, self.cout, 2 * h, 2 * w);
        let ow = 2 * w;
        for i in 0..x.n {
            gemm(rows, self.cin, hw, &self.weight.value, self.cin, 1, x.sample(i), hw, 1, 0.0, &mut tmp);
            let o = out.sample_mut(i);
            for co in 0..self.cout {
                let b = self.bias.value[co];
                let plane = &mut o[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (a, bx) = (tap / 2, tap % 2);
                    let src = &tmp[(co * 4 + tap) * hw..][..hw];
                    for y in 0..h {
                        let drow = &mut plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                        for xx in 0..w {
                            drow[2 * xx + bx] = src[y * w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let rows = self.cout * 4;
        let ow = 2 * w;
        let mut dtmp = vec![0f32; rows * hw];
        let mut dx = Tensor::zeros(x.n, self.cin, h, w);
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                let plane = &g[co * 4 * hw..(co + 1) * 4 * hw];
                self.bias.grad[co] += plane.iter().sum::<f32>();
                for tap in 0..4 {
                    let (a, bx) = (tap / 2, tap % 2);
                    let dst = &mut dtmp[(co * 4 + tap) * hw..][..hw];
                    for y in 0..h {
                        let srow = &plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                        for xx in 0..w {
                            dst[y * w + xx] = srow[2 * xx + bx];
                        }
                    }
                }
            }
            // dW[rows][cin] += dtmp[rows][hw] * x^T[hw][cin]
            gemm(rows, hw, self.cin, &dtmp, hw, 1, x.sample(i), 1, hw, 1.0, &mut self.weight.grad);
            // dx[cin][hw] = W^T[cin][rows] * dtmp[rows][hw]
            gemm(self.cin, rows, hw, &self.weight.value, 1, self.cin, &dtmp, hw, 1, 0.0, dx.sample_mut(i));
        }
        dx
    }
}

pub const BN_EPS: f32 = 1e-3;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for i in 0..x.n {
            for c in 0..x.c {
                let s = self.gamma.value[c] / (self.running_var[c] + BN_EPS).sqrt();
                let t = self.beta.value[c] - self.running_mean[c] * s;
                out.channel_mut(i, c).iter_mut().for_each(|v| *v = *v * s + t);
            }
        }
        out
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let m = (x.n * x.plane()) as f64;
        let mut mean = vec![0f32; x.c];
        let mut var = vec![0f32; x.c];
        let mut inv_std = vec![0f32; x.c];
        for c in 0..x.c {
            let mut s = 0f64;
            for i in 0..x.n {
                s += x.channel(i, c).iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0f64;
            for i in 0..x.n {
                ss += x.channel(i, c).iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
            }
            mean[c] = mu as f32;
            var[c] = (ss / m) as f32;
            inv_std[c] = 1.0 / (var[c] + BN_EPS).sqrt();
        }
        let mut xhat = x.clone();
        let mut out = x.clone();
        for i in 0..x.n {
            for c in 0..x.c {
                let (mu, is) = (mean[c], inv_std[c]);
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                let xh = xhat.channel_mut(i, c);
                xh.iter_mut().for_each(|v| *v = (*v - mu) * is);
                for (o, &v) in out.channel_mut(i, c).iter_mut().zip(xh.iter()) {
                    *o = v * g + b;
                }
            }
        }
        (
            out,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * cache.mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * cache.var[c];
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let xh = &cache.xhat;
        let m = (dy.n * dy.plane()) as f32;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let (mut sum_dy, mut sum_dy_xh) = (0f64, 0f64);
            for i in 0..dy.n {
                for (&g, &v) in dy.channel(i, c).iter().zip(xh.channel(i, c)) {
                    sum_dy += g as f64;
                    sum_dy_xh += (g * v) as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xh as f32;
            self.beta.grad[c] += sum_dy as f32;
            let g = self.gamma.value[c];
            let scale = g * cache.inv_std[c] / m;
            let (sd, sdx) = (sum_dy as f32, sum_dy_xh as f32);
            for i in 0..dy.n {
                let d = dx.channel_mut(i, c);
                for ((o, &gy), &v) in d.iter_mut().zip(dy.channel(i, c)).zip(xh.channel(i, c)) {
                    *o = scale * (m * gy - sd - v * sdx);
                }
            }
        }
        dx
    }
}

/// 2x2 max pooling with stride 2; returns the argmax tap per output.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    let mut arg = vec![0u8; out.data.len()];
    let iw = x.w;
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(i, c);
            let base = (i * x.c + c) * h * w;
            let dst = out.channel_mut(i, c);
            for y in 0..h {
                for xx in 0..w {
                    let taps = [
                        src[2 * y * iw + 2 * xx],
                        src[2 * y * iw + 2 * xx + 1],
                        src[(2 * y + 1) * iw + 2 * xx],
                        src[(2 * y + 1) * iw + 2 * xx + 1],
                    ];
                    let mut best = 0;
                    for t in 1..4 {
                        if taps[t] > taps[best] {
                            best = t;
                        }
                    }
                    dst[y * w + xx] = taps[best];
                    arg[base + y * w + xx] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u8]) -> Tensor {
    let (h, w) = (dy.h, dy.w);
    let ow = 2 * w;
    let mut dx = Tensor::zeros(dy.n, dy.c, 2 * h, 2 * w);
    for i in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.channel(i, c);
            let base = (i * dy.c + c) * h * w;
            let d = dx.channel_mut(i, c);
            for y in 0..h {
                for xx in 0..w {
                    let t = arg[base + y * w + xx] as usize;
                    d[(2 * y + t / 2) * ow + 2 * xx + t % 2] += g[y * w + xx];
                }
            }
        }
    }
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + exp_approx(-v))
}

/// `exp(x)` by range reduction and a degree-6 polynomial; relative error
/// below 2e-7, written so the compiler can vectorize it.
#[inline(always)]
pub fn exp_approx(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // adding and removing 1.5 * 2^23 rounds to the nearest integer
    let n = (x * std::f32::consts::LOG2_E + 12_582_912.0) - 12_582_912.0;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

/// In-place softmax over channels at every pixel.
pub fn softmax_channels(x: &mut Tensor) {
    let (c, p) = (x.c, x.plane());
    let mut mx = vec![0f32; p];
    let mut sum = vec![0f32; p];
    for i in 0..x.n {
        let s = x.sample_mut(i);
        mx.copy_from_slice(&s[..p]);
        for plane in s.chunks_exact(p).skip(1) {
            for (m, &v) in mx.iter_mut().zip(plane) {
                *m = m.max(v);
            }
        }
        sum.iter_mut().for_each(|v| *v = 0.0);
        for plane in s.chunks_exact_mut(p) {
            for ((v, &m), acc) in plane.iter_mut().zip(&mx).zip(sum.iter_mut()) {
                *v = exp_approx(*v - m);
                *acc += *v;
            }
        }
        sum.iter_mut().for_each(|v| *v = 1.0 / *v);
        for plane in s.chunks_exact_mut(p).take(c) {
            for (v, &inv) in plane.iter_mut().zip(&sum) {
                *v *= inv;
            }
        }
    }
}

/// Gradient through softmax: `dz = p * (dp - sum_c p_c dp_c)`.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let p = probs.plane();
    let mut dz = Tensor::zeros(probs.n, probs.c, probs.h, probs.w);
    let mut dot = vec![0f32; p];
    for i in 0..probs.n {
        let (s, g, d) = (probs.sample(i), dprobs.sample(i), dz.sample_mut(i));
        dot.iter_mut().for_each(|v| *v = 0.0);
        for (sp, gp) in s.chunks_exact(p).zip(g.chunks_exact(p)) {
            for ((acc, &a), &b) in dot.iter_mut().zip(sp).zip(gp) {
                *acc += a * b;
            }
        }
        for ((dp, sp), gp) in d.chunks_exact_mut(p).zip(s.chunks_exact(p)).zip(g.chunks_exact(p)) {
            for (((o, &a), &b), &t) in dp.iter_mut().zip(sp).zip(gp).zip(&dot) {
                *o = a * (b - t);
            }
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // direct nested-loop convolution
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (k, r) = (conv.k as isize, conv.k as isize / 2);
        let mut out = Tensor::zeros(x.n, conv.cout, x.h, x.w);
        for i in 0..x.n {
            for co in 0..conv.cout {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - r, xx + kx - r);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * conv.cin + ci) * conv.k + ky as usize) * conv.k + kx as usize];
                                    acc += wv as f64 * x.channel(i, ci)[sy as usize * x.w + sx as usize] as f64;
                                }
                            }
                        }
                        out.channel_mut(i, co)[y as usize * x.w + xx as usize] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let mut conv = Conv2d::new(3, 4, k, 1.0, &mut rng);
            conv.bias = Param::new(vec![0.1, -0.2, 0.3, 0.0]);
            let x = rand_tensor(2, 3, 5, 7, &mut rng);
            assert!(max_abs_diff(&conv.forward(&x).data, &naive_conv(&conv, &x).data) < 1e-5);
        }
    }

    #[test]
    fn sparse_conv_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(4, 3, 3, 1.0, &mut rng);
        conv.bias = Param::new(vec![0.5, 0.0, -0.5]);
        let (h, w) = (6, 5);
        let mut x = Tensor::zeros(2, 4, h, w);
        let mut active = vec![Vec::new(), Vec::new()];
        for (i, list) in active.iter_mut().enumerate() {
            for idx in 0..4 * h * w {
                if rng.random_bool(0.2) {
                    x.sample_mut(i)[idx] = 1.0;
                    list.push(idx as u32);
                }
            }
        }
        let dense = conv.forward(&x);
        let sparse = conv.forward_sparse(&active, h, w);
        assert!(max_abs_diff(&dense.data, &sparse.data) < 1e-5);

        let dy = rand_tensor(2, 3, h, w, &mut rng);
        let mut a = conv.clone();
        let mut b = conv.clone();
        a.weight.zero_grad();
        a.bias.zero_grad();
        b.weight.zero_grad();
        b.bias.zero_grad();
        a.backward(&x, &dy, false);
        b.backward_sparse(&active, &dy);
        assert!(max_abs_diff(&a.weight.grad, &b.weight.grad) < 1e-4);
        assert!(max_abs_diff(&a.bias.grad, &b.bias.grad) < 1e-4);
    }

    // scalar objective sum(y * probe) for finite differences
    fn objective(y: &Tensor, probe: &Tensor) -> f64 {
        y.data.iter().zip(&probe.data).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, 1.0, &mut rng);
        let x = rand_tensor(2, 2, 4, 5, &mut rng);
        let probe = rand_tensor(2, 3, 4, 5, &mut rng);
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        let dx = conv.backward(&x, &probe, true).unwrap();
        let h = 1e-2f32;
        for idx in [0, 7, 20, 53] {
            let mut p = conv.clone();
            p.weight.value[idx] += h;
            let mut m = conv.clone();
            m.weight.value[idx] -= h;
            let fd = (objective(&p.forward(&x), &probe) - objective(&m.forward(&x), &probe)) / (2.0 * h as f64);
            assert!((fd - conv.weight.grad[idx] as f64).abs() < 1e-2, "w{idx}: {fd} vs {}", conv.weight.grad[idx]);
        }
        for idx in [0, 9, 33] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&conv.forward(&xp), &probe) - objective(&conv.forward(&xm), &probe)) / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 1e-2);
        }
    }

    #[test]
    fn transpose_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut up = ConvTranspose2x2::new(3, 2, &mut rng);
        up.bias = Param::new(vec![0.2, -0.1]);
        let x = rand_tensor(2, 3, 3, 4, &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        // output pixel (2y+a, 2x+b) depends only on input pixel (y, x)
        let o = y.channel(1, 1)[3 * 8 + 5];
        let mut expect = up.bias.value[1];
        for ci in 0..3 {
            expect += up.weight.value[(4 + 2 + 1) * 3 + ci] * x.channel(1, ci)[4 + 2];
        }
        assert!((o - expect).abs() < 1e-5);

        let probe = rand_tensor(2, 2, 6, 8, &mut rng);
        up.weight.zero_grad();
        up.bias.zero_grad();
        let dx = up.backward(&x, &probe);
        let h = 1e-2f32;
        for idx in [0, 5, 17] {
            let mut p = up.clone();
            p.weight.value[idx] += h;
            let mut m = up.clone();
            m.weight.value[idx] -= h;
            let fd = (objective(&p.forward(&x), &probe) - objective(&m.forward(&x), &probe)) / (2.0 * h as f64);
            assert!((fd - up.weight.grad[idx] as f64).abs() < 1e-2);
        }
        for idx in [1, 30] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&up.forward(&xp), &probe) - objective(&up.forward(&xm), &probe)) / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 1e-2);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::new(2);
        bn.gamma = Param::new(vec![1.3, 0.7]);
        bn.beta = Param::new(vec![0.1, -0.4]);
        let x = rand_tensor(2, 2, 3, 3, &mut rng);
        let probe = rand_tensor(2, 2, 3, 3, &mut rng);
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &probe);
        let h = 1e-2f32;
        for idx in [0, 4, 11, 30] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&bn.forward_train(&xp).0, &probe) - objective(&bn.forward_train(&xm).0, &probe))
                / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 2e-2, "{idx}: {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn max_pool_round_trip() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let dx = max_pool2_backward(&Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap(), &arg);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn exp_approx_matches_std() {
        let mut worst = 0f64;
        for i in 0..=20_000 {
            let x = -87.0 + i as f32 * (175.0 / 20_000.0);
            let exact = (x as f64).exp();
            worst = worst.max(((exp_approx(x) as f64) - exact).abs() / exact);
        }
        assert!(worst < 2e-7, "{worst}");
        assert_eq!(exp_approx(0.0), 1.0);
    }

    #[test]
    fn softmax_sums_to_one_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_tensor(1, 4, 2, 2, &mut rng);
        let mut p = logits.clone();
        softmax_channels(&mut p);
        for px in 0..4 {
            let s: f32 = (0..4).map(|c| p.channel(0, c)[px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let probe = rand_tensor(1, 4, 2, 2, &mut rng);
        let dz = softmax_backward(&p, &probe);
        let h = 1e-3f32;
        for idx in [0, 5, 14] {
            let mut lp = logits.clone();
            lp.data[idx] += h;
            softmax_channels(&mut lp);
            let mut lm = logits.clone();
            lm.data[idx] -= h;
            softmax_channels(&mut lm);
            let fd = (objective(&lp, &probe) - objective(&lm, &probe)) / (2.0 * h as f64);
            assert!((fd - dz.data[idx] as f64).abs() < 1e-3);
        }
    }
}

//! Differentiable layers over row-major f64 batches.
//!
//! `forward` caches what `backward` needs and accumulates parameter
//! gradients there; `infer` is the pure inference pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Param;

const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `a (m×k) · wᵀ` for `w (n×k)`.
pub(crate) fn matmul_nt(a: &[f64], m: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let oi = &mut out[i * n..(i + 1) * n];
        for (o, wo) in oi.iter_mut().zip(w.chunks_exact(k)) {
            *o = ai.iter().zip(wo).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `dw (n×k) += dyᵀ · x` for `dy (m×n)`, `x (m×k)`.
pub(crate) fn acc_tn(dy: &[f64], m: usize, n: usize, x: &[f64], k: usize, dw: &mut [f64]) {
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        for o in 0..n {
            let s = dy[i * n + o];
            if s == 0.0 {
                continue;
            }
            for (d, xv) in dw[o * k..(o + 1) * k].iter_mut().zip(xi) {
                *d += s * xv;
            }
        }
    }
}

/// `dy (m×n) · w` for `w (n×k)`.
pub(crate) fn matmul_nn(dy: &[f64], m: usize, n: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let oi = &mut out[i * k..(i + 1) * k];
        for o in 0..n {
            let s = dy[i * n + o];
            if s == 0.0 {
                continue;
            }
            for (d, wv) in oi.iter_mut().zip(&w[o * k..(o + 1) * k]) {
                *d += s * wv;
            }
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Square orthogonal matrix from the QR factorization of a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // fix column signs so the draw is uniform over O(n)
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            out[i * n + j] = q[(i, j)] * s;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: Param,
    pub b: Param,
    x: Vec<f64>,
}

impl Dense {
    pub fn new(name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            inp,
            out,
            w: Param::new(format!("{name}.weight"), uniform(rng, inp * out, bound), true),
            b: Param::new(format!("{name}.bias"), uniform(rng, out, bound), false),
            x: Vec::new(),
        }
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        let m = x.len() / self.inp;
        let mut y = matmul_nt(x, m, self.inp, &self.w.value, self.out);
        for row in y.chunks_exact_mut(self.out) {
            for (v, b) in row.iter_mut().zip(&self.b.value) {
                *v += b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        self.x = x.to_vec();
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let m = dy.len() / self.out;
        acc_tn(dy, m, self.out, &self.x, self.inp, &mut self.w.grad);
        for row in dy.chunks_exact(self.out) {
            for (g, d) in self.b.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        matmul_nn(dy, m, self.out, &self.w.value, self.inp)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn infer(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        self.mask = x.iter().map(|v| *v > 0.0).collect();
        Self::infer(x)
    }

    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        dy.iter()
            .zip(&self.mask)
            .map(|(d, m)| if *m { *d } else { 0.0 })
            .collect()
    }
}

/// 3×3 convolution, stride 1, no padding, over `(B, C, H, W)` batches.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub w: Param,
    pub b: Param,
    x: Vec<f64>,
    hw: (usize, usize),
}

pub const KERNEL: usize = 3;

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * KERNEL * KERNEL;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            w: Param::new(format!("{name}.weight"), uniform(rng, cout * fan_in, bound), true),
            b: Param::new(format!("{name}.bias"), uniform(rng, cout, bound), false),
            x: Vec::new(),
            hw: (0, 0),
        }
    }

    pub fn out_size(h: usize) -> usize {
        h + 1 - KERNEL
    }

    pub fn infer(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = (Self::out_size(h), Self::out_size(w));
        let batch = x.len() / (self.cin * h * w);
        let mut y = vec![0.0; batch * self.cout * ho * wo];
        for b in 0..batch {
            for co in 0..self.cout {
                let out = &mut y[((b * self.cout + co) * ho * wo)..((b * self.cout + co + 1) * ho * wo)];
                out.iter_mut().for_each(|v| *v = self.b.value[co]);
                for ci in 0..self.cin {
                    let plane = &x[((b * self.cin + ci) * h * w)..((b * self.cin + ci + 1) * h * w)];
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let wt = self.w.value[((co * self.cin + ci) * KERNEL + ky) * KERNEL + kx];
                            for oy in 0..ho {
                                let src = &plane[(oy + ky) * w + kx..(oy + ky) * w + kx + wo];
                                for (o, s) in out[oy * wo..(oy + 1) * wo].iter_mut().zip(src) {
                                    *o += wt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        self.x = x.to_vec();
        self.hw = (h, w);
        self.infer(x, h, w)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (h, w) = self.hw;
        let (ho, wo) = (Self::out_size(h), Self::out_size(w));
        let batch = self.x.len() / (self.cin * h * w);
        let mut dx = vec![0.0; self.x.len()];
        for b in 0..batch {
            for co in 0..self.cout {
                let g = &dy[((b * self.cout + co) * ho * wo)..((b * self.cout + co + 1) * ho * wo)];
                self.b.grad[co] += g.iter().sum::<f64>();
                for ci in 0..self.cin {
                    let off = (b * self.cin + ci) * h * w;
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let widx = ((co * self.cin + ci) * KERNEL + ky) * KERNEL + kx;
                            let wt = self.w.value[widx];
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let start = off + (oy + ky) * w + kx;
                                let grow = &g[oy * wo..(oy + 1) * wo];
                                let src = &self.x[start..start + wo];
                                acc += grow.iter().zip(src).map(|(a, s)| a * s).sum::<f64>();
                                for (d, gv) in dx[start..start + wo].iter_mut().zip(grow) {
                                    *d += wt * gv;
                                }
                            }
                            self.w.grad[widx] += acc;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

/// Per-channel batch normalization of `(B, C, H, W)` batches. Training
/// normalizes with batch statistics and updates the running averages;
/// inference uses the running averages.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    plane: usize,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![1.0; channels], false),
            beta: Param::new(format!("{name}.beta"), vec![0.0; channels], false),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![1.0; channels]),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            plane: 0,
        }
    }

    pub fn infer(&self, x: &[f64], plane: usize) -> Vec<f64> {
        let c = self.channels;
        let mut y = x.to_vec();
        for (k, chunk) in y.chunks_exact_mut(plane).enumerate() {
            let ch = k % c;
            let inv = 1.0 / (self.running_var.value[ch] + NORM_EPS).sqrt();
            let (m, g, b) = (self.running_mean.value[ch], self.gamma.value[ch], self.beta.value[ch]);
            for v in chunk {
                *v = g * (*v - m) * inv + b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &[f64], plane: usize) -> Vec<f64> {
        let c = self.channels;
        let batch = x.len() / (c * plane);
        let count = (batch * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (k, chunk) in x.chunks_exact(plane).enumerate() {
            mean[k % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (k, chunk) in x.chunks_exact(plane).enumerate() {
            let m = mean[k % c];
            var[k % c] += chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        self.inv_std = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        self.plane = plane;
        self.xhat = x.to_vec();
        let mut y = vec![0.0; x.len()];
        for (k, (xh, yc)) in self.xhat.chunks_exact_mut(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
            let ch = k % c;
            for (h, o) in xh.iter_mut().zip(yc) {
                *h = (*h - mean[ch]) * self.inv_std[ch];
                *o = self.gamma.value[ch] * *h + self.beta.value[ch];
            }
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
        }
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let plane = self.plane;
        let count = (dy.len() / c) as f64;
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for (k, (d, xh)) in dy.chunks_exact(plane).zip(self.xhat.chunks_exact(plane)).enumerate() {
            let ch = k % c;
            let g = self.gamma.value[ch];
            for (dv, h) in d.iter().zip(xh) {
                self.gamma.grad[ch] += dv * h;
                self.beta.grad[ch] += dv;
                sum_dxhat[ch] += dv * g;
                sum_dxhat_xhat[ch] += dv * g * h;
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for (k, ((o, d), xh)) in dx
            .chunks_exact_mut(plane)
            .zip(dy.chunks_exact(plane))
            .zip(self.xhat.chunks_exact(plane))
            .enumerate()
        {
            let ch = k % c;
            let g = self.gamma.value[ch];
            let scale = self.inv_std[ch] / count;
            for ((ov, dv), h) in o.iter_mut().zip(d).zip(xh) {
                *ov = scale * (count * dv * g - sum_dxhat[ch] - h * sum_dxhat_xhat[ch]);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
}

/// 2×2 max pooling, stride 2, floor on odd sizes.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    argmax: Vec<usize>,
    in_len: usize,
}

impl MaxPool2d {
    pub fn out_size(h: usize) -> usize {
        h / 2
    }

    fn run(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
        (y, arg)
    }

    pub fn infer(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
        Self::run(x, planes, h, w).0
    }

    pub fn forward(&mut self, x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
        let (y, arg) = Self::run(x, planes, h, w);
        self.argmax = arg;
        self.in_len = x.len();
        y
    }

    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_len];
        for (d, &i) in dy.iter().zip(&self.argmax) {
            dx[i] += d;
        }
        dx
    }
}

/// Normalization over the last dimension with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Param,
    pub beta: Param,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: Param::new(format!("{name}.gamma"), vec![1.0; dim], false),
            beta: Param::new(format!("{name}.beta"), vec![0.0; dim], false),
            xhat: Vec::new(),
            inv_std: Vec::new(),
        }
    }

    fn run(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv = Vec::with_capacity(x.len() / self.dim);
        for ((row, yr), hr) in x
            .chunks_exact(self.dim)
            .zip(y.chunks_exact_mut(self.dim))
            .zip(xhat.chunks_exact_mut(self.dim))
        {
            let m = row.iter().sum::<f64>() / d;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (v + NORM_EPS).sqrt();
            for j in 0..self.dim {
                hr[j] = (row[j] - m) * is;
                yr[j] = self.gamma.value[j] * hr[j] + self.beta.value[j];
            }
            inv.push(is);
        }
        (y, xhat, inv)
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        let (y, xhat, inv) = self.run(x);
        self.xhat = xhat;
        self.inv_std = inv;
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        let mut dx = vec![0.0; dy.len()];
        for (r, ((dr, hr), or)) in dy
            .chunks_exact(self.dim)
            .zip(self.xhat.chunks_exact(self.dim))
            .zip(dx.chunks_exact_mut(self.dim))
            .enumerate()
        {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for j in 0..self.dim {
                self.gamma.grad[j] += dr[j] * hr[j];
                self.beta.grad[j] += dr[j];
                let g = dr[j] * self.gamma.value[j];
                s1 += g;
                s2 += g * hr[j];
            }
            let is = self.inv_std[r];
            for j in 0..self.dim {
                let g = dr[j] * self.gamma.value[j];
                or[j] = is / d * (d * g - s1 - hr[j] * s2);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

/// Multi-head self-attention over `(B, L, d)` batches.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    seq: usize,
    cache: Option<AttnCache>,
}

#[derive(Clone, Debug)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `(B, heads, L, L)` softmax weights.
    attn: Vec<f64>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            dim,
            heads,
            q: Dense::new(&format!("{name}.q"), dim, dim, rng),
            k: Dense::new(&format!("{name}.k"), dim, dim, rng),
            v: Dense::new(&format!("{name}.v"), dim, dim, rng),
            o: Dense::new(&format!("{name}.out"), dim, dim, rng),
            seq: 0,
            cache: None,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attention weights and the concatenated head outputs.
    fn attend(&self, q: &[f64], k: &[f64], v: &[f64], seq: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, hd, nh) = (self.dim, self.head_dim(), self.heads);
        let batch = q.len() / (seq * d);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = vec![0.0; batch * nh * seq * seq];
        let mut ctx = vec![0.0; q.len()];
        for b in 0..batch {
            for h in 0..nh {
                let a = &mut attn[((b * nh + h) * seq * seq)..((b * nh + h + 1) * seq * seq)];
                for i in 0..seq {
                    let qi = &q[(b * seq + i) * d + h * hd..(b * seq + i) * d + (h + 1) * hd];
                    let row = &mut a[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let kj = &k[(b * seq + j) * d + h * hd..(b * seq + j) * d + (h + 1) * hd];
                        row[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        s += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= s);
                    let out = &mut ctx[(b * seq + i) * d + h * hd..(b * seq + i) * d + (h + 1) * hd];
                    for j in 0..seq {
                        let vj = &v[(b * seq + j) * d + h * hd..(b * seq + j) * d + (h + 1) * hd];
                        for (o, x) in out.iter_mut().zip(vj) {
                            *o += row[j] * x;
                        }
                    }
                }
            }
        }
        (attn, ctx)
    }

    /// Softmax weights `(B, heads, L, L)` for an input batch.
    pub fn weights(&self, x: &[f64], seq: usize) -> Vec<f64> {
        let (q, k, v) = (self.q.infer(x), self.k.infer(x), self.v.infer(x));
        self.attend(&q, &k, &v, seq).0
    }

    pub fn infer(&self, x: &[f64], seq: usize) -> Vec<f64> {
        let (q, k, v) = (self.q.infer(x), self.k.infer(x), self.v.infer(x));
        let ctx = self.attend(&q, &k, &v, seq).1;
        self.o.infer(&ctx)
    }

    pub fn forward(&mut self, x: &[f64], seq: usize) -> Vec<f64> {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let (attn, ctx) = self.attend(&q, &k, &v, seq);
        self.seq = seq;
        self.cache = Some(AttnCache { q, k, v, attn });
        self.o.forward(&ctx)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let dctx = self.o.backward(dy);
        let c = self.cache.take().expect("forward before backward");
        let (d, hd, nh, seq) = (self.dim, self.head_dim(), self.heads, self.seq);
        let batch = dctx.len() / (seq * d);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; dctx.len()];
        let mut dk = vec![0.0; dctx.len()];
        let mut dv = vec![0.0; dctx.len()];
        let mut da = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..nh {
                let a = &c.attn[((b * nh + h) * seq * seq)..((b * nh + h + 1) * seq * seq)];
                let col = |t: usize| (b * seq + t) * d + h * hd;
                for i in 0..seq {
                    let g = &dctx[col(i)..col(i) + hd];
                    // dA = dctx · Vᵀ, dV += Aᵀ · dctx
                    for j in 0..seq {
                        let vj = &c.v[col(j)..col(j) + hd];
                        da[j] = g.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = a[i * seq + j];
                        for (dvv, gv) in dv[col(j)..col(j) + hd].iter_mut().zip(g) {
                            *dvv += w * gv;
                        }
                    }
                    let dot: f64 = (0..seq).map(|j| da[j] * a[i * seq + j]).sum();
                    for j in 0..seq {
                        let ds = a[i * seq + j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..hd {
                            dq[col(i) + t] += ds * c.k[col(j) + t];
                            dk[col(j) + t] += ds * c.q[col(i) + t];
                        }
                    }
                }
            }
        }
        let mut dx = self.q.backward(&dq);
        for (a, b) in dx.iter_mut().zip(self.k.backward(&dk)) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.v.backward(&dv)) {
            *a += b;
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.o.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.q.params();
        v.extend(self.k.params());
        v.extend(self.v.params());
        v.extend(self.o.params());
        v
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single GRU layer over `(B, L, I)` sequences with `h₀ = 0`.
///
/// Gates follow the usual `r, z, n` order:
/// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z` likewise,
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
    cache: Option<GruCache>,
}

#[derive(Clone, Debug)]
struct GruCache {
    batch: usize,
    seq: usize,
    x: Vec<f64>,
    /// Hidden state entering each step, `(L, B, H)`.
    h_prev: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    /// `W_hn h + b_hn` per step.
    hn: Vec<Vec<f64>>,
}

impl GruLayer {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w_hh = Vec::with_capacity(3 * hidden * hidden);
        for _ in 0..3 {
            w_hh.extend(orthogonal(rng, hidden));
        }
        Self {
            input,
            hidden,
            w_ih: Param::new(format!("{name}.weight_ih"), uniform(rng, 3 * hidden * input, bound), true),
            w_hh: Param::new(format!("{name}.weight_hh"), w_hh, true),
            b_ih: Param::new(format!("{name}.bias_ih"), uniform(rng, 3 * hidden, bound), false),
            b_hh: Param::new(format!("{name}.bias_hh"), uniform(rng, 3 * hidden, bound), false),
            cache: None,
        }
    }

    fn run(&self, x: &[f64], seq: usize) -> (Vec<f64>, GruCache) {
        let (i_sz, h_sz) = (self.input, self.hidden);
        let batch = x.len() / (seq * i_sz);
        // input projections for every (b, t) at once
        let gi_all = {
            let mut g = matmul_nt(x, batch * seq, i_sz, &self.w_ih.value, 3 * h_sz);
            for row in g.chunks_exact_mut(3 * h_sz) {
                for (v, b) in row.iter_mut().zip(&self.b_ih.value) {
                    *v += b;
                }
            }
            g
        };
        let mut h = vec![0.0; batch * h_sz];
        let mut out = vec![0.0; batch * seq * h_sz];
        let mut cache = GruCache {
            batch,
            seq,
            x: x.to_vec(),
            h_prev: Vec::with_capacity(seq),
            r: Vec::with_capacity(seq),
            z: Vec::with_capacity(seq),
            n: Vec::with_capacity(seq),
            hn: Vec::with_capacity(seq),
        };
        for t in 0..seq {
            let mut gh = matmul_nt(&h, batch, h_sz, &self.w_hh.value, 3 * h_sz);
            for row in gh.chunks_exact_mut(3 * h_sz) {
                for (v, b) in row.iter_mut().zip(&self.b_hh.value) {
                    *v += b;
                }
            }
            let mut r = vec![0.0; batch * h_sz];
            let mut z = vec![0.0; batch * h_sz];
            let mut n = vec![0.0; batch * h_sz];
            let mut hn = vec![0.0; batch * h_sz];
            let mut h_new = vec![0.0; batch * h_sz];
            for b in 0..batch {
                let gi = &gi_all[(b * seq + t) * 3 * h_sz..(b * seq + t + 1) * 3 * h_sz];
                let ghb = &gh[b * 3 * h_sz..(b + 1) * 3 * h_sz];
                for j in 0..h_sz {
                    let k = b * h_sz + j;
                    r[k] = sigmoid(gi[j] + ghb[j]);
                    z[k] = sigmoid(gi[h_sz + j] + ghb[h_sz + j]);
                    hn[k] = ghb[2 * h_sz + j];
                    n[k] = (gi[2 * h_sz + j] + r[k] * hn[k]).tanh();
                    h_new[k] = (1.0 - z[k]) * n[k] + z[k] * h[k];
                    out[(b * seq + t) * h_sz + j] = h_new[k];
                }
            }
            cache.h_prev.push(std::mem::replace(&mut h, h_new));
            cache.r.push(r);
            cache.z.push(z);
            cache.n.push(n);
            cache.hn.push(hn);
        }
        (out, cache)
    }

    /// Hidden states `(B, L, H)`.
    pub fn infer(&self, x: &[f64], seq: usize) -> Vec<f64> {
        self.run(x, seq).0
    }

    pub fn forward(&mut self, x: &[f64], seq: usize) -> Vec<f64> {
        let (out, cache) = self.run(x, seq);
        self.cache = Some(cache);
        out
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let c = self.cache.take().expect("forward before backward");
        let (i_sz, h_sz, batch, seq) = (self.input, self.hidden, c.batch, c.seq);
        let mut dgi_all = vec![0.0; batch * seq * 3 * h_sz];
        let mut dh_next = vec![0.0; batch * h_sz];
        for t in (0..seq).rev() {
            let mut dgh = vec![0.0; batch * 3 * h_sz];
            let mut dh_direct = vec![0.0; batch * h_sz];
            for b in 0..batch {
                for j in 0..h_sz {
                    let k = b * h_sz + j;
                    let dh = dy[(b * seq + t) * h_sz + j] + dh_next[k];
                    let (r, z, n, hn, hp) = (c.r[t][k], c.z[t][k], c.n[t][k], c.hn[t][k], c.h_prev[t][k]);
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp - n);
                    dh_direct[k] = dh * z;
                    let dn_pre = dn * (1.0 - n * n);
                    let dr_pre = dn_pre * hn * r * (1.0 - r);
                    let dz_pre = dz * z * (1.0 - z);
                    let gi = &mut dgi_all[(b * seq + t) * 3 * h_sz..(b * seq + t + 1) * 3 * h_sz];
                    gi[j] = dr_pre;
                    gi[h_sz + j] = dz_pre;
                    gi[2 * h_sz + j] = dn_pre;
                    let gh = &mut dgh[b * 3 * h_sz..(b + 1) * 3 * h_sz];
                    gh[j] = dr_pre;
                    gh[h_sz + j] = dz_pre;
                    gh[2 * h_sz + j] = dn_pre * r;
                }
            }
            acc_tn(&dgh, batch, 3 * h_sz, &c.h_prev[t], h_sz, &mut self.w_hh.grad);
            for row in dgh.chunks_exact(3 * h_sz) {
                for (g, d) in self.b_hh.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let dh_rec = matmul_nn(&dgh, batch, 3 * h_sz, &self.w_hh.value, h_sz);
            for ((o, a), b) in dh_next.iter_mut().zip(&dh_direct).zip(&dh_rec) {
                *o = a + b;
            }
        }
        acc_tn(&dgi_all, batch * seq, 3 * h_sz, &c.x, i_sz, &mut self.w_ih.grad);
        for row in dgi_all.chunks_exact(3 * h_sz) {
            for (g, d) in self.b_ih.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        matmul_nn(&dgi_all, batch * seq, 3 * h_sz, &self.w_ih.value, i_sz)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }
}

/// Mean over the sequence axis of `(B, L, d)` batches.
pub fn mean_pool(x: &[f64], seq: usize, dim: usize) -> Vec<f64> {
    let batch = x.len() / (seq * dim);
    let mut out = vec![0.0; batch * dim];
    for b in 0..batch {
        for t in 0..seq {
            for j in 0..dim {
                out[b * dim + j] += x[(b * seq + t) * dim + j] / seq as f64;
            }
        }
    }
    out
}

pub fn mean_pool_backward(dy: &[f64], seq: usize, dim: usize) -> Vec<f64> {
    let batch = dy.len() / dim;
    let mut dx = vec![0.0; batch * seq * dim];
    for b in 0..batch {
        for t in 0..seq {
            for j in 0..dim {
                dx[(b * seq + t) * dim + j] = dy[b * dim + j] / seq as f64;
            }
        }
    }
    dx
}

/// Sinusoidal position code: `sin(i / 10000^(2j/d))` at index `2j`, the
/// matching cosine at `2j + 1`.
pub fn positional_encoding(i: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let j2 = (k - k % 2) as f64;
            let angle = i as f64 / 10000f64.powf(j2 / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

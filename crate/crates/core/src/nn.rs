//! Layers with hand-written backward passes.
//!
//! Every backward takes `Option<&mut Layer>` for parameter gradients. Frozen
//! callers pass `None`, in which case only input gradients are produced.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{matmul, matmul_at_acc, matmul_bt, softmax_in_place, Scalar, Tensor};

/// Named tensor enumeration shared by checkpoints, optimizers, and gradient
/// checks. Parameter sets double as their own gradient containers.
pub trait ParamSet<T: Scalar>: Clone {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn sum_squares(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    /// Elementwise `self += other`.
    fn accumulate(&mut self, other: &Self) {
        let theirs = other.named();
        for ((_, mine), (_, t)) in self.named_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    fn scale_all(&mut self, s: T) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }

    fn cast_params<U: Scalar, P: ParamSet<U>>(&self, target: &mut P) {
        let src = self.named();
        for ((_, dst), (_, s)) in target.named_mut().into_iter().zip(src) {
            *dst = s.cast();
        }
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn push<'a, T>(out: &mut Vec<(String, &'a T)>, prefix: &str, name: &str, t: &'a T) {
    out.push((format!("{prefix}{name}"), t));
}

fn push_mut<'a, T>(out: &mut Vec<(String, &'a mut T)>, prefix: &str, name: &str, t: &'a mut T) {
    out.push((format!("{prefix}{name}"), t));
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::with_std(input, output, (1.0 / input as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_tensor(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let mut y = matmul(x, self.weight.data(), rows, i, o);
        for r in 0..rows {
            for (v, &b) in y[r * o..(r + 1) * o].iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, grads: Option<&mut Linear<T>>) -> Vec<T> {
        let (i, o) = (self.input_dim(), self.output_dim());
        if let Some(g) = grads {
            matmul_at_acc(g.weight.data_mut(), x, dy, rows, i, o);
            let gb = g.bias.data_mut();
            for r in 0..rows {
                for (b, &d) in gb.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                    *b += d;
                }
            }
        }
        matmul_bt(dy, self.weight.data(), rows, o, i)
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_mut(out, prefix, "weight", &mut self.weight);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Tensor::zeros(&[dim]);
        gamma.fill(T::one());
        Self {
            gamma,
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim();
        let n = T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.data()[j] + self.beta.data()[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    #[allow(clippy::needless_range_loop)] // index form mirrors the derivation
    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], grads: Option<&mut LayerNorm<T>>) -> Vec<T> {
        let d = self.dim();
        let rows = cache.rstd.len();
        if let Some(g) = grads {
            for r in 0..rows {
                for j in 0..d {
                    let k = r * d + j;
                    g.gamma.data_mut()[j] += dy[k] * cache.xhat[k];
                    g.beta.data_mut()[j] += dy[k];
                }
            }
        }
        let n = T::from_f64(d as f64);
        let mut dx = vec![T::zero(); rows * d];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let mut sum = T::zero();
            let mut sum_xh = T::zero();
            for j in 0..d {
                let k = r * d + j;
                dxhat[j] = dy[k] * self.gamma.data()[j];
                sum += dxhat[j];
                sum_xh += dxhat[j] * cache.xhat[k];
            }
            let rs = cache.rstd[r];
            for j in 0..d {
                let k = r * d + j;
                dx[k] = rs / n * (n * dxhat[j] - sum - cache.xhat[k] * sum_xh);
            }
        }
        dx
    }
}

impl<T: Scalar> ParamSet<T> for LayerNorm<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        push(out, prefix, "gamma", &self.gamma);
        push(out, prefix, "beta", &self.beta);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        push_mut(out, prefix, "gamma", &mut self.gamma);
        push_mut(out, prefix, "beta", &mut self.beta);
    }
}

/// Multi-head attention. Queries come from one sequence, keys and values from
/// another (the same one for self-attention).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    rows_q: usize,
    rows_kv: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x rows_q x rows_kv`
    pub probs: Vec<T>,
    ctx: Vec<T>,
}

impl<T> AttentionCache<T> {
    pub fn rows_q(&self) -> usize {
        self.rows_q
    }
    pub fn rows_kv(&self) -> usize {
        self.rows_kv
    }
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, kv_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(heads), "model width must divide evenly into heads");
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(kv_dim, dim, rng),
            value: Linear::new(kv_dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.output_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(
        &self,
        xq: &[T],
        rows_q: usize,
        xkv: &[T],
        rows_kv: usize,
        causal: bool,
    ) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim();
        let hd = self.head_dim();
        let q = self.query.forward(xq, rows_q);
        let k = self.key.forward(xkv, rows_kv);
        let v = self.value.forward(xkv, rows_kv);
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let mut probs = vec![T::zero(); self.heads * rows_q * rows_kv];
        let mut ctx = vec![T::zero(); rows_q * d];
        let mut scores = vec![T::zero(); rows_kv];
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..rows_q {
                let qi = &q[i * d + off..i * d + off + hd];
                let visible = if causal { (i + 1).min(rows_kv) } else { rows_kv };
                for (j, s) in scores.iter_mut().enumerate().take(visible) {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    *s = acc * scale;
                }
                softmax_in_place(&mut scores[..visible]);
                let prow = &mut probs[(h * rows_q + i) * rows_kv..(h * rows_q + i + 1) * rows_kv];
                prow[..visible].copy_from_slice(&scores[..visible]);
                let ci = &mut ctx[i * d + off..i * d + off + hd];
                for (j, &p) in prow.iter().enumerate().take(visible) {
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += p * vv;
                    }
                }
            }
        }
        let out = self.output.forward(&ctx, rows_q);
        (
            out,
            AttentionCache {
                rows_q,
                rows_kv,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        xq: &[T],
        xkv: &[T],
        dout: &[T],
        mut grads: Option<&mut Attention<T>>,
    ) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let hd = self.head_dim();
        let (rq, rkv) = (cache.rows_q, cache.rows_kv);
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let dctx = self
            .output
            .backward(&cache.ctx, dout, rq, grads.as_deref_mut().map(|g| &mut g.output));
        let mut dq = vec![T::zero(); rq * d];
        let mut dk = vec![T::zero(); rkv * d];
        let mut dv = vec![T::zero(); rkv * d];
        let mut dp = vec![T::zero(); rkv];
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..rq {
                let prow = &cache.probs[(h * rq + i) * rkv..(h * rq + i + 1) * rkv];
                let dci = &dctx[i * d + off..i * d + off + hd];
                let mut dot = T::zero();
                for j in 0..rkv {
                    let vj = &cache.v[j * d + off..j * d + off + hd];
                    let mut acc = T::zero();
                    for (&a, &b) in dci.iter().zip(vj) {
                        acc += a * b;
                    }
                    dp[j] = acc;
                    dot += acc * prow[j];
                    let p = prow[j];
                    if p != T::zero() {
                        for (dvv, &g) in dv[j * d + off..j * d + off + hd].iter_mut().zip(dci) {
                            *dvv += p * g;
                        }
                    }
                }
                for j in 0..rkv {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    for t in 0..hd {
                        dq[i * d + off + t] += ds * cache.k[j * d + off + t];
                        dk[j * d + off + t] += ds * cache.q[i * d + off + t];
                    }
                }
            }
        }
        let dxq = self
            .query
            .backward(xq, &dq, rq, grads.as_deref_mut().map(|g| &mut g.query));
        let mut dxkv = self
            .key
            .backward(xkv, &dk, rkv, grads.as_deref_mut().map(|g| &mut g.key));
        let dxv = self.value.backward(xkv, &dv, rkv, grads.map(|g| &mut g.value));
        for (a, b) in dxkv.iter_mut().zip(dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

impl<T: Scalar> ParamSet<T> for Attention<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.query.tensors(&format!("{prefix}query."), out);
        self.key.tensors(&format!("{prefix}key."), out);
        self.value.tensors(&format!("{prefix}value."), out);
        self.output.tensors(&format!("{prefix}output."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.query.tensors_mut(&format!("{prefix}query."), out);
        self.key.tensors_mut(&format!("{prefix}key."), out);
        self.value.tensors_mut(&format!("{prefix}value."), out);
        self.output.tensors_mut(&format!("{prefix}output."), out);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Position-wise two-layer MLP with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(&act, rows);
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        cache: &FeedForwardCache<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        mut grads: Option<&mut FeedForward<T>>,
    ) -> Vec<T> {
        let mut dact = self
            .down
            .backward(&cache.act, dy, rows, grads.as_deref_mut().map(|g| &mut g.down));
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        self.up.backward(x, &dact, rows, grads.map(|g| &mut g.up))
    }
}

impl<T: Scalar> ParamSet<T> for FeedForward<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.up.tensors(&format!("{prefix}up."), out);
        self.down.tensors(&format!("{prefix}down."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.up.tensors_mut(&format!("{prefix}up."), out);
        self.down.tensors_mut(&format!("{prefix}down."), out);
    }
}

pub(crate) fn add_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub(crate) fn add_into<T: Scalar>(acc: &mut [T], b: &[T]) {
    for (a, &v) in acc.iter_mut().zip(b) {
        *a += v;
    }
}

use rand::Rng;

use super::{FeatureMap, Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Attentive statistics pooling.
///
/// Each frame `h_t` gets a scalar score `e_t = v . tanh(W h_t + b)`; the
/// weights `a_t = softmax(e)_t` give the pooled vector
/// `[sum a_t h_t ; sqrt(sum a_t h_t^2 - (sum a_t h_t)^2 + eps)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveStatsPool<T> {
    /// `[attention_dim, features]`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub v: Tensor<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    pub alpha: Vec<T>,
    /// tanh activations, `[frames, attention_dim]`
    pub hidden: Vec<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> AttentiveStatsPool<T> {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new<R: Rng + ?Sized>(features: usize, attention_dim: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[attention_dim, features], (1.0 / features as f64).sqrt(), rng),
            b: Tensor::zeros(&[attention_dim]),
            v: Tensor::randn(&[attention_dim], (1.0 / attention_dim as f64).sqrt(), rng),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.w.shape[1]
    }

    pub fn attention_dim(&self) -> usize {
        self.w.shape[0]
    }

    /// Pools a `features x frames` map into a vector of `2 * features`.
    pub fn forward(&self, h: &FeatureMap<T>) -> Result<(Vec<T>, PoolCache<T>)> {
        let (f, n) = (h.channels, h.len);
        if n == 0 {
            return Err(Error::InvalidInput("attentive pooling needs at least one frame".into()));
        }
        if f != self.features() {
            return Err(Error::Shape(format!("pool expects {} features, got {f}", self.features())));
        }
        let a = self.attention_dim();
        let mut hidden = vec![T::zero(); n * a];
        let mut scores = vec![T::zero(); n];
        for j in 0..a {
            let wj = &self.w.data[j * f..(j + 1) * f];
            let mut z = vec![self.b.data[j]; n];
            for (c, &wc) in wj.iter().enumerate() {
                for (zt, &x) in z.iter_mut().zip(h.row(c)) {
                    *zt += wc * x;
                }
            }
            let vj = self.v.data[j];
            for t in 0..n {
                let u = z[t].tanh();
                hidden[t * a + j] = u;
                scores[t] += vj * u;
            }
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mut alpha: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: T = alpha.iter().copied().sum();
        alpha.iter_mut().for_each(|x| *x /= total);

        let eps = T::of(self.eps);
        let mut mean = vec![T::zero(); f];
        let mut std = vec![T::zero(); f];
        for c in 0..f {
            let row = h.row(c);
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for (&al, &x) in alpha.iter().zip(row) {
                m1 += al * x;
                m2 += al * x * x;
            }
            let var = (m2 - m1 * m1).max(T::zero());
            mean[c] = m1;
            std[c] = (var + eps).sqrt();
        }
        let mut out = mean.clone();
        out.extend_from_slice(&std);
        Ok((out, PoolCache { alpha, hidden, mean, std }))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `h`.
    pub fn backward(&self, h: &FeatureMap<T>, cache: &PoolCache<T>, grad_out: &[T], grads: &mut Self) -> FeatureMap<T> {
        let (f, n, a) = (h.channels, h.len, self.attention_dim());
        let (gmean, gstd) = grad_out.split_at(f);
        let mut gh = FeatureMap::zeros(f, n);
        let mut galpha = vec![T::zero(); n];
        let two = T::of(2.0);
        for c in 0..f {
            let row = h.row(c);
            let mu = cache.mean[c];
            let sd = cache.std[c];
            let gm = gmean[c];
            let gs = gstd[c] / sd;
            let ghr = gh.row_mut(c);
            for t in 0..n {
                let x = row[t];
                let al = cache.alpha[t];
                // d std / d alpha_t = (x^2 - 2 mu x) / (2 std)
                galpha[t] += gm * x + gs * (x * x - two * mu * x) / two;
                ghr[t] += gm * al + gs * al * (x - mu);
            }
        }
        let dot: T = cache.alpha.iter().zip(&galpha).map(|(&al, &g)| al * g).sum();
        let gscore: Vec<T> = cache.alpha.iter().zip(&galpha).map(|(&al, &g)| al * (g - dot)).collect();
        for j in 0..a {
            let vj = self.v.data[j];
            let mut gz = vec![T::zero(); n];
            for t in 0..n {
                let u = cache.hidden[t * a + j];
                grads.v.data[j] += gscore[t] * u;
                gz[t] = gscore[t] * vj * (T::one() - u * u);
            }
            grads.b.data[j] += gz.iter().copied().sum::<T>();
            for c in 0..f {
                let wjc = self.w.data[j * f + c];
                let row = h.row(c);
                let mut acc = T::zero();
                let ghr = gh.row_mut(c);
                for t in 0..n {
                    acc += gz[t] * row[t];
                    ghr[t] += gz[t] * wjc;
                }
                grads.w.data[j * f + c] += acc;
            }
        }
        gh
    }
}

impl<T: Scalar> Module<T> for AttentiveStatsPool<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}w"), &self.w);
        f(format!("{prefix}b"), &self.b);
        f(format!("{prefix}v"), &self.v);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        f(&mut self.w);
        f(&mut self.b);
        f(&mut self.v);
    }
}

/// Bin `i` of an adaptive pool from `len` to `out` covers
/// `floor(i*len/out) .. ceil((i+1)*len/out)`.
fn bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive average pooling of every channel to `out` positions.
pub fn adaptive_avg_pool<T: Scalar>(x: &FeatureMap<T>, out: usize) -> FeatureMap<T> {
    let mut y = FeatureMap::zeros(x.channels, out);
    for c in 0..x.channels {
        let row = x.row(c);
        for i in 0..out {
            let (s, e) = bin(i, x.len, out);
            let sum: T = row[s..e].iter().copied().sum();
            y.data[c * out + i] = sum / T::of((e - s) as f64);
        }
    }
    y
}

pub fn adaptive_avg_pool_backward<T: Scalar>(len: usize, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
    let out = grad_out.len;
    let mut gx = FeatureMap::zeros(grad_out.channels, len);
    for c in 0..grad_out.channels {
        for i in 0..out {
            let (s, e) = bin(i, len, out);
            let g = grad_out.data[c * out + i] / T::of((e - s) as f64);
            for v in &mut gx.data[c * len + s..c * len + e] {
                *v += g;
            }
        }
    }
    gx
}

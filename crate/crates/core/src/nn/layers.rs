use rand::Rng;

use super::{FeatureMap, Module, Tensor};
use crate::scalar::{sigmoid, Scalar};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `ln(1 + x^2)`: a smooth log-energy detector.
    LogEnergy,
    /// `x * sigmoid(x)`.
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LogEnergy => (x * x).ln_1p(),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LogEnergy => (x + x) / (T::one() + x * x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn forward<T: Scalar>(self, pre: &[T]) -> Vec<T> {
        pre.iter().map(|&x| self.apply(x)).collect()
    }

    /// Multiplies `grad` in place by the derivative at `pre`.
    pub fn backward_in_place<T: Scalar>(self, pre: &[T], grad: &mut [T]) {
        for (g, &x) in grad.iter_mut().zip(pre) {
            *g *= self.derivative(x);
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LogEnergy => "log_energy",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "log_energy" => Some(Activation::LogEnergy),
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// 1-D convolution over a channel-major feature map with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[out, in, kernel]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (in_ch * kernel) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[out_ch, in_ch, kernel], std, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    /// Output length for an input of `len` samples, `None` if too short.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    /// Valid kernel tap range for output position `t`, plus the input index of tap 0.
    #[inline]
    fn taps(&self, t: usize, len: usize) -> (usize, usize, isize) {
        let start = (t * self.stride) as isize - self.padding as isize;
        let k = self.kernel() as isize;
        let lo = (-start).clamp(0, k) as usize;
        let hi = (len as isize - start).clamp(0, k) as usize;
        (lo, hi, start)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (out_ch, in_ch, k) = (self.out_channels(), self.in_channels(), self.kernel());
        assert_eq!(x.channels, in_ch, "conv input channels");
        let out_len = self.out_len(x.len).expect("input shorter than kernel");
        let mut y = FeatureMap::zeros(out_ch, out_len);
        for o in 0..out_ch {
            let b = self.bias.data[o];
            let yo = &mut y.data[o * out_len..(o + 1) * out_len];
            yo.iter_mut().for_each(|v| *v = b);
            for i in 0..in_ch {
                let w = &self.weight.data[(o * in_ch + i) * k..(o * in_ch + i + 1) * k];
                let xi = x.row(i);
                for (t, yv) in yo.iter_mut().enumerate() {
                    let (lo, hi, start) = self.taps(t, x.len);
                    if lo >= hi {
                        continue;
                    }
                    let base = (start + lo as isize) as usize;
                    let xs = &xi[base..base + (hi - lo)];
                    let ws = &w[lo..hi];
                    let mut acc = T::zero();
                    for (&a, &b) in ws.iter().zip(xs) {
                        acc += a * b;
                    }
                    *yv += acc;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Conv1d<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let (out_ch, in_ch, k) = (self.out_channels(), self.in_channels(), self.kernel());
        let out_len = grad_out.len;
        let mut gx = need_input_grad.then(|| FeatureMap::zeros(in_ch, x.len));
        for o in 0..out_ch {
            let go = grad_out.row(o);
            grads.bias.data[o] += go.iter().copied().sum::<T>();
            for i in 0..in_ch {
                let widx = (o * in_ch + i) * k;
                let xi = x.row(i);
                for (t, &g) in go.iter().enumerate().take(out_len) {
                    if g == T::zero() {
                        continue;
                    }
                    let (lo, hi, start) = self.taps(t, x.len);
                    if lo >= hi {
                        continue;
                    }
                    let base = (start + lo as isize) as usize;
                    let n = hi - lo;
                    let gw = &mut grads.weight.data[widx + lo..widx + hi];
                    for (a, &b) in gw.iter_mut().zip(&xi[base..base + n]) {
                        *a += g * b;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let w = &self.weight.data[widx + lo..widx + hi];
                        let gxi = &mut gx.data[i * x.len + base..i * x.len + base + n];
                        for (a, &b) in gxi.iter_mut().zip(w) {
                            *a += g * b;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}weight"), &self.weight);
        f(format!("{prefix}bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Affine map `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        Self {
            weight: Tensor::randn(&[out, inp], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let n = self.in_dim();
        assert_eq!(x.len(), n, "linear input dimension");
        (0..self.out_dim())
            .map(|o| {
                let w = &self.weight.data[o * n..(o + 1) * n];
                w.iter().zip(x).fold(self.bias.data[o], |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn backward(&self, x: &[T], grad_out: &[T], grads: &mut Linear<T>) -> Vec<T> {
        let n = self.in_dim();
        let mut gx = vec![T::zero(); n];
        for (o, &g) in grad_out.iter().enumerate() {
            grads.bias.data[o] += g;
            let w = &self.weight.data[o * n..(o + 1) * n];
            let gw = &mut grads.weight.data[o * n..(o + 1) * n];
            for j in 0..n {
                gw[j] += g * x[j];
                gx[j] += g * w[j];
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}weight"), &self.weight);
        f(format!("{prefix}bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

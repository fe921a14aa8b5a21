//! Backend classifier: stacked embeddings -> 1-D convolutions -> adaptive
//! average pooling -> two linear layers -> one-class softmax score.

use rand::Rng;

use crate::encoders::EmbeddingTriple;
use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, adaptive_avg_pool_backward, Activation, Conv1d, FeatureMap, Linear, Module, Tensor};
use crate::scalar::{dot, l2_norm, sigmoid, softplus, Scalar};

/// One-class softmax hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcSoftmax {
    pub alpha: f64,
    pub m_pos: f64,
    pub m_neg: f64,
}

impl Default for OcSoftmax {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            m_pos: 0.9,
            m_neg: 0.2,
        }
    }
}

impl OcSoftmax {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.m_pos > self.m_neg) {
            return Err(Error::InvalidInput(format!(
                "one-class softmax needs alpha > 0 and m_pos > m_neg, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One-class softmax loss of a single score and its derivative in the score.
///
/// Positives: `softplus(alpha (m_pos - s))`; negatives: `softplus(alpha (s - m_neg))`.
pub fn oc_softmax_loss<T: Scalar>(score: T, is_target_bonafide: bool, oc: &OcSoftmax) -> Result<(T, T)> {
    oc.validate()?;
    let alpha = T::of(oc.alpha);
    Ok(if is_target_bonafide {
        let z = alpha * (T::of(oc.m_pos) - score);
        (softplus(z), -alpha * sigmoid(z))
    } else {
        let z = alpha * (score - T::of(oc.m_neg));
        (softplus(z), alpha * sigmoid(z))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool_len: usize,
    pub hidden: usize,
    pub out: usize,
    pub oc: OcSoftmax,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 16, 8],
            kernel: 3,
            pool_len: 8,
            hidden: 32,
            out: 32,
            oc: OcSoftmax::default(),
        }
    }
}

/// Row order of the stacked backend input.
pub const STACK_ORDER: [&str; 3] = ["e_asv_enr", "e_asv_tst", "e_cm_tst"];

/// Stacks the triple into a `3 x D` map with rows `(e_asv_enr, e_asv_tst, e_cm_tst)`.
pub fn stack_embeddings<T: Scalar>(t: &EmbeddingTriple<T>) -> Result<FeatureMap<T>> {
    let d = t.e_asv_enr.len();
    if t.e_asv_tst.len() != d || t.e_cm_tst.len() != d {
        return Err(Error::Shape(format!(
            "cannot stack embeddings of sizes {d}, {}, {}",
            t.e_asv_tst.len(),
            t.e_cm_tst.len()
        )));
    }
    let mut data = Vec::with_capacity(3 * d);
    data.extend_from_slice(&t.e_asv_enr);
    data.extend_from_slice(&t.e_asv_tst);
    data.extend_from_slice(&t.e_cm_tst);
    Ok(FeatureMap { channels: 3, len: d, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backend<T> {
    pub convs: Vec<Conv1d<T>>,
    pub conv_act: Activation,
    pub pool_len: usize,
    pub fc1: Linear<T>,
    pub fc1_act: Activation,
    pub fc2: Linear<T>,
    /// One-class softmax direction; kept at unit norm between updates.
    pub w: Tensor<T>,
    pub oc: OcSoftmax,
}

#[derive(Debug, Clone)]
pub struct BackendCache<T> {
    conv_inputs: Vec<FeatureMap<T>>,
    conv_pre: Vec<FeatureMap<T>>,
    conv_out_len: usize,
    flat: Vec<T>,
    fc1_pre: Vec<T>,
    fc1_out: Vec<T>,
    rep: Vec<T>,
    score: T,
}

impl<T: Scalar> Backend<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &BackendConfig, rng: &mut R) -> Result<Self> {
        cfg.oc.validate()?;
        if cfg.conv_channels.is_empty() || cfg.kernel.is_multiple_of(2) || cfg.pool_len == 0 || cfg.hidden == 0 || cfg.out == 0 {
            return Err(Error::Config(
                "backend needs >= 1 conv layer, an odd kernel and positive sizes".into(),
            ));
        }
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &c in &cfg.conv_channels {
            convs.push(Conv1d::new(in_ch, c, cfg.kernel, 1, cfg.kernel / 2, rng));
            in_ch = c;
        }
        let mut w = Tensor::randn(&[cfg.out], 1.0, rng);
        let n = l2_norm(&w.data);
        w.data.iter_mut().for_each(|x| *x /= n);
        Ok(Self {
            convs,
            conv_act: Activation::Silu,
            pool_len: cfg.pool_len,
            fc1: Linear::new(in_ch * cfg.pool_len, cfg.hidden, rng),
            fc1_act: Activation::Silu,
            fc2: Linear::new(cfg.hidden, cfg.out, rng),
            w,
            oc: cfg.oc,
        })
    }

    /// Re-projects the one-class direction onto the unit sphere.
    pub fn normalize_direction(&mut self) {
        let n = l2_norm(&self.w.data);
        if n > T::zero() {
            self.w.data.iter_mut().for_each(|x| *x /= n);
        }
    }

    /// Final hidden representation whose cosine with `w` is the score.
    pub fn representation(&self, stacked: &FeatureMap<T>) -> Result<Vec<T>> {
        Ok(self.forward(stacked)?.1.rep)
    }

    pub fn score(&self, stacked: &FeatureMap<T>) -> Result<T> {
        Ok(self.forward(stacked)?.0)
    }

    pub fn score_triple(&self, t: &EmbeddingTriple<T>) -> Result<T> {
        self.score(&stack_embeddings(t)?)
    }

    pub fn forward(&self, stacked: &FeatureMap<T>) -> Result<(T, BackendCache<T>)> {
        if stacked.channels != 3 || stacked.len == 0 {
            return Err(Error::Shape(format!(
                "backend expects a 3 x D stack, got {} x {}",
                stacked.channels, stacked.len
            )));
        }
        let mut x = stacked.clone();
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv.forward(&x);
            let y = FeatureMap {
                channels: z.channels,
                len: z.len,
                data: self.conv_act.forward(&z.data),
            };
            conv_inputs.push(std::mem::replace(&mut x, y));
            conv_pre.push(z);
        }
        let conv_out_len = x.len;
        let flat = adaptive_avg_pool(&x, self.pool_len).data;
        let fc1_pre = self.fc1.forward(&flat);
        let fc1_out = self.fc1_act.forward(&fc1_pre);
        let rep = self.fc2.forward(&fc1_out);
        let score = cosine_score(&self.w.data, &rep);
        Ok((
            score,
            BackendCache {
                conv_inputs,
                conv_pre,
                conv_out_len,
                flat,
                fc1_pre,
                fc1_out,
                rep,
                score,
            },
        ))
    }

    /// Backpropagates `d loss / d score`; returns the gradient on the stacked input.
    pub fn backward(&self, cache: &BackendCache<T>, grad_score: T, grads: &mut Self) -> FeatureMap<T> {
        let w = &self.w.data;
        let x = &cache.rep;
        let (nw, nx) = (l2_norm(w), l2_norm(x));
        let s = cache.score;
        let g_rep: Vec<T> = (0..x.len())
            .map(|i| grad_score * (w[i] / (nw * nx) - s * x[i] / (nx * nx)))
            .collect();
        for i in 0..w.len() {
            grads.w.data[i] += grad_score * (x[i] / (nw * nx) - s * w[i] / (nw * nw));
        }
        let mut g = self.fc2.backward(&cache.fc1_out, &g_rep, &mut grads.fc2);
        self.fc1_act.backward_in_place(&cache.fc1_pre, &mut g);
        let g_flat = self.fc1.backward(&cache.flat, &g, &mut grads.fc1);
        let last_ch = self.convs.last().map_or(3, |c| c.out_channels());
        let mut gmap = adaptive_avg_pool_backward(
            cache.conv_out_len,
            &FeatureMap {
                channels: last_ch,
                len: self.pool_len,
                data: g_flat,
            },
        );
        for l in (0..self.convs.len()).rev() {
            self.conv_act.backward_in_place(&cache.conv_pre[l].data, &mut gmap.data);
            gmap = self.convs[l]
                .backward(&cache.conv_inputs[l], &gmap, &mut grads.convs[l], true)
                .expect("input gradient requested");
        }
        gmap
    }
}

fn cosine_score<T: Scalar>(w: &[T], x: &[T]) -> T {
    let d = l2_norm(w) * l2_norm(x);
    if d == T::zero() {
        T::zero()
    } else {
        (dot(w, x) / d).max(-T::one()).min(T::one())
    }
}

impl<T: Scalar> Module<T> for Backend<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}conv{i}."), f);
        }
        self.fc1.visit(&format!("{prefix}fc1."), f);
        self.fc2.visit(&format!("{prefix}fc2."), f);
        f(format!("{prefix}oc_w"), &self.w);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        for c in self.convs.iter_mut() {
            c.visit_mut(f);
        }
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        f(&mut self.w);
    }
}

/// Splits a `3 x D` stack gradient back into the triple's rows.
pub fn unstack_gradient<T: Scalar>(g: &FeatureMap<T>) -> [Vec<T>; 3] {
    [g.row(0).to_vec(), g.row(1).to_vec(), g.row(2).to_vec()]
}

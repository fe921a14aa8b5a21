//! Simplified ASV and CM sub-systems.
//!
//! Both sub-systems share the same front-end shape: a stack of strided 1-D
//! convolutions over the raw waveform, attentive statistics pooling, and
//! linear projections. The ASV sub-system emits a length-normalised speaker
//! embedding; the CM emits an embedding of the same dimension (projected from
//! its penultimate layer) and a two-way logit vector `[bona fide, spoof]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AttentiveStatsPool, Conv1d, FeatureMap, Linear, Module, PoolCache, Tensor};
use crate::scalar::{cosine, l2_norm, softplus, Scalar};

/// Front-end layout: one entry per convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontEndConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub activations: Vec<Activation>,
    pub attention_dim: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            kernels: vec![32, 3, 3],
            strides: vec![8, 2, 2],
            activations: vec![Activation::LogEnergy, Activation::Silu, Activation::Silu],
            attention_dim: 16,
        }
    }
}

impl FrontEndConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n || self.activations.len() != n {
            return Err(Error::Config(
                "front-end channels, kernels, strides and activations must have equal non-zero length".into(),
            ));
        }
        if self.channels.iter().chain(&self.kernels).chain(&self.strides).any(|&v| v == 0) || self.attention_dim == 0 {
            return Err(Error::Config("front-end sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn out_features(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

/// Shapes of both sub-systems. The embedding dimension is shared, so the
/// ASV and CM embeddings always agree in size.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemConfig {
    pub embed_dim: usize,
    pub asv: FrontEndConfig,
    pub cm: FrontEndConfig,
    pub cm_hidden: usize,
}

impl Default for SubsystemConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            asv: FrontEndConfig::default(),
            cm: FrontEndConfig::default(),
            cm_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv1d<T>>,
    pub activations: Vec<Activation>,
}

#[derive(Debug, Clone)]
pub struct StackCache<T> {
    inputs: Vec<FeatureMap<T>>,
    pre: Vec<FeatureMap<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &FrontEndConfig, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let mut layers = Vec::new();
        for i in 0..cfg.channels.len() {
            layers.push(Conv1d::new(in_ch, cfg.channels[i], cfg.kernels[i], cfg.strides[i], 0, rng));
            in_ch = cfg.channels[i];
        }
        Self {
            layers,
            activations: cfg.activations.clone(),
        }
    }

    /// Shortest signal that yields at least one output frame.
    pub fn min_len(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |need, l| (need - 1) * l.stride + l.kernel() - 2 * l.padding)
    }

    pub fn forward(&self, signal: &[T]) -> Result<(FeatureMap<T>, StackCache<T>)> {
        if signal.len() < self.min_len() {
            return Err(Error::InvalidInput(format!(
                "signal of {} samples is shorter than the minimum {}",
                signal.len(),
                self.min_len()
            )));
        }
        let mut x = FeatureMap::from_signal(signal);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(&x);
            let y = FeatureMap {
                channels: z.channels,
                len: z.len,
                data: act.forward(&z.data),
            };
            inputs.push(std::mem::replace(&mut x, y));
            pre.push(z);
        }
        Ok((x, StackCache { inputs, pre }))
    }

    pub fn backward(&self, cache: &StackCache<T>, grad_out: FeatureMap<T>, grads: &mut Self) {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            self.activations[l].backward_in_place(&cache.pre[l].data, &mut g.data);
            let gx = self.layers[l].backward(&cache.inputs[l], &g, &mut grads.layers[l], l > 0);
            match gx {
                Some(gx) => g = gx,
                None => break,
            }
        }
    }
}

impl<T: Scalar> Module<T> for ConvStack<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}conv{i}."), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        for l in self.layers.iter_mut() {
            l.visit_mut(f);
        }
    }
}

/// Pre-training head of the ASV sub-system: a softmax speaker classifier
/// plus the scale `w` and bias `b` of the angular prototypical term.
#[derive(Debug, Clone, PartialEq)]
pub struct AsvHead<T> {
    pub classifier: Linear<T>,
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> AsvHead<T> {
    pub const INITIAL_SCALE: f64 = 10.0;
    pub const MIN_SCALE: f64 = 1e-3;

    pub fn new<R: Rng + ?Sized>(embed_dim: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            classifier: Linear::new(embed_dim, n_classes, rng),
            scale: Tensor::from_vec(&[1], vec![T::of(Self::INITIAL_SCALE)]),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn clamp_scale(&mut self) {
        let min = T::of(Self::MIN_SCALE);
        if self.scale.data[0] < min {
            self.scale.data[0] = min;
        }
    }
}

impl<T: Scalar> Module<T> for AsvHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.classifier.visit(&format!("{prefix}classifier."), f);
        f(format!("{prefix}ap_scale"), &self.scale);
        f(format!("{prefix}ap_bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        self.classifier.visit_mut(f);
        f(&mut self.scale);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsvEncoder<T> {
    pub stack: ConvStack<T>,
    pub pool: AttentiveStatsPool<T>,
    pub proj: Linear<T>,
    pub head: AsvHead<T>,
}

#[derive(Debug, Clone)]
pub struct AsvCache<T> {
    stack: StackCache<T>,
    frames: FeatureMap<T>,
    pool: PoolCache<T>,
    pooled: Vec<T>,
    raw: Vec<T>,
    embedding: Vec<T>,
}

impl<T: Scalar> AsvEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SubsystemConfig, n_speakers: usize, rng: &mut R) -> Result<Self> {
        cfg.asv.validate()?;
        let f = cfg.asv.out_features();
        Ok(Self {
            stack: ConvStack::new(&cfg.asv, rng),
            pool: AttentiveStatsPool::new(f, cfg.asv.attention_dim, rng),
            proj: Linear::new(2 * f, cfg.embed_dim, rng),
            head: AsvHead::new(cfg.embed_dim, n_speakers.max(1), rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn min_len(&self) -> usize {
        self.stack.min_len()
    }

    /// Length-normalised speaker embedding.
    pub fn embed(&self, signal: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(signal)?.0)
    }

    pub fn forward(&self, signal: &[T]) -> Result<(Vec<T>, AsvCache<T>)> {
        let (frames, stack) = self.stack.forward(signal)?;
        let (pooled, pool) = self.pool.forward(&frames)?;
        let raw = self.proj.forward(&pooled);
        let n = l2_norm(&raw);
        let embedding: Vec<T> = raw.iter().map(|&x| x / n).collect();
        Ok((
            embedding.clone(),
            AsvCache {
                stack,
                frames,
                pool,
                pooled,
                raw,
                embedding,
            },
        ))
    }

    /// Backpropagates a gradient on the normalised embedding.
    pub fn backward(&self, cache: &AsvCache<T>, grad_embedding: &[T], grads: &mut Self) {
        let n = l2_norm(&cache.raw);
        let y = &cache.embedding;
        let proj = y.iter().zip(grad_embedding).fold(T::zero(), |a, (&yi, &gi)| a + yi * gi);
        let g_raw: Vec<T> = grad_embedding.iter().zip(y).map(|(&g, &yi)| (g - yi * proj) / n).collect();
        let g_pooled = self.proj.backward(&cache.pooled, &g_raw, &mut grads.proj);
        let g_frames = self.pool.backward(&cache.frames, &cache.pool, &g_pooled, &mut grads.pool);
        self.stack.backward(&cache.stack, g_frames, &mut grads.stack);
    }
}

impl<T: Scalar> Module<T> for AsvEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.stack.visit(&format!("{prefix}frontend."), f);
        self.pool.visit(&format!("{prefix}pool."), f);
        self.proj.visit(&format!("{prefix}proj."), f);
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        self.stack.visit_mut(f);
        self.pool.visit_mut(f);
        self.proj.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmEncoder<T> {
    pub stack: ConvStack<T>,
    pub pool: AttentiveStatsPool<T>,
    pub hidden: Linear<T>,
    pub hidden_act: Activation,
    /// `[bona fide, spoof]` logits from the penultimate representation.
    pub logits: Linear<T>,
    /// Projection of the penultimate representation to the shared embedding dimension.
    pub embed: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmOutput<T> {
    pub embedding: Vec<T>,
    pub logits: [T; 2],
}

impl<T: Scalar> CmOutput<T> {
    /// CM score: the bona fide logit (higher means more bona fide).
    pub fn score(&self) -> T {
        self.logits[0]
    }
}

#[derive(Debug, Clone)]
pub struct CmCache<T> {
    stack: StackCache<T>,
    frames: FeatureMap<T>,
    pool: PoolCache<T>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> CmEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SubsystemConfig, rng: &mut R) -> Result<Self> {
        cfg.cm.validate()?;
        if cfg.cm_hidden == 0 || cfg.embed_dim == 0 {
            return Err(Error::Config("CM hidden and embedding sizes must be positive".into()));
        }
        let f = cfg.cm.out_features();
        Ok(Self {
            stack: ConvStack::new(&cfg.cm, rng),
            pool: AttentiveStatsPool::new(f, cfg.cm.attention_dim, rng),
            hidden: Linear::new(2 * f, cfg.cm_hidden, rng),
            hidden_act: Activation::Silu,
            logits: Linear::new(cfg.cm_hidden, 2, rng),
            embed: Linear::new(cfg.cm_hidden, cfg.embed_dim, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_dim()
    }

    pub fn min_len(&self) -> usize {
        self.stack.min_len()
    }

    pub fn run(&self, signal: &[T]) -> Result<CmOutput<T>> {
        Ok(self.forward(signal)?.0)
    }

    pub fn forward(&self, signal: &[T]) -> Result<(CmOutput<T>, CmCache<T>)> {
        let (frames, stack) = self.stack.forward(signal)?;
        let (pooled, pool) = self.pool.forward(&frames)?;
        let hidden_pre = self.hidden.forward(&pooled);
        let hidden = self.hidden_act.forward(&hidden_pre);
        let l = self.logits.forward(&hidden);
        let embedding = self.embed.forward(&hidden);
        Ok((
            CmOutput {
                embedding,
                logits: [l[0], l[1]],
            },
            CmCache {
                stack,
                frames,
                pool,
                pooled,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Backpropagates gradients on the embedding and/or the logits.
    pub fn backward(&self, cache: &CmCache<T>, grad_embedding: Option<&[T]>, grad_logits: Option<[T; 2]>, grads: &mut Self) {
        let mut g_hidden = vec![T::zero(); cache.hidden.len()];
        if let Some(ge) = grad_embedding {
            let g = self.embed.backward(&cache.hidden, ge, &mut grads.embed);
            g_hidden.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let Some(gl) = grad_logits {
            let g = self.logits.backward(&cache.hidden, &gl, &mut grads.logits);
            g_hidden.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        self.hidden_act.backward_in_place(&cache.hidden_pre, &mut g_hidden);
        let g_pooled = self.hidden.backward(&cache.pooled, &g_hidden, &mut grads.hidden);
        let g_frames = self.pool.backward(&cache.frames, &cache.pool, &g_pooled, &mut grads.pool);
        self.stack.backward(&cache.stack, g_frames, &mut grads.stack);
    }
}

impl<T: Scalar> Module<T> for CmEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.stack.visit(&format!("{prefix}frontend."), f);
        self.pool.visit(&format!("{prefix}pool."), f);
        self.hidden.visit(&format!("{prefix}hidden."), f);
        self.logits.visit(&format!("{prefix}logits."), f);
        self.embed.visit(&format!("{prefix}embed."), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor<T>)) {
        self.stack.visit_mut(f);
        self.pool.visit_mut(f);
        self.hidden.visit_mut(f);
        self.logits.visit_mut(f);
        self.embed.visit_mut(f);
    }
}

/// The backend's input: enrolment and test ASV embeddings plus the test CM embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTriple<T> {
    pub e_asv_enr: Vec<T>,
    pub e_asv_tst: Vec<T>,
    pub e_cm_tst: Vec<T>,
}

impl<T: Scalar> EmbeddingTriple<T> {
    pub fn new(e_asv_enr: Vec<T>, e_asv_tst: Vec<T>, e_cm_tst: Vec<T>) -> Result<Self> {
        let d = e_asv_enr.len();
        if e_asv_tst.len() != d || e_cm_tst.len() != d {
            return Err(Error::Shape(format!(
                "embedding dimensions differ: {d}, {}, {}",
                e_asv_tst.len(),
                e_cm_tst.len()
            )));
        }
        Ok(Self {
            e_asv_enr,
            e_asv_tst,
            e_cm_tst,
        })
    }

    pub fn dim(&self) -> usize {
        self.e_asv_enr.len()
    }
}

/// Loss value plus gradients with respect to each input embedding.
#[derive(Debug, Clone)]
pub struct AsvLoss<T> {
    pub loss: T,
    pub softmax_term: T,
    pub prototypical_term: T,
    pub grad_embeddings: Vec<Vec<T>>,
}

/// Softmax cross-entropy plus angular prototypical loss, equally weighted.
///
/// `embeddings` holds `N >= 2` speakers times two utterances, laid out as
/// `[anchor_0, positive_0, anchor_1, positive_1, ...]`; `labels[i]` is the
/// classifier index of speaker `i`. The prototypical term scores every
/// anchor against every positive with `S_ij = w cos(a_i, p_j) + b` and
/// applies softmax cross-entropy with target `j = i`; the softmax term is the
/// mean classifier cross-entropy over all `2N` embeddings. Head gradients are
/// accumulated into `head_grads`.
pub fn asv_pretrain_loss<T: Scalar>(
    embeddings: &[Vec<T>],
    labels: &[usize],
    head: &AsvHead<T>,
    head_grads: &mut AsvHead<T>,
) -> Result<AsvLoss<T>> {
    if !embeddings.len().is_multiple_of(2) || embeddings.len() / 2 != labels.len() {
        return Err(Error::InvalidInput(
            "angular prototypical batch must be N speakers x 2 utterances".into(),
        ));
    }
    let n = labels.len();
    if n < 2 {
        return Err(Error::InvalidInput("angular prototypical batch needs at least 2 speakers".into()));
    }
    let classes = head.classifier.out_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside {classes} classes")));
    }
    let mut grad_embeddings = vec![vec![T::zero(); embeddings[0].len()]; embeddings.len()];

    // softmax classifier term
    let m = T::of(embeddings.len() as f64);
    let mut softmax_term = T::zero();
    for (k, e) in embeddings.iter().enumerate() {
        let y = labels[k / 2];
        let z = head.classifier.forward(e);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        softmax_term += (lse - z[y]) / m;
        let gz: Vec<T> = z
            .iter()
            .enumerate()
            .map(|(c, &v)| ((v - lse).exp() - if c == y { T::one() } else { T::zero() }) / m)
            .collect();
        let ge = head.classifier.backward(e, &gz, &mut head_grads.classifier);
        grad_embeddings[k].iter_mut().zip(ge).for_each(|(a, b)| *a += b);
    }

    // angular prototypical term
    let w = head.scale.data[0];
    let b = head.bias.data[0];
    let nf = T::of(n as f64);
    let mut prototypical_term = T::zero();
    for i in 0..n {
        let a = &embeddings[2 * i];
        let cos_row: Vec<T> = (0..n).map(|j| cosine(a, &embeddings[2 * j + 1])).collect();
        let s: Vec<T> = cos_row.iter().map(|&c| w * c + b).collect();
        let max = s.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + s.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        prototypical_term += (lse - s[i]) / nf;
        for j in 0..n {
            let gs = ((s[j] - lse).exp() - if i == j { T::one() } else { T::zero() }) / nf;
            head_grads.scale.data[0] += gs * cos_row[j];
            head_grads.bias.data[0] += gs;
            let gc = gs * w;
            let p = &embeddings[2 * j + 1];
            let (na, np) = (l2_norm(a), l2_norm(p));
            let c = cos_row[j];
            for d in 0..a.len() {
                grad_embeddings[2 * i][d] += gc * (p[d] / (na * np) - c * a[d] / (na * na));
                grad_embeddings[2 * j + 1][d] += gc * (a[d] / (na * np) - c * p[d] / (np * np));
            }
        }
    }
    Ok(AsvLoss {
        loss: softmax_term + prototypical_term,
        softmax_term,
        prototypical_term,
        grad_embeddings,
    })
}

/// Class index of a CM target: 0 for bona fide, 1 for spoof.
pub fn cm_class(is_spoofed: bool) -> usize {
    usize::from(is_spoofed)
}

/// Weighted cross-entropy over CM logits.
///
/// Returns `mean_i weight[y_i] * -log softmax(logits_i)[y_i]` and the
/// gradient with respect to every logit pair.
pub fn cm_pretrain_loss<T: Scalar>(logits: &[[T; 2]], spoofed: &[bool], class_weights: [T; 2]) -> Result<(T, Vec<[T; 2]>)> {
    if class_weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::InvalidInput("class weights must be positive".into()));
    }
    if logits.len() != spoofed.len() || logits.is_empty() {
        return Err(Error::InvalidInput("logits and labels must be non-empty and aligned".into()));
    }
    let b = T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &sp) in logits.iter().zip(spoofed) {
        let y = cm_class(sp);
        let w = class_weights[y];
        // -log softmax(l)[y] = softplus(l[other] - l[y])
        let margin = l[1 - y] - l[y];
        loss += w * softplus(margin) / b;
        let p_other = crate::scalar::sigmoid(margin);
        let mut g = [T::zero(); 2];
        g[1 - y] = w * p_other / b;
        g[y] = -w * p_other / b;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Inverse class frequency weights `n / (2 n_c)` for (bona fide, spoof).
pub fn inverse_frequency_weights(n_bonafide: usize, n_spoofed: usize) -> Result<[f64; 2]> {
    if n_bonafide == 0 || n_spoofed == 0 {
        return Err(Error::InvalidInput("both classes must be present".into()));
    }
    let n = (n_bonafide + n_spoofed) as f64;
    Ok([n / (2.0 * n_bonafide as f64), n / (2.0 * n_spoofed as f64)])
}

//! Sub-system pre-training and SASV training in fixed and joint modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;

use crate::backend::{oc_softmax_loss, stack_embeddings, unstack_gradient, Backend, BackendConfig};
use crate::bundle::ModelBundle;
use crate::encoders::{
    asv_pretrain_loss, cm_pretrain_loss, inverse_frequency_weights, AsvEncoder, CmEncoder, EmbeddingTriple,
    SubsystemConfig,
};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, evaluate, roc_auc, EmbeddingCache, EvalReport, ScoreRecord, UtteranceSource};
use crate::nn::{Adam, Linear, Module};
use crate::protocol::{sample_batch, GroupRoles, TrialPair, TrialPool, TrialType};
use crate::rng;
use crate::scalar::{cosine, Scalar};
use crate::synth::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainingCondition {
    /// In-domain training data only.
    Base,
    /// In-domain plus every auxiliary utterance.
    BaseAux,
    /// In-domain plus auxiliary bona fide speech; auxiliary spoofs never enter a batch.
    BaseAuxBonafide,
}

impl TrainingCondition {
    pub const ALL: [TrainingCondition; 3] = [
        TrainingCondition::Base,
        TrainingCondition::BaseAux,
        TrainingCondition::BaseAuxBonafide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingCondition::Base => "base",
            TrainingCondition::BaseAux => "base_aux",
            TrainingCondition::BaseAuxBonafide => "base_aux_bf",
        }
    }

    pub fn uses_aux(self) -> bool {
        self != TrainingCondition::Base
    }

    /// Roles auxiliary utterances may play under this condition.
    pub fn aux_roles(self, aux_enrolment: bool) -> Option<GroupRoles> {
        match self {
            TrainingCondition::Base => None,
            TrainingCondition::BaseAux => Some(GroupRoles {
                enrol: aux_enrolment,
                bonafide_test: true,
                spoofed_test: true,
            }),
            TrainingCondition::BaseAuxBonafide => Some(GroupRoles {
                enrol: aux_enrolment,
                bonafide_test: true,
                spoofed_test: false,
            }),
        }
    }
}

impl fmt::Display for TrainingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition `{s}` (base, base_aux, base_aux_bf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OptimisationMode {
    /// Frozen sub-systems; only the backend trains, on the fixed profile.
    Fixed,
    /// Everything trains end to end, on the joint profile.
    Joint,
}

impl OptimisationMode {
    pub const ALL: [OptimisationMode; 2] = [OptimisationMode::Fixed, OptimisationMode::Joint];

    pub fn name(self) -> &'static str {
        match self {
            OptimisationMode::Fixed => "fixed",
            OptimisationMode::Joint => "joint",
        }
    }

    pub fn profile(self) -> crate::protocol::ProportionProfile {
        match self {
            OptimisationMode::Fixed => crate::protocol::ProportionProfile::FIXED,
            OptimisationMode::Joint => crate::protocol::ProportionProfile::JOINT,
        }
    }
}

impl fmt::Display for OptimisationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimisationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (fixed, joint)")))
    }
}

/// SASV training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Rate for the ASV and CM sub-systems in joint mode.
    pub subsystem_learning_rate: f64,
    pub batch_size: usize,
    pub n_seeds: usize,
    pub batches_per_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many epochs (the selected epoch is always kept).
    pub checkpoint_every: usize,
    /// Auxiliary bona fide utterances may serve as enrolment.
    pub aux_enrolment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 5e-5,
            subsystem_learning_rate: 5e-5,
            batch_size: 20,
            n_seeds: 5,
            batches_per_epoch: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1,
            aux_enrolment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.n_seeds == 0 {
            return bad("train epochs, batch size, batches per epoch and seed count must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint cadence must be positive");
        }
        if !(self.learning_rate > 0.0 && self.subsystem_learning_rate >= 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    fn adam<T: Scalar>(&self, lr: f64) -> Adam<T> {
        let mut a = Adam::new(lr);
        a.beta1 = T::of(self.adam_beta1);
        a.beta2 = T::of(self.adam_beta2);
        a.eps = T::of(self.adam_eps);
        a
    }
}

/// Hyperparameters of one pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Speakers per batch (two utterances each) for ASV; utterances per batch for CM.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// CM only: also train the embedding projection, through a discarded
    /// linear probe on the embedding that shares the weighted CE objective.
    pub train_embedding: bool,
}

impl PretrainConfig {
    pub fn asv_default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 50,
            batch_size: 16,
            learning_rate: 3e-3,
            train_embedding: false,
        }
    }

    pub fn cm_default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 50,
            batch_size: 32,
            learning_rate: 3e-3,
            train_embedding: true,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "{what} pre-training needs a positive batch size, batch count and learning rate"
            )));
        }
        Ok(())
    }
}

/// Sums per-item gradients in item order, so the result does not depend on
/// how the parallel map was scheduled.
fn ordered_sum<T: Scalar, M: Module<T>>(parts: Vec<M>, init: M) -> M {
    parts.into_iter().fold(init, |mut acc, g| {
        acc.add_assign(&g);
        acc
    })
}

/// Pre-trains the ASV encoder with the softmax plus angular prototypical
/// objective. Zero epochs return the initial parameters.
pub fn pretrain_asv<T: Scalar>(
    corpus: &Corpus<T>,
    sub: &SubsystemConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<AsvEncoder<T>> {
    cfg.validate("ASV")?;
    let speakers = corpus.speaker_ids();
    let by_speaker: Vec<Vec<usize>> = speakers
        .iter()
        .map(|s| {
            (0..corpus.len())
                .filter(|&i| !corpus.utterances[i].is_spoofed && &corpus.utterances[i].speaker_id == s)
                .collect()
        })
        .collect();
    let usable: Vec<usize> = (0..speakers.len()).filter(|&s| by_speaker[s].len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::InvalidCorpus(format!(
            "{}: ASV pre-training needs at least 2 speakers with 2 bona fide utterances each",
            corpus.name
        )));
    }
    let mut model = AsvEncoder::new(sub, speakers.len(), &mut rng::stream(seed, "asv-init", 0))?;
    let mut opt: Adam<T> = Adam::new(cfg.learning_rate);
    let mut r = rng::stream(seed, "asv-batches", 0);
    let per_batch = cfg.batch_size.clamp(2, usable.len());
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let chosen: Vec<usize> = usable.choose_multiple(&mut r, per_batch).copied().collect();
            let mut items = Vec::with_capacity(2 * per_batch);
            for &s in &chosen {
                let pair: Vec<usize> = by_speaker[s].choose_multiple(&mut r, 2).copied().collect();
                items.extend(pair);
            }
            let labels: Vec<usize> = chosen.clone();
            let fwd = items
                .par_iter()
                .map(|&i| model.forward(&corpus.utterances[i].signal))
                .collect::<Result<Vec<_>>>()?;
            let embeddings: Vec<Vec<T>> = fwd.iter().map(|(e, _)| e.clone()).collect();
            let mut grads = model.zeros_like();
            let out = asv_pretrain_loss(&embeddings, &labels, &model.head, &mut grads.head)?;
            total += out.loss.as_f64();
            let parts: Vec<AsvEncoder<T>> = fwd
                .par_iter()
                .zip(&out.grad_embeddings)
                .map(|((_, cache), g)| {
                    let mut gi = model.zeros_like();
                    model.backward(cache, g, &mut gi);
                    gi
                })
                .collect();
            let grads = ordered_sum(parts, grads);
            opt.update(&mut model, &grads);
            model.head.clamp_scale();
        }
        log::info!(
            "asv pretrain epoch {}: loss {:.4}",
            epoch + 1,
            total / cfg.batches_per_epoch as f64
        );
    }
    Ok(model)
}

/// Pre-trains the CM encoder with class-weighted cross-entropy.
/// Zero epochs return the initial parameters.
pub fn pretrain_cm<T: Scalar>(
    corpus: &Corpus<T>,
    sub: &SubsystemConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<CmEncoder<T>> {
    cfg.validate("CM")?;
    let (nb, ns) = (corpus.n_bonafide(), corpus.n_spoofed());
    let w = inverse_frequency_weights(nb, ns)
        .map_err(|_| Error::InvalidCorpus(format!("{}: CM pre-training needs bona fide and spoofed data", corpus.name)))?;
    let weights = [T::of(w[0]), T::of(w[1])];
    let mut model = CmEncoder::new(sub, &mut rng::stream(seed, "cm-init", 0))?;
    let mut probe: Linear<T> = Linear::new(sub.embed_dim, 2, &mut rng::stream(seed, "cm-probe", 0));
    let mut opt: Adam<T> = Adam::new(cfg.learning_rate);
    let mut opt_probe: Adam<T> = Adam::new(cfg.learning_rate);
    let mut r = rng::stream(seed, "cm-batches", 0);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let items: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..corpus.len())).collect();
            let fwd = items
                .par_iter()
                .map(|&i| model.forward(&corpus.utterances[i].signal))
                .collect::<Result<Vec<_>>>()?;
            let logits: Vec<[T; 2]> = fwd.iter().map(|(o, _)| o.logits).collect();
            let spoofed: Vec<bool> = items.iter().map(|&i| corpus.utterances[i].is_spoofed).collect();
            let (loss, glogits) = cm_pretrain_loss(&logits, &spoofed, weights)?;
            total += loss.as_f64();
            let mut g_probe = probe.zeros_like();
            let g_emb: Vec<Option<Vec<T>>> = if cfg.train_embedding {
                let plogits: Vec<[T; 2]> = fwd
                    .iter()
                    .map(|(o, _)| {
                        let p = probe.forward(&o.embedding);
                        [p[0], p[1]]
                    })
                    .collect();
                let (ploss, gp) = cm_pretrain_loss(&plogits, &spoofed, weights)?;
                total += ploss.as_f64();
                fwd.iter()
                    .zip(&gp)
                    .map(|((o, _), g)| Some(probe.backward(&o.embedding, g, &mut g_probe)))
                    .collect()
            } else {
                vec![None; fwd.len()]
            };
            let parts: Vec<CmEncoder<T>> = fwd
                .par_iter()
                .zip(&glogits)
                .zip(&g_emb)
                .map(|(((_, cache), g), ge)| {
                    let mut gi = model.zeros_like();
                    model.backward(cache, ge.as_deref(), Some(*g), &mut gi);
                    gi
                })
                .collect();
            let grads = ordered_sum(parts, model.zeros_like());
            opt.update(&mut model, &grads);
            if cfg.train_embedding {
                opt_probe.update(&mut probe, &g_probe);
            }
        }
        log::info!(
            "cm pretrain epoch {}: loss {:.4}",
            epoch + 1,
            total / cfg.batches_per_epoch as f64
        );
    }
    Ok(model)
}

/// SV-EER (fraction) of cosine scoring over every pair of bona fide
/// utterances in `corpus`.
pub fn holdout_sv_eer<T: Scalar>(asv: &AsvEncoder<T>, corpus: &Corpus<T>) -> Result<f64> {
    let bona: Vec<&crate::synth::Utterance<T>> = corpus.utterances.iter().filter(|u| !u.is_spoofed).collect();
    let emb = bona.par_iter().map(|u| asv.embed(&u.signal)).collect::<Result<Vec<_>>>()?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..bona.len() {
        for j in i + 1..bona.len() {
            let s = cosine(&emb[i], &emb[j]);
            if bona[i].speaker_id == bona[j].speaker_id {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    Ok(compute_eer(&pos, &neg)?.0)
}

/// SPF-EER (fraction) and AUC of the bona fide logit over `corpus`.
pub fn holdout_spf<T: Scalar>(cm: &CmEncoder<T>, corpus: &Corpus<T>) -> Result<(f64, f64)> {
    let scores = corpus
        .utterances
        .par_iter()
        .map(|u| Ok((cm.run(&u.signal)?.score(), u.is_spoofed)))
        .collect::<Result<Vec<_>>>()?;
    let pos: Vec<T> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let neg: Vec<T> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    Ok((compute_eer(&pos, &neg)?.0, roc_auc(&pos, &neg)?))
}

/// Training and development material of one SASV run.
pub struct SasvData<'a, T> {
    pub base: &'a Corpus<T>,
    pub aux: Option<&'a Corpus<T>>,
    pub dev: &'a Corpus<T>,
    pub dev_trials: &'a [TrialPair],
    /// Embeddings of the frozen pre-trained sub-systems, shared between
    /// fixed-mode runs; computed on demand when absent.
    pub frozen: Option<&'a EmbeddingCache<T>>,
}

impl<T: Scalar> SasvData<'_, T> {
    fn sources(&self) -> Vec<&Corpus<T>> {
        let mut v = vec![self.base];
        v.extend(self.aux);
        v.push(self.dev);
        v
    }
}

/// Trial pool of a condition: the base corpus plus, when the condition asks
/// for it, the auxiliary corpus with the condition's roles.
pub fn build_pool<T: Scalar>(
    base: &Corpus<T>,
    aux: Option<&Corpus<T>>,
    condition: TrainingCondition,
    aux_enrolment: bool,
) -> Result<TrialPool> {
    let mut pool = TrialPool::new();
    pool.add_group(&base.pool_utterances(), GroupRoles::ALL);
    if let Some(roles) = condition.aux_roles(aux_enrolment) {
        let aux = aux.ok_or_else(|| {
            Error::Config(format!("condition {condition} needs an auxiliary corpus, none was provided"))
        })?;
        pool.add_group(&aux.pool_utterances(), roles);
    }
    Ok(pool)
}

/// Index (1-based) of the epoch with the lowest dev full-system SASV-EER;
/// the earlier epoch wins ties. `None` for an empty list.
pub fn select_model(dev_sasv_eers: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in dev_sasv_eers.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// What one SASV epoch produced; handed to the per-epoch callback.
pub struct EpochRecord<'a, T> {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub bundle: &'a ModelBundle<T>,
    pub dev_scores: &'a [ScoreRecord<T>],
    pub dev_report: &'a EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Bundle of the selected epoch.
    pub bundle: ModelBundle<T>,
    /// 1-based selected epoch.
    pub selected_epoch: usize,
    pub dev_reports: Vec<EvalReport>,
    pub epoch_losses: Vec<f64>,
    /// Squared gradient norms of (ASV, CM, backend) on the first batch.
    pub first_batch_grad_sq_norms: [f64; 3],
}

/// Per-trial loss and gradient of the OC objective; only the backend part
/// of the bundle-shaped gradient is filled in fixed mode.
fn trial_gradient<T: Scalar, S: UtteranceSource<T> + Sync + ?Sized>(
    bundle: &ModelBundle<T>,
    trial: &TrialPair,
    mode: OptimisationMode,
    source: &S,
    frozen: &EmbeddingCache<T>,
) -> Result<(T, ModelBundle<T>)> {
    let target = trial.trial_type == TrialType::T1;
    let mut g = bundle.zeros_like();
    match mode {
        OptimisationMode::Fixed => {
            let missing = |id: &str| Error::MissingUtterance(id.to_string());
            let e_enr = frozen.asv.get(&trial.enrol_id).ok_or_else(|| missing(&trial.enrol_id))?;
            let e_tst = frozen.asv.get(&trial.test_id).ok_or_else(|| missing(&trial.test_id))?;
            let c = frozen.cm.get(&trial.test_id).ok_or_else(|| missing(&trial.test_id))?;
            let triple = EmbeddingTriple::new(e_enr.clone(), e_tst.clone(), c.embedding.clone())?;
            let (score, cache) = bundle.backend.forward(&stack_embeddings(&triple)?)?;
            let (loss, dl) = oc_softmax_loss(score, target, &bundle.backend.oc)?;
            bundle.backend.backward(&cache, dl, &mut g.backend);
            Ok((loss, g))
        }
        OptimisationMode::Joint => {
            let fetch = |id: &str| source.signal(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
            let (e_enr, c_enr) = bundle.asv.forward(fetch(&trial.enrol_id)?)?;
            let (e_tst, c_tst) = bundle.asv.forward(fetch(&trial.test_id)?)?;
            let (cm_out, c_cm) = bundle.cm.forward(fetch(&trial.test_id)?)?;
            let triple = EmbeddingTriple::new(e_enr, e_tst, cm_out.embedding)?;
            let (score, cache) = bundle.backend.forward(&stack_embeddings(&triple)?)?;
            let (loss, dl) = oc_softmax_loss(score, target, &bundle.backend.oc)?;
            let gstack = bundle.backend.backward(&cache, dl, &mut g.backend);
            let [g_enr, g_tst, g_cm] = unstack_gradient(&gstack);
            bundle.asv.backward(&c_enr, &g_enr, &mut g.asv);
            bundle.asv.backward(&c_tst, &g_tst, &mut g.asv);
            bundle.cm.backward(&c_cm, Some(&g_cm), None, &mut g.cm);
            Ok((loss, g))
        }
    }
}

/// Dev scores and report of `bundle`; fixed mode reuses the frozen
/// sub-system embeddings.
fn dev_evaluation<T: Scalar>(
    bundle: &ModelBundle<T>,
    mode: OptimisationMode,
    data: &SasvData<'_, T>,
    frozen: &EmbeddingCache<T>,
) -> Result<(Vec<ScoreRecord<T>>, EvalReport)> {
    let scores = match mode {
        OptimisationMode::Fixed => data
            .dev_trials
            .par_iter()
            .map(|t| frozen.score(bundle, t))
            .collect::<Result<Vec<_>>>()?,
        OptimisationMode::Joint => crate::eval::score_trials(bundle, data.dev_trials, data.dev)?,
    };
    let report = evaluate(&scores)?;
    Ok((scores, report))
}

/// Frozen embeddings for every utterance of `corpora` (ASV for all, CM for all).
pub fn frozen_cache<T: Scalar>(
    asv: &AsvEncoder<T>,
    cm: &CmEncoder<T>,
    corpora: &[&Corpus<T>],
) -> Result<EmbeddingCache<T>> {
    let mut cache = EmbeddingCache::empty();
    for c in corpora {
        let ids: Vec<&str> = c.utterances.iter().map(|u| u.id.as_str()).collect();
        cache.extend(asv, cm, &ids, &ids, *c)?;
    }
    Ok(cache)
}

/// Trains one SASV model. Fixed mode leaves `asv` and `cm` untouched and
/// trains only the backend; joint mode updates all three. Every epoch is
/// evaluated on the dev trials and passed to `on_epoch`; the returned
/// bundle is the one of the selected epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_sasv<T: Scalar>(
    asv: &AsvEncoder<T>,
    cm: &CmEncoder<T>,
    backend_cfg: &BackendConfig,
    mode: OptimisationMode,
    condition: TrainingCondition,
    data: &SasvData<'_, T>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord<'_, T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let pool = build_pool(data.base, data.aux, condition, cfg.aux_enrolment)?;
    let backend = Backend::new(backend_cfg, &mut rng::stream(seed, "backend-init", 0))?;
    let mut bundle = ModelBundle::new(asv.clone(), cm.clone(), backend)?;
    bundle.manifest.insert("mode".into(), mode.name().into());
    bundle.manifest.insert("condition".into(), condition.name().into());
    bundle.manifest.insert("seed".into(), seed.to_string());

    let sources = data.sources();
    let source: &[&Corpus<T>] = &sources;
    let owned_frozen;
    let frozen: &EmbeddingCache<T> = match (mode, data.frozen) {
        (OptimisationMode::Joint, _) => {
            owned_frozen = EmbeddingCache::empty();
            &owned_frozen
        }
        (OptimisationMode::Fixed, Some(f)) => f,
        (OptimisationMode::Fixed, None) => {
            owned_frozen = frozen_cache(asv, cm, &sources)?;
            &owned_frozen
        }
    };

    let mut opt_asv: Adam<T> = cfg.adam(cfg.subsystem_learning_rate);
    let mut opt_cm: Adam<T> = cfg.adam(cfg.subsystem_learning_rate);
    let mut opt_backend: Adam<T> = cfg.adam(cfg.learning_rate);
    let mut batch_rng = rng::stream(seed, "sasv-batches", 0);
    let profile = mode.profile();
    let inv_batch = T::one() / T::of(cfg.batch_size as f64);

    let mut dev_reports = Vec::with_capacity(cfg.epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelBundle<T>)> = None;
    let mut first_norms = [0.0; 3];
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = sample_batch(&pool, &profile, cfg.batch_size, &mut batch_rng)?;
            let parts = batch
                .par_iter()
                .map(|t| trial_gradient(&bundle, t, mode, source, frozen))
                .collect::<Result<Vec<_>>>()?;
            let mut loss = T::zero();
            let mut grads = bundle.zeros_like();
            for (l, g) in &parts {
                loss += *l;
                grads.add_assign(g);
            }
            grads.scale(inv_batch);
            total += (loss * inv_batch).as_f64();
            if epoch == 1 && b == 0 {
                first_norms = [
                    grads.asv.sq_norm().as_f64(),
                    grads.cm.sq_norm().as_f64(),
                    grads.backend.sq_norm().as_f64(),
                ];
            }
            opt_backend.update(&mut bundle.backend, &grads.backend);
            bundle.backend.normalize_direction();
            if mode == OptimisationMode::Joint {
                opt_asv.update(&mut bundle.asv, &grads.asv);
                opt_cm.update(&mut bundle.cm, &grads.cm);
            }
        }
        let mean_loss = total / cfg.batches_per_epoch as f64;
        if !bundle.is_finite() {
            return Err(Error::InvalidInput(format!("training diverged at epoch {epoch}")));
        }
        let (dev_scores, report) = dev_evaluation(&bundle, mode, data, frozen)?;
        log::info!(
            "{mode}/{condition} seed {seed} epoch {epoch}: loss {mean_loss:.4}, dev SASV-EER {:.2}%",
            report.full.sasv
        );
        on_epoch(&EpochRecord {
            epoch,
            mean_loss,
            bundle: &bundle,
            dev_scores: &dev_scores,
            dev_report: &report,
        })?;
        if best.as_ref().is_none_or(|(v, _, _)| report.full.sasv < *v) {
            best = Some((report.full.sasv, epoch, bundle.clone()));
        }
        dev_reports.push(report);
        epoch_losses.push(mean_loss);
    }
    let (_, selected_epoch, mut selected) = best.expect("at least one epoch");
    debug_assert_eq!(
        select_model(&dev_reports.iter().map(|r| r.full.sasv).collect::<Vec<_>>()),
        Some(selected_epoch)
    );
    selected.manifest.insert("selected_epoch".into(), selected_epoch.to_string());
    Ok(TrainOutcome {
        bundle: selected,
        selected_epoch,
        dev_reports,
        epoch_losses,
        first_batch_grad_sq_norms: first_norms,
    })
}

/// Samples a dev/eval trial list with every type present.
pub fn sample_eval_trials<T: Scalar>(
    corpus: &Corpus<T>,
    counts: [usize; 4],
    seed: u64,
) -> Result<Vec<TrialPair>> {
    let mut pool = TrialPool::new();
    pool.add_group(&corpus.pool_utterances(), GroupRoles::ALL);
    let mut r = rng::stream(seed, "eval-trials", 0);
    let mut trials = pool.sample_counts(counts, crate::protocol::Uniqueness::Pairs, &mut r)?;
    trials.shuffle(&mut r);
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_model_examples() {
        assert_eq!(select_model(&[5.0, 3.2, 4.1]), Some(2));
        assert_eq!(select_model(&[3.0, 3.0]), Some(1));
        assert_eq!(select_model(&[7.0]), Some(1));
        assert_eq!(select_model(&[]), None);
    }

    #[test]
    fn names_round_trip() {
        for c in TrainingCondition::ALL {
            assert_eq!(c.name().parse::<TrainingCondition>().unwrap(), c);
        }
        for m in OptimisationMode::ALL {
            assert_eq!(m.name().parse::<OptimisationMode>().unwrap(), m);
        }
        assert!("aux".parse::<TrainingCondition>().is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.n_seeds), (20, 20, 5));
        assert_eq!(c.learning_rate, 5e-5);
    }
}

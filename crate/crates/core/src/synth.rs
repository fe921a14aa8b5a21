//! Deterministic synthetic corpora standing in for the bona fide / spoofed
//! training partitions.
//!
//! Signal model: every speaker owns a resonance vector (`K` centre
//! frequencies followed by `K` gains). A bona fide utterance is white noise
//! passed through the FIR filter those resonances define, with a small
//! per-session jitter on the frequencies. A spoofed utterance uses the target
//! speaker's resonances linearly blended toward the attack's resonances by
//! `1 - quality`, plus an attack-specific narrow-band artefact whose level
//! falls as quality rises. Finally a domain colouring (spectral tilt and a
//! noise floor, both scaled by `domain_shift`) is applied and the result is
//! squashed with `tanh(gain * x)` into (-1, 1).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::protocol::PoolUtterance;
use crate::rng;
use crate::scalar::Scalar;

/// Constants of the signal model shared by every corpus of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalModel {
    pub n_resonances: usize,
    pub filter_taps: usize,
    /// Per-sample decay of each resonance's impulse response.
    pub decay: f64,
    pub freq_range: (f64, f64),
    pub gain_range: (f64, f64),
    /// Std of per-session jitter on resonance frequencies (cycles/sample).
    pub session_jitter: f64,
    /// Minimum Euclidean distance between two speakers' resonance vectors.
    pub min_speaker_distance: f64,
    /// Artefact level at quality 0.
    pub artefact_level: f64,
    /// Fraction of the artefact removed at quality 1.
    pub artefact_quality_coupling: f64,
    pub artefact_bandwidth: f64,
    pub tilt: f64,
    pub noise_floor: f64,
    pub output_gain: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        Self {
            n_resonances: 4,
            filter_taps: 48,
            decay: 0.88,
            freq_range: (0.03, 0.42),
            gain_range: (0.3, 1.0),
            session_jitter: 0.006,
            min_speaker_distance: 0.05,
            artefact_level: 1.5,
            artefact_quality_coupling: 0.7,
            artefact_bandwidth: 0.96,
            tilt: 0.8,
            noise_floor: 0.3,
            output_gain: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub name: String,
    pub n_speakers: usize,
    pub n_bonafide: usize,
    /// Zero together with `n_attacks == 0` produces a bona fide only corpus.
    pub n_spoofed: usize,
    pub n_attacks: usize,
    /// Seed of the attack bank the corpus draws its attacks from.
    pub attack_bank: u64,
    /// First attack index used within the bank; attacks are
    /// `attack_offset .. attack_offset + n_attacks`.
    pub attack_offset: usize,
    pub domain_id: String,
    pub domain_shift: f64,
    pub attack_quality_range: (f64, f64),
    pub signal_length: usize,
    pub seed: u64,
    pub signal: SignalModel,
}

impl CorpusSpec {
    /// In-domain base training corpus: the 20-speaker / 6-attack partition
    /// with every count divided by `scale`.
    pub fn base_like(name: &str, scale: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            n_speakers: 20,
            n_bonafide: 2580 / scale,
            n_spoofed: 22800 / scale,
            n_attacks: 6,
            attack_bank: 1,
            attack_offset: 0,
            domain_id: "base".into(),
            domain_shift: 0.0,
            attack_quality_range: (0.3, 1.0),
            signal_length: 1600,
            seed,
            signal: SignalModel::default(),
        }
    }

    /// Domain-shifted auxiliary corpus: 40 speakers, 8 attacks, counts divided by `scale`.
    pub fn aux_like(name: &str, scale: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            n_speakers: 40,
            n_bonafide: 3200 / scale,
            n_spoofed: 25600 / scale,
            n_attacks: 8,
            attack_bank: 2,
            attack_offset: 0,
            domain_id: "aux".into(),
            domain_shift: 1.0,
            attack_quality_range: (0.3, 1.0),
            signal_length: 1600,
            seed,
            signal: SignalModel::default(),
        }
    }

    pub fn is_bonafide_only(&self) -> bool {
        self.n_spoofed == 0 && self.n_attacks == 0
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCorpus(format!("{}: {m}", self.name)));
        if self.n_speakers < 2 {
            return bad(format!(
                "need at least 2 speakers for non-target trials, got {}",
                self.n_speakers
            ));
        }
        if self.n_bonafide < self.n_speakers {
            return bad("every speaker needs at least one bona fide utterance".into());
        }
        if !self.is_bonafide_only() {
            if self.n_attacks == 0 || self.n_spoofed == 0 {
                return bad("spoofed utterances and attacks must both be positive".into());
            }
            if self.n_spoofed < self.n_speakers {
                return bad("every speaker needs at least one spoofed utterance".into());
            }
        }
        let (lo, hi) = self.attack_quality_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("attack quality range {lo}..{hi} not within [0,1]"));
        }
        if self.domain_shift < 0.0 || !self.domain_shift.is_finite() {
            return bad("domain shift must be finite and non-negative".into());
        }
        if self.signal_length < self.signal.filter_taps {
            return bad("signal shorter than the synthesis filter".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerLatent {
    pub speaker_id: String,
    /// `K` resonance frequencies followed by `K` gains.
    pub resonance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSignature {
    pub attack_id: String,
    pub resonance: Vec<f64>,
    pub artefact_freq: f64,
}

impl AttackSignature {
    /// Attack `index` of the bank seeded by `bank`. Deterministic.
    pub fn from_bank(bank: u64, index: usize, model: &SignalModel) -> Self {
        let mut r = rng::stream(bank, "attack", index as u64);
        let resonance = random_resonance(model, &mut r);
        let (lo, hi) = model.freq_range;
        Self {
            attack_id: format!("A{bank}{index:02}"),
            resonance,
            artefact_freq: r.random_range(lo..hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<T> {
    pub id: String,
    /// Claimed speaker: the true speaker for bona fide speech, the target for spoofs.
    pub speaker_id: String,
    pub signal: Vec<T>,
    pub is_spoofed: bool,
    pub attack_id: Option<String>,
    pub domain_id: String,
}

/// What the generator did to produce an utterance; not persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrace {
    /// Resonance vector the signal was coloured with, before session jitter.
    pub speaker_feature: Vec<f64>,
    pub quality: Option<f64>,
    pub artefact_amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus<T> {
    pub name: String,
    pub signal_length: usize,
    pub utterances: Vec<Utterance<T>>,
    /// Empty for corpora loaded from disk.
    pub speakers: Vec<SpeakerLatent>,
    /// Parallel to `utterances`; empty for corpora loaded from disk.
    pub traces: Vec<SynthTrace>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Corpus<T> {
    pub fn new(name: String, signal_length: usize, utterances: Vec<Utterance<T>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if u.signal.len() != signal_length {
                return Err(Error::InvalidCorpus(format!(
                    "{}: utterance {} has {} samples, expected {signal_length}",
                    name,
                    u.id,
                    u.signal.len()
                )));
            }
            if index.insert(u.id.clone(), i).is_some() {
                return Err(Error::InvalidCorpus(format!("{name}: duplicate id {}", u.id)));
            }
        }
        Ok(Self {
            name,
            signal_length,
            utterances,
            speakers: Vec::new(),
            traces: Vec::new(),
            index,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Utterance<T>> {
        self.index.get(id).map(|&i| &self.utterances[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_bonafide(&self) -> usize {
        self.utterances.iter().filter(|u| !u.is_spoofed).count()
    }

    pub fn n_spoofed(&self) -> usize {
        self.utterances.iter().filter(|u| u.is_spoofed).count()
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for u in &self.utterances {
            if !ids.contains(&u.speaker_id) {
                ids.push(u.speaker_id.clone());
            }
        }
        ids
    }

    pub fn pool_utterances(&self) -> Vec<PoolUtterance> {
        self.utterances
            .iter()
            .map(|u| PoolUtterance {
                id: u.id.clone(),
                speaker_id: u.speaker_id.clone(),
                is_spoofed: u.is_spoofed,
            })
            .collect()
    }

    pub fn meta_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.meta"))
    }

    pub fn signal_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.f32"))
    }

    /// Writes `<name>.meta` (one `id speaker_id is_spoofed attack_id domain_id`
    /// line per utterance, `-` for no attack) and `<name>.f32` (signals as
    /// little-endian f32, concatenated in metadata order).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Self::meta_path(dir, &self.name);
        let bin = Self::signal_path(dir, &self.name);
        let mut m = String::new();
        m.push_str(&format!("# signal_length {}\n", self.signal_length));
        for u in &self.utterances {
            m.push_str(&format!(
                "{} {} {} {} {}\n",
                u.id,
                u.speaker_id,
                u.is_spoofed as u8,
                u.attack_id.as_deref().unwrap_or("-"),
                u.domain_id
            ));
        }
        std::fs::write(&meta, m).map_err(|e| Error::io(&meta, e))?;
        let f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(f);
        for u in &self.utterances {
            for &x in &u.signal {
                w.write_all(&x.as_f32().to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&bin, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta = Self::meta_path(dir, name);
        let bin = Self::signal_path(dir, name);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let mut signal_length = None;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let perr = |message: String| Error::Parse {
                path: meta.clone(),
                line: i + 1,
                message,
            };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("signal_length") {
                    let v = it.next().and_then(|s| s.parse().ok());
                    signal_length = Some(v.ok_or_else(|| perr("bad signal_length".into()))?);
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(perr(format!("expected 5 fields, found {}", f.len())));
            }
            let is_spoofed = match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(perr(format!("bad spoof flag `{other}`"))),
            };
            let attack_id = (f[3] != "-").then(|| f[3].to_string());
            if is_spoofed != attack_id.is_some() {
                return Err(perr("spoof flag and attack id disagree".into()));
            }
            rows.push((f[0].to_string(), f[1].to_string(), is_spoofed, attack_id, f[4].to_string()));
        }
        let signal_length = signal_length.ok_or_else(|| Error::Parse {
            path: meta.clone(),
            line: 1,
            message: "missing `# signal_length` header".into(),
        })?;
        let mut bytes = Vec::new();
        std::fs::File::open(&bin)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != rows.len() * signal_length * 4 {
            return Err(Error::InvalidCorpus(format!(
                "{}: expected {} bytes, found {}",
                bin.display(),
                rows.len() * signal_length * 4,
                bytes.len()
            )));
        }
        let utterances = rows
            .into_iter()
            .enumerate()
            .map(|(i, (id, speaker_id, is_spoofed, attack_id, domain_id))| {
                let chunk = &bytes[i * signal_length * 4..(i + 1) * signal_length * 4];
                let signal = chunk
                    .chunks_exact(4)
                    .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                    .collect();
                Utterance {
                    id,
                    speaker_id,
                    signal,
                    is_spoofed,
                    attack_id,
                    domain_id,
                }
            })
            .collect();
        Corpus::new(name.to_string(), signal_length, utterances)
    }
}

fn random_resonance<R: Rng + ?Sized>(model: &SignalModel, r: &mut R) -> Vec<f64> {
    let (flo, fhi) = model.freq_range;
    let (glo, ghi) = model.gain_range;
    let k = model.n_resonances;
    let mut v = Vec::with_capacity(2 * k);
    for _ in 0..k {
        v.push(r.random_range(flo..fhi));
    }
    for _ in 0..k {
        v.push(r.random_range(glo..ghi));
    }
    v
}

/// Draws `n` speaker latents whose resonance vectors are pairwise farther
/// apart than `model.min_speaker_distance`.
pub fn speaker_latents(prefix: &str, n: usize, seed: u64, model: &SignalModel) -> Vec<SpeakerLatent> {
    let mut r = rng::stream(seed, "speakers", 0);
    let mut out: Vec<SpeakerLatent> = Vec::with_capacity(n);
    while out.len() < n {
        let cand = random_resonance(model, &mut r);
        let far = out.iter().all(|s| {
            let d2: f64 = s.resonance.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() > model.min_speaker_distance
        });
        if far {
            out.push(SpeakerLatent {
                speaker_id: format!("{prefix}-s{:03}", out.len()),
                resonance: cand,
            });
        }
    }
    out
}

/// Unit-energy impulse response of a resonance vector.
pub fn resonance_filter(resonance: &[f64], model: &SignalModel) -> Vec<f64> {
    let k = resonance.len() / 2;
    let mut h: Vec<f64> = (0..model.filter_taps)
        .map(|n| {
            let env = model.decay.powi(n as i32);
            (0..k)
                .map(|j| resonance[k + j] * env * (2.0 * PI * resonance[j] * n as f64).cos())
                .sum()
        })
        .collect();
    let e = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if e > 0.0 {
        h.iter_mut().for_each(|x| *x /= e);
    }
    h
}

fn filtered_noise<R: Rng + ?Sized>(h: &[f64], len: usize, r: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..len + h.len() - 1).map(|_| StandardNormal.sample(r)).collect();
    (0..len)
        .map(|n| h.iter().enumerate().map(|(k, &c)| c * noise[n + h.len() - 1 - k]).sum())
        .collect()
}

/// Domain colouring: first-order spectral tilt `x[n] - shift*tilt*x[n-1]`
/// plus a white noise floor of std `shift*noise_floor` drawn from `noise`.
/// The identity when `shift == 0`.
pub fn domain_colouring<R: Rng + ?Sized>(x: &[f64], shift: f64, model: &SignalModel, noise: &mut R) -> Vec<f64> {
    let a = shift * model.tilt;
    let s = shift * model.noise_floor;
    let mut prev = 0.0;
    x.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(noise);
            let y = v - a * prev + s * e;
            prev = v;
            y
        })
        .collect()
}

/// Output squashing applied after colouring: `tanh(gain * x)`.
pub fn squash(x: f64, model: &SignalModel) -> f64 {
    (model.output_gain * x).tanh()
}

/// Inverse of [`squash`].
pub fn unsquash(y: f64, model: &SignalModel) -> f64 {
    y.atanh() / model.output_gain
}

/// Noise stream used by the domain colouring of utterance `index`.
pub fn domain_noise_stream(corpus_seed: u64, index: usize) -> rng::Rng {
    rng::stream(corpus_seed, "domain", index as u64)
}

/// Synthesises the pre-colouring signal of one utterance.
///
/// Returns the raw (uncoloured, unsquashed) signal and the generator trace.
pub fn synth_raw<R: Rng + ?Sized>(
    latent: &SpeakerLatent,
    attack: Option<&AttackSignature>,
    quality: f64,
    signal_length: usize,
    model: &SignalModel,
    r: &mut R,
) -> Result<(Vec<f64>, SynthTrace)> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::InvalidInput(format!("quality {quality} outside [0,1]")));
    }
    let feature: Vec<f64> = match attack {
        None => latent.resonance.clone(),
        Some(a) => latent
            .resonance
            .iter()
            .zip(&a.resonance)
            .map(|(s, t)| quality * s + (1.0 - quality) * t)
            .collect(),
    };
    let k = model.n_resonances;
    let mut session = feature.clone();
    for f in session.iter_mut().take(k) {
        let j: f64 = StandardNormal.sample(r);
        *f += model.session_jitter * j;
    }
    let h = resonance_filter(&session, model);
    let mut x = filtered_noise(&h, signal_length, r);
    let mut artefact_amplitude = 0.0;
    if let Some(a) = attack {
        artefact_amplitude = model.artefact_level * (1.0 - model.artefact_quality_coupling * quality);
        // narrow-band noise: a single sharp resonance at the attack's frequency
        let band = resonance_filter(
            &[a.artefact_freq, 1.0],
            &SignalModel {
                decay: model.artefact_bandwidth,
                ..model.clone()
            },
        );
        let art = filtered_noise(&band, signal_length, r);
        for (xi, ai) in x.iter_mut().zip(&art) {
            *xi += artefact_amplitude * ai;
        }
    }
    Ok((
        x,
        SynthTrace {
            speaker_feature: feature,
            quality: attack.map(|_| quality),
            artefact_amplitude,
        },
    ))
}

/// Synthesises one finished utterance (coloured and squashed).
#[allow(clippy::too_many_arguments)]
pub fn synth_utterance<T: Scalar, R: Rng + ?Sized>(
    id: String,
    latent: &SpeakerLatent,
    attack: Option<&AttackSignature>,
    quality: f64,
    domain_id: &str,
    domain_shift: f64,
    signal_length: usize,
    model: &SignalModel,
    rng: &mut R,
    domain_noise: &mut R,
) -> Result<(Utterance<T>, SynthTrace)> {
    let (raw, trace) = synth_raw(latent, attack, quality, signal_length, model, rng)?;
    let coloured = domain_colouring(&raw, domain_shift, model, domain_noise);
    let signal = coloured.iter().map(|&v| T::of(squash(v, model))).collect();
    Ok((
        Utterance {
            id,
            speaker_id: latent.speaker_id.clone(),
            signal,
            is_spoofed: attack.is_some(),
            attack_id: attack.map(|a| a.attack_id.clone()),
            domain_id: domain_id.to_string(),
        },
        trace,
    ))
}

/// Splits `n` items over `k` owners as evenly as possible.
fn balanced_counts(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

pub fn generate_corpus<T: Scalar>(spec: &CorpusSpec) -> Result<Corpus<T>> {
    spec.validate()?;
    let model = &spec.signal;
    let speakers = speaker_latents(&spec.name, spec.n_speakers, spec.seed, model);
    let attacks: Vec<AttackSignature> = (0..spec.n_attacks)
        .map(|i| AttackSignature::from_bank(spec.attack_bank, spec.attack_offset + i, model))
        .collect();

    struct Job {
        id: String,
        speaker: usize,
        attack: Option<usize>,
    }
    let mut jobs = Vec::with_capacity(spec.n_bonafide + spec.n_spoofed);
    for (s, &n) in balanced_counts(spec.n_bonafide, spec.n_speakers).iter().enumerate() {
        for u in 0..n {
            jobs.push(Job {
                id: format!("{}-b{u:04}", speakers[s].speaker_id),
                speaker: s,
                attack: None,
            });
        }
    }
    let mut attack_counter = 0usize;
    if !spec.is_bonafide_only() {
        for (s, &n) in balanced_counts(spec.n_spoofed, spec.n_speakers).iter().enumerate() {
            for u in 0..n {
                jobs.push(Job {
                    id: format!("{}-p{u:04}", speakers[s].speaker_id),
                    speaker: s,
                    attack: Some(attack_counter % spec.n_attacks),
                });
                attack_counter += 1;
            }
        }
    }

    let (qlo, qhi) = spec.attack_quality_range;
    let made: Vec<Result<(Utterance<T>, SynthTrace)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let mut r = rng::stream(spec.seed, "utterance", i as u64);
            let mut dn = domain_noise_stream(spec.seed, i);
            let quality = if qhi > qlo { r.random_range(qlo..=qhi) } else { qlo };
            synth_utterance(
                job.id.clone(),
                &speakers[job.speaker],
                job.attack.map(|a| &attacks[a]),
                quality,
                &spec.domain_id,
                spec.domain_shift,
                spec.signal_length,
                model,
                &mut r,
                &mut dn,
            )
        })
        .collect();
    let mut utterances = Vec::with_capacity(made.len());
    let mut traces = Vec::with_capacity(made.len());
    for m in made {
        let (u, t) = m?;
        utterances.push(u);
        traces.push(t);
    }
    let mut corpus = Corpus::new(spec.name.clone(), spec.signal_length, utterances)?;
    corpus.speakers = speakers;
    corpus.traces = traces;
    Ok(corpus)
}

//! Experiment configuration as flat `section.key = value` text.
//!
//! `#` starts a comment line. Every key is optional on input (missing keys
//! keep their defaults) but unknown keys are rejected. [`ExperimentConfig::to_text`]
//! writes every key, so a snapshot reparses to an equal configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backend::BackendConfig;
use crate::encoders::{FrontEndConfig, SubsystemConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::synth::{CorpusSpec, SignalModel};
use crate::training::{PretrainConfig, TrainConfig};

/// Trial counts per type of the dev and eval protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub dev_counts: [usize; 4],
    pub eval_counts: [usize; 4],
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            dev_counts: [150, 150, 150, 50],
            eval_counts: [300, 300, 300, 100],
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Seed of sub-system pre-training (shared by every SASV run).
    pub pretrain_seed: u64,
    pub signal: SignalModel,
    pub asv_pretrain: CorpusSpec,
    pub base_train: CorpusSpec,
    pub base_dev: CorpusSpec,
    pub base_eval: CorpusSpec,
    pub aux_train: CorpusSpec,
    pub subsystems: SubsystemConfig,
    pub backend: BackendConfig,
    pub pretrain_asv: PretrainConfig,
    pub pretrain_cm: PretrainConfig,
    pub train: TrainConfig,
    pub trials: TrialConfig,
}

pub const CORPUS_ROLES: [&str; 5] = ["asv_pretrain", "base_train", "base_dev", "base_eval", "aux_train"];

impl Default for ExperimentConfig {
    /// Desk-scale experiment: corpora at a tenth of the reference sizes.
    fn default() -> Self {
        let mut asv_pretrain = CorpusSpec::base_like("asv_pretrain", 10, 101);
        asv_pretrain.n_speakers = 50;
        asv_pretrain.n_bonafide = 1000;
        asv_pretrain.n_spoofed = 0;
        asv_pretrain.n_attacks = 0;
        let base_train = CorpusSpec::base_like("base_train", 10, 102);
        let base_dev = CorpusSpec::base_like("base_dev", 10, 103);
        let mut base_eval = CorpusSpec::base_like("base_eval", 10, 104);
        base_eval.attack_offset = 3;
        let aux_train = CorpusSpec::aux_like("aux_train", 10, 105);
        Self {
            name: "desk".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3, 4, 5],
            pretrain_seed: 7,
            signal: SignalModel::default(),
            asv_pretrain,
            base_train,
            base_dev,
            base_eval,
            aux_train,
            subsystems: SubsystemConfig::default(),
            backend: BackendConfig::default(),
            pretrain_asv: PretrainConfig::asv_default(),
            pretrain_cm: PretrainConfig::cm_default(),
            // reference schedule shortened to fit a single-core run budget
            train: TrainConfig {
                epochs: 6,
                batches_per_epoch: 40,
                learning_rate: 3e-3,
                subsystem_learning_rate: 5e-4,
                ..TrainConfig::default()
            },
            trials: TrialConfig::default(),
        }
    }
}

fn list<V: Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse_one(key, s.trim())).collect()
}

fn parse_counts(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs four comma-separated counts")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{value}`"))),
    }
}

fn corpus_entries(role: &str, c: &CorpusSpec, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: String| out.push((format!("corpus.{role}.{k}"), v));
    put("name", c.name.clone());
    put("n_speakers", c.n_speakers.to_string());
    put("n_bonafide", c.n_bonafide.to_string());
    put("n_spoofed", c.n_spoofed.to_string());
    put("n_attacks", c.n_attacks.to_string());
    put("attack_bank", c.attack_bank.to_string());
    put("attack_offset", c.attack_offset.to_string());
    put("domain_id", c.domain_id.clone());
    put("domain_shift", c.domain_shift.to_string());
    put("attack_quality_min", c.attack_quality_range.0.to_string());
    put("attack_quality_max", c.attack_quality_range.1.to_string());
    put("signal_length", c.signal_length.to_string());
    put("seed", c.seed.to_string());
}

fn set_corpus(c: &mut CorpusSpec, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "name" => c.name = v.to_string(),
        "n_speakers" => c.n_speakers = parse_one(key, v)?,
        "n_bonafide" => c.n_bonafide = parse_one(key, v)?,
        "n_spoofed" => c.n_spoofed = parse_one(key, v)?,
        "n_attacks" => c.n_attacks = parse_one(key, v)?,
        "attack_bank" => c.attack_bank = parse_one(key, v)?,
        "attack_offset" => c.attack_offset = parse_one(key, v)?,
        "domain_id" => c.domain_id = v.to_string(),
        "domain_shift" => c.domain_shift = parse_one(key, v)?,
        "attack_quality_min" => c.attack_quality_range.0 = parse_one(key, v)?,
        "attack_quality_max" => c.attack_quality_range.1 = parse_one(key, v)?,
        "signal_length" => c.signal_length = parse_one(key, v)?,
        "seed" => c.seed = parse_one(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn frontend_entries(prefix: &str, f: &FrontEndConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.channels"), list(&f.channels)));
    out.push((format!("{prefix}.kernels"), list(&f.kernels)));
    out.push((format!("{prefix}.strides"), list(&f.strides)));
    let acts: Vec<&str> = f.activations.iter().map(|a| a.name()).collect();
    out.push((format!("{prefix}.activations"), acts.join(",")));
    out.push((format!("{prefix}.attention_dim"), f.attention_dim.to_string()));
}

fn set_frontend(f: &mut FrontEndConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "channels" => f.channels = parse_list(key, v)?,
        "kernels" => f.kernels = parse_list(key, v)?,
        "strides" => f.strides = parse_list(key, v)?,
        "activations" => {
            f.activations = v
                .split(',')
                .map(|s| {
                    Activation::from_name(s.trim())
                        .ok_or_else(|| Error::Config(format!("unknown activation `{s}` in `{key}`")))
                })
                .collect::<Result<_>>()?
        }
        "attention_dim" => f.attention_dim = parse_one(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn pretrain_entries(prefix: &str, p: &PretrainConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.epochs"), p.epochs.to_string()));
    out.push((format!("{prefix}.batches_per_epoch"), p.batches_per_epoch.to_string()));
    out.push((format!("{prefix}.batch_size"), p.batch_size.to_string()));
    out.push((format!("{prefix}.learning_rate"), p.learning_rate.to_string()));
    out.push((format!("{prefix}.train_embedding"), p.train_embedding.to_string()));
}

fn set_pretrain(p: &mut PretrainConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "epochs" => p.epochs = parse_one(key, v)?,
        "batches_per_epoch" => p.batches_per_epoch = parse_one(key, v)?,
        "batch_size" => p.batch_size = parse_one(key, v)?,
        "learning_rate" => p.learning_rate = parse_one(key, v)?,
        "train_embedding" => p.train_embedding = parse_bool(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn corpus(&self, role: &str) -> Option<&CorpusSpec> {
        match role {
            "asv_pretrain" => Some(&self.asv_pretrain),
            "base_train" => Some(&self.base_train),
            "base_dev" => Some(&self.base_dev),
            "base_eval" => Some(&self.base_eval),
            "aux_train" => Some(&self.aux_train),
            _ => None,
        }
    }

    fn corpus_mut(&mut self, role: &str) -> Option<&mut CorpusSpec> {
        match role {
            "asv_pretrain" => Some(&mut self.asv_pretrain),
            "base_train" => Some(&mut self.base_train),
            "base_dev" => Some(&mut self.base_dev),
            "base_eval" => Some(&mut self.base_eval),
            "aux_train" => Some(&mut self.aux_train),
            _ => None,
        }
    }

    /// Corpus spec of `role` carrying the experiment-wide signal model.
    pub fn corpus_spec(&self, role: &str) -> Option<CorpusSpec> {
        self.corpus(role).map(|c| CorpusSpec {
            signal: self.signal.clone(),
            ..c.clone()
        })
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("experiment.name", self.name.clone());
        put("experiment.output_dir", self.output_dir.display().to_string());
        put("experiment.seeds", list(&self.seeds));
        put("experiment.pretrain_seed", self.pretrain_seed.to_string());

        let s = &self.signal;
        put("signal.n_resonances", s.n_resonances.to_string());
        put("signal.filter_taps", s.filter_taps.to_string());
        put("signal.decay", s.decay.to_string());
        put("signal.freq_min", s.freq_range.0.to_string());
        put("signal.freq_max", s.freq_range.1.to_string());
        put("signal.gain_min", s.gain_range.0.to_string());
        put("signal.gain_max", s.gain_range.1.to_string());
        put("signal.session_jitter", s.session_jitter.to_string());
        put("signal.min_speaker_distance", s.min_speaker_distance.to_string());
        put("signal.artefact_level", s.artefact_level.to_string());
        put("signal.artefact_quality_coupling", s.artefact_quality_coupling.to_string());
        put("signal.artefact_bandwidth", s.artefact_bandwidth.to_string());
        put("signal.tilt", s.tilt.to_string());
        put("signal.noise_floor", s.noise_floor.to_string());
        put("signal.output_gain", s.output_gain.to_string());

        for role in CORPUS_ROLES {
            corpus_entries(role, self.corpus(role).expect("known role"), &mut out);
        }

        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("encoder.embed_dim", self.subsystems.embed_dim.to_string());
        put("encoder.cm_hidden", self.subsystems.cm_hidden.to_string());
        frontend_entries("encoder.asv", &self.subsystems.asv, &mut out);
        frontend_entries("encoder.cm", &self.subsystems.cm, &mut out);

        let b = &self.backend;
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("backend.conv_channels", list(&b.conv_channels));
        put("backend.kernel", b.kernel.to_string());
        put("backend.pool_len", b.pool_len.to_string());
        put("backend.hidden", b.hidden.to_string());
        put("backend.out", b.out.to_string());
        put("backend.oc_alpha", b.oc.alpha.to_string());
        put("backend.oc_m_pos", b.oc.m_pos.to_string());
        put("backend.oc_m_neg", b.oc.m_neg.to_string());

        pretrain_entries("pretrain.asv", &self.pretrain_asv, &mut out);
        pretrain_entries("pretrain.cm", &self.pretrain_cm, &mut out);

        let t = &self.train;
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("train.epochs", t.epochs.to_string());
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.subsystem_learning_rate", t.subsystem_learning_rate.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.n_seeds", t.n_seeds.to_string());
        put("train.batches_per_epoch", t.batches_per_epoch.to_string());
        put("train.adam_beta1", t.adam_beta1.to_string());
        put("train.adam_beta2", t.adam_beta2.to_string());
        put("train.adam_eps", t.adam_eps.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.aux_enrolment", t.aux_enrolment.to_string());

        put("trials.dev_counts", list(&self.trials.dev_counts));
        put("trials.eval_counts", list(&self.trials.eval_counts));
        put("trials.seed", self.trials.seed.to_string());
        out
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["experiment", "name"] => self.name = v.to_string(),
            ["experiment", "output_dir"] => self.output_dir = PathBuf::from(v),
            ["experiment", "seeds"] => self.seeds = parse_list(key, v)?,
            ["experiment", "pretrain_seed"] => self.pretrain_seed = parse_one(key, v)?,
            ["signal", field] => {
                let s = &mut self.signal;
                match *field {
                    "n_resonances" => s.n_resonances = parse_one(key, v)?,
                    "filter_taps" => s.filter_taps = parse_one(key, v)?,
                    "decay" => s.decay = parse_one(key, v)?,
                    "freq_min" => s.freq_range.0 = parse_one(key, v)?,
                    "freq_max" => s.freq_range.1 = parse_one(key, v)?,
                    "gain_min" => s.gain_range.0 = parse_one(key, v)?,
                    "gain_max" => s.gain_range.1 = parse_one(key, v)?,
                    "session_jitter" => s.session_jitter = parse_one(key, v)?,
                    "min_speaker_distance" => s.min_speaker_distance = parse_one(key, v)?,
                    "artefact_level" => s.artefact_level = parse_one(key, v)?,
                    "artefact_quality_coupling" => s.artefact_quality_coupling = parse_one(key, v)?,
                    "artefact_bandwidth" => s.artefact_bandwidth = parse_one(key, v)?,
                    "tilt" => s.tilt = parse_one(key, v)?,
                    "noise_floor" => s.noise_floor = parse_one(key, v)?,
                    "output_gain" => s.output_gain = parse_one(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            ["corpus", role, field] => {
                let c = self.corpus_mut(role).ok_or_else(unknown)?;
                set_corpus(c, field, key, v)?;
            }
            ["encoder", "embed_dim"] => self.subsystems.embed_dim = parse_one(key, v)?,
            ["encoder", "cm_hidden"] => self.subsystems.cm_hidden = parse_one(key, v)?,
            ["encoder", "asv", field] => set_frontend(&mut self.subsystems.asv, field, key, v)?,
            ["encoder", "cm", field] => set_frontend(&mut self.subsystems.cm, field, key, v)?,
            ["backend", field] => {
                let b = &mut self.backend;
                match *field {
                    "conv_channels" => b.conv_channels = parse_list(key, v)?,
                    "kernel" => b.kernel = parse_one(key, v)?,
                    "pool_len" => b.pool_len = parse_one(key, v)?,
                    "hidden" => b.hidden = parse_one(key, v)?,
                    "out" => b.out = parse_one(key, v)?,
                    "oc_alpha" => b.oc.alpha = parse_one(key, v)?,
                    "oc_m_pos" => b.oc.m_pos = parse_one(key, v)?,
                    "oc_m_neg" => b.oc.m_neg = parse_one(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            ["pretrain", "asv", field] => set_pretrain(&mut self.pretrain_asv, field, key, v)?,
            ["pretrain", "cm", field] => set_pretrain(&mut self.pretrain_cm, field, key, v)?,
            ["train", field] => {
                let t = &mut self.train;
                match *field {
                    "epochs" => t.epochs = parse_one(key, v)?,
                    "learning_rate" => t.learning_rate = parse_one(key, v)?,
                    "subsystem_learning_rate" => t.subsystem_learning_rate = parse_one(key, v)?,
                    "batch_size" => t.batch_size = parse_one(key, v)?,
                    "n_seeds" => t.n_seeds = parse_one(key, v)?,
                    "batches_per_epoch" => t.batches_per_epoch = parse_one(key, v)?,
                    "adam_beta1" => t.adam_beta1 = parse_one(key, v)?,
                    "adam_beta2" => t.adam_beta2 = parse_one(key, v)?,
                    "adam_eps" => t.adam_eps = parse_one(key, v)?,
                    "checkpoint_every" => t.checkpoint_every = parse_one(key, v)?,
                    "aux_enrolment" => t.aux_enrolment = parse_bool(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            ["trials", "dev_counts"] => self.trials.dev_counts = parse_counts(key, v)?,
            ["trials", "eval_counts"] => self.trials.eval_counts = parse_counts(key, v)?,
            ["trials", "seed"] => self.trials.seed = parse_one(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            let sec = k.split('.').next().unwrap_or_default().to_string();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {sec}\n"));
                section = sec;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Replaces the seed list (and seed count).
    pub fn set_seeds(&mut self, seeds: Vec<u64>) -> Result<()> {
        self.train.n_seeds = seeds.len();
        self.seeds = seeds;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seed list contains duplicates".into());
        }
        if self.train.n_seeds != self.seeds.len() {
            return bad(format!(
                "train.n_seeds = {} but {} seeds are listed",
                self.train.n_seeds,
                self.seeds.len()
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("experiment name `{}` is not a plain directory name", self.name));
        }
        let mut names: Vec<&str> = CORPUS_ROLES.iter().map(|r| self.corpus(r).expect("role").name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != CORPUS_ROLES.len() {
            return bad("corpus names must be distinct".into());
        }
        if !self.asv_pretrain.is_bonafide_only() {
            return bad("the ASV pre-training corpus must be bona fide only".into());
        }
        for c in [&self.base_train, &self.base_dev, &self.base_eval, &self.aux_train] {
            if c.is_bonafide_only() {
                return bad(format!("corpus {} needs spoofed utterances", c.name));
            }
        }
        for counts in [self.trials.dev_counts, self.trials.eval_counts] {
            if counts[..3].contains(&0) {
                return bad("dev and eval protocols need trials of types 1, 2 and 3".into());
            }
        }
        self.train.validate()?;
        self.pretrain_asv.validate("ASV")?;
        self.pretrain_cm.validate("CM")?;
        self.backend.oc.validate()?;
        self.subsystems.asv.validate()?;
        self.subsystems.cm.validate()?;
        Ok(())
    }
}

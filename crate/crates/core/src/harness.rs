//! Pipeline stages over an experiment directory.
//!
//! Layout under `<output_dir>/<name>/`:
//!
//! ```text
//! config                          snapshot of the experiment configuration
//! data/<corpus>.meta|.f32         generated corpora
//! data/dev.protocol, eval.protocol
//! pretrained/asv.ckpt, cm.ckpt, pretrain.report
//! runs/<mode>.<condition>/<seed>/
//!     config                      snapshot
//!     epochs/<NN>/                per-epoch bundle checkpoints
//!     dev.<NN>.report             per-epoch dev metrics
//!     model/                      selected bundle
//!     train.log                   losses and selected epoch
//!     eval.scores, eval.report
//! runs/<mode>.<condition>/summary  seed-averaged metrics of one experiment
//! summary.table, summary.sidecar  seed-averaged grid
//! ```
//!
//! Every file is a pure function of the configuration, so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bundle::{self, ModelBundle};
use crate::config::ExperimentConfig;
use crate::encoders::{AsvEncoder, CmEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, read_scores, report_sidecar, report_table, write_scores, EmbeddingCache, EvalReport, Metric, ReportGrid,
    ScoreRecord, Stream,
};
use crate::protocol::{parse_protocol, write_protocol, TrialPair};
use crate::synth::{generate_corpus, Corpus};
use crate::training::{
    frozen_cache, holdout_spf, holdout_sv_eer, pretrain_asv, pretrain_cm, sample_eval_trials, train_sasv,
    OptimisationMode, SasvData, TrainingCondition,
};
use crate::Scalar;

pub const CONFIG_FILE: &str = "config";
pub const SUMMARY_TABLE: &str = "summary.table";
pub const SUMMARY_SIDECAR: &str = "summary.sidecar";
pub const DEV_PROTOCOL: &str = "dev.protocol";
pub const EVAL_PROTOCOL: &str = "eval.protocol";
pub const EVAL_SCORES: &str = "eval.scores";
pub const EXPERIMENT_SUMMARY: &str = "summary";

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub mode: OptimisationMode,
    pub condition: TrainingCondition,
    pub seed: u64,
}

/// Which part of the grid a stage touches.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub modes: Vec<OptimisationMode>,
    pub conditions: Vec<TrainingCondition>,
    pub seeds: Vec<u64>,
}

impl Selection {
    pub fn all(cfg: &ExperimentConfig) -> Self {
        Self {
            modes: OptimisationMode::ALL.to_vec(),
            conditions: TrainingCondition::ALL.to_vec(),
            seeds: cfg.seeds.clone(),
        }
    }

    /// Runs in a fixed order: mode, then condition, then seed.
    pub fn runs(&self) -> Vec<RunKey> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &condition in &self.conditions {
                for &seed in &self.seeds {
                    out.push(RunKey { mode, condition, seed });
                }
            }
        }
        out
    }
}

/// Paths of one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.join(&cfg.name),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn pretrained_asv(&self) -> PathBuf {
        self.pretrained().join(ModelBundle::<f32>::ASV_FILE)
    }

    pub fn pretrained_cm(&self) -> PathBuf {
        self.pretrained().join(ModelBundle::<f32>::CM_FILE)
    }

    pub fn experiment(&self, mode: OptimisationMode, condition: TrainingCondition) -> PathBuf {
        self.root.join("runs").join(format!("{mode}.{condition}"))
    }

    pub fn experiment_summary(&self, mode: OptimisationMode, condition: TrainingCondition) -> PathBuf {
        self.experiment(mode, condition).join(EXPERIMENT_SUMMARY)
    }

    pub fn run(&self, key: RunKey) -> PathBuf {
        self.experiment(key.mode, key.condition).join(key.seed.to_string())
    }

    pub fn epoch(&self, key: RunKey, epoch: usize) -> PathBuf {
        self.run(key).join("epochs").join(format!("{epoch:02}"))
    }

    pub fn model(&self, key: RunKey) -> PathBuf {
        self.run(key).join("model")
    }

    pub fn eval_scores(&self, key: RunKey) -> PathBuf {
        self.run(key).join(EVAL_SCORES)
    }

    pub fn summary_table(&self) -> PathBuf {
        self.root.join(SUMMARY_TABLE)
    }

    pub fn summary_sidecar(&self) -> PathBuf {
        self.root.join(SUMMARY_SIDECAR)
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn require(p: &Path, what: &str, stage: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "missing {what} at {}; run `{stage}` first",
            p.display()
        )))
    }
}

/// `stream.metric = value` lines of one report.
pub fn report_lines(report: &EvalReport) -> String {
    let mut s = String::new();
    for stream in Stream::ALL {
        for metric in Metric::ALL {
            let _ = writeln!(s, "{}.{} = {}", stream.name(), metric.name(), report.get(stream, metric));
        }
    }
    for (i, n) in report.counts.iter().enumerate() {
        let _ = writeln!(s, "count.T{} = {n}", i + 1);
    }
    s
}

/// Corpora of an experiment, loaded from its data directory.
pub struct Corpora<T> {
    pub asv_pretrain: Corpus<T>,
    pub base_train: Corpus<T>,
    pub base_dev: Corpus<T>,
    pub base_eval: Corpus<T>,
    pub aux_train: Corpus<T>,
    pub dev_trials: Vec<TrialPair>,
    pub eval_trials: Vec<TrialPair>,
}

impl<T: Scalar> Corpora<T> {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let dir = layout.data();
        let one = |c: &crate::synth::CorpusSpec| -> Result<Corpus<T>> {
            require(&Corpus::<T>::meta_path(&dir, &c.name), "corpus data", "generate-data")?;
            Corpus::load(&dir, &c.name)
        };
        require(&dir.join(EVAL_PROTOCOL), "evaluation protocol", "generate-data")?;
        Ok(Self {
            asv_pretrain: one(&cfg.asv_pretrain)?,
            base_train: one(&cfg.base_train)?,
            base_dev: one(&cfg.base_dev)?,
            base_eval: one(&cfg.base_eval)?,
            aux_train: one(&cfg.aux_train)?,
            dev_trials: parse_protocol(&dir.join(DEV_PROTOCOL))?,
            eval_trials: parse_protocol(&dir.join(EVAL_PROTOCOL))?,
        })
    }
}

/// Generates every corpus and the dev and eval trial lists.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Layout> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let dir = layout.data();
    mkdir(&dir)?;
    cfg.save(&layout.config())?;
    let mut dev_trials = None;
    let mut eval_trials = None;
    for role in crate::config::CORPUS_ROLES {
        let spec = cfg.corpus_spec(role).expect("known role");
        let corpus: Corpus<f32> = generate_corpus(&spec)?;
        corpus.save(&dir)?;
        log::info!("generated {} ({} utterances)", spec.name, corpus.len());
        match role {
            "base_dev" => dev_trials = Some(sample_eval_trials(&corpus, cfg.trials.dev_counts, cfg.trials.seed)?),
            "base_eval" => {
                eval_trials = Some(sample_eval_trials(&corpus, cfg.trials.eval_counts, cfg.trials.seed + 1)?)
            }
            _ => {}
        }
    }
    write_protocol(&dev_trials.expect("dev corpus"), &dir.join(DEV_PROTOCOL))?;
    write_protocol(&eval_trials.expect("eval corpus"), &dir.join(EVAL_PROTOCOL))?;
    Ok(layout)
}

/// Held-out quality of the pre-trained sub-systems (fractions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    /// ASV SV-EER over bona fide pairs of the dev corpus (unseen speakers).
    pub asv_sv_eer: f64,
    /// CM SPF-EER and AUC on the dev corpus.
    pub cm_spf_eer: f64,
    pub cm_auc: f64,
}

impl PretrainReport {
    pub fn to_text(&self) -> String {
        format!(
            "asv.sv_eer = {}\ncm.spf_eer = {}\ncm.auc = {}\n",
            self.asv_sv_eer, self.cm_spf_eer, self.cm_auc
        )
    }
}

/// Pre-trains both sub-systems: the ASV on the bona fide pre-training
/// corpus, the CM on the base training corpus.
pub fn pretrain<T: Scalar>(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    let layout = Layout::new(cfg);
    let data = Corpora::<T>::load(cfg, &layout)?;
    mkdir(&layout.pretrained())?;
    let asv = pretrain_asv(&data.asv_pretrain, &cfg.subsystems, &cfg.pretrain_asv, cfg.pretrain_seed)?;
    bundle::save_asv(&layout.pretrained_asv(), &asv)?;
    let cm = pretrain_cm(&data.base_train, &cfg.subsystems, &cfg.pretrain_cm, cfg.pretrain_seed)?;
    bundle::save_cm(&layout.pretrained_cm(), &cm)?;
    let (cm_spf_eer, cm_auc) = holdout_spf(&cm, &data.base_dev)?;
    let report = PretrainReport {
        asv_sv_eer: holdout_sv_eer(&asv, &data.base_dev)?,
        cm_spf_eer,
        cm_auc,
    };
    write(&layout.pretrained().join("pretrain.report"), &report.to_text())?;
    log::info!(
        "pre-training: ASV SV-EER {:.2}%, CM SPF-EER {:.2}% (AUC {:.3})",
        100.0 * report.asv_sv_eer,
        100.0 * report.cm_spf_eer,
        report.cm_auc
    );
    Ok(report)
}

fn load_pretrained<T: Scalar>(layout: &Layout) -> Result<(AsvEncoder<T>, CmEncoder<T>)> {
    require(&layout.pretrained_asv(), "pre-trained ASV checkpoint", "pretrain")?;
    require(&layout.pretrained_cm(), "pre-trained CM checkpoint", "pretrain")?;
    Ok((
        bundle::load_asv(&layout.pretrained_asv())?,
        bundle::load_cm(&layout.pretrained_cm())?,
    ))
}

/// Trains every selected run and stores checkpoints, dev reports and the
/// selected bundle. Fixed-mode runs share one frozen embedding cache.
pub fn train<T: Scalar>(cfg: &ExperimentConfig, sel: &Selection) -> Result<()> {
    let layout = Layout::new(cfg);
    let data = Corpora::<T>::load(cfg, &layout)?;
    let (asv, cm) = load_pretrained::<T>(&layout)?;
    let snapshot = cfg.to_text();
    let mut frozen = None;
    for key in sel.runs() {
        let dir = layout.run(key);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        mkdir(&dir)?;
        write(&dir.join(CONFIG_FILE), &snapshot)?;
        if key.mode == OptimisationMode::Fixed && frozen.is_none() {
            frozen = Some(frozen_cache(&asv, &cm, &[&data.base_train, &data.aux_train, &data.base_dev])?);
        }
        let sasv = SasvData {
            base: &data.base_train,
            aux: key.condition.uses_aux().then_some(&data.aux_train),
            dev: &data.base_dev,
            dev_trials: &data.dev_trials,
            frozen: frozen.as_ref(),
        };
        let every = cfg.train.checkpoint_every;
        let mut on_epoch = |rec: &crate::training::EpochRecord<'_, T>| -> Result<()> {
            if rec.epoch.is_multiple_of(every) || rec.epoch == cfg.train.epochs {
                rec.bundle.save(&layout.epoch(key, rec.epoch))?;
            }
            let text = format!("loss = {}\n{}", rec.mean_loss, report_lines(rec.dev_report));
            write(&dir.join(format!("dev.{:02}.report", rec.epoch)), &text)
        };
        let out = train_sasv(
            &asv,
            &cm,
            &cfg.backend,
            key.mode,
            key.condition,
            &sasv,
            &cfg.train,
            key.seed,
            &mut on_epoch,
        )?;
        out.bundle.save(&layout.model(key))?;
        let mut log_text = format!("selected_epoch = {}\n", out.selected_epoch);
        for (i, (l, r)) in out.epoch_losses.iter().zip(&out.dev_reports).enumerate() {
            let _ = writeln!(log_text, "epoch.{:02} = {l} {}", i + 1, r.full.sasv);
        }
        write(&dir.join("train.log"), &log_text)?;
        log::info!(
            "trained {}/{} seed {}: selected epoch {}",
            key.mode,
            key.condition,
            key.seed,
            out.selected_epoch
        );
    }
    Ok(())
}

/// Scores the eval trials with each selected bundle and writes score files
/// and per-run reports.
pub fn evaluate_runs<T: Scalar>(cfg: &ExperimentConfig, sel: &Selection) -> Result<BTreeMap<RunKey, EvalReport>> {
    let layout = Layout::new(cfg);
    let runs = sel.runs();
    for key in &runs {
        let dir = layout.model(*key);
        if !ModelBundle::<T>::exists(&dir) {
            return Err(Error::MissingBundle(dir));
        }
    }
    let data = Corpora::<T>::load(cfg, &layout)?;
    let mut shared: Option<(AsvEncoder<T>, CmEncoder<T>, EmbeddingCache<T>)> = None;
    let mut out = BTreeMap::new();
    for key in runs {
        let bundle = ModelBundle::<T>::load(&layout.model(key))?;
        let reusable = shared.as_ref().is_some_and(|(a, c, _)| *a == bundle.asv && *c == bundle.cm);
        if !reusable {
            let cache = EmbeddingCache::build(&bundle, &data.eval_trials, &data.base_eval)?;
            shared = Some((bundle.asv.clone(), bundle.cm.clone(), cache));
        }
        let cache = &shared.as_ref().expect("cache").2;
        let scores: Vec<ScoreRecord<T>> = data
            .eval_trials
            .par_iter()
            .map(|t| cache.score(&bundle, t))
            .collect::<Result<_>>()?;
        write_scores(&scores, &layout.eval_scores(key))?;
        let report = evaluate(&scores)?;
        write(&layout.run(key).join("eval.report"), &report_lines(&report))?;
        out.insert(key, report);
    }
    Ok(out)
}

/// Seed-averaged reports of every (condition, mode) cell whose score files
/// exist for all seeds of `sel`; writes the summary table and sidecar.
pub fn report<T: Scalar>(cfg: &ExperimentConfig, sel: &Selection) -> Result<ReportGrid> {
    let layout = Layout::new(cfg);
    let mut grid = ReportGrid::new();
    for &mode in &sel.modes {
        for &condition in &sel.conditions {
            let keys: Vec<RunKey> = sel.seeds.iter().map(|&seed| RunKey { mode, condition, seed }).collect();
            if !keys.iter().all(|k| layout.eval_scores(*k).exists()) {
                continue;
            }
            let reports = keys
                .iter()
                .map(|k| evaluate(&read_scores::<T>(&layout.eval_scores(*k))?))
                .collect::<Result<Vec<_>>>()?;
            let mean = EvalReport::mean(&reports)?;
            write(&layout.experiment_summary(mode, condition), &report_lines(&mean))?;
            grid.insert((condition, mode), mean);
        }
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no evaluated runs under {}; run `evaluate` first",
            layout.root.display()
        )));
    }
    write(&layout.summary_table(), &report_table(&grid))?;
    write(&layout.summary_sidecar(), &report_sidecar(&grid))?;
    Ok(grid)
}

/// Trains and evaluates one (mode, condition) cell for every configured
/// seed and returns the seed average. Needs generated data and pre-trained
/// sub-systems; a failing seed aborts the experiment and leaves the runs
/// already written on disk.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    mode: OptimisationMode,
    condition: TrainingCondition,
) -> Result<EvalReport> {
    let sel = Selection {
        modes: vec![mode],
        conditions: vec![condition],
        seeds: cfg.seeds.clone(),
    };
    train::<T>(cfg, &sel)?;
    let reports: Vec<EvalReport> = evaluate_runs::<T>(cfg, &sel)?.into_values().collect();
    let mean = EvalReport::mean(&reports)?;
    write(&Layout::new(cfg).experiment_summary(mode, condition), &report_lines(&mean))?;
    Ok(mean)
}

/// Every stage over the full grid.
pub fn reproduce_all<T: Scalar>(cfg: &ExperimentConfig) -> Result<ReportGrid> {
    let sel = Selection::all(cfg);
    generate_data(cfg)?;
    pretrain::<T>(cfg)?;
    train::<T>(cfg, &sel)?;
    evaluate_runs::<T>(cfg, &sel)?;
    report::<T>(cfg, &sel)
}

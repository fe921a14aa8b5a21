//! Score extraction, EER metrics and report rendering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::backend::stack_embeddings;
use crate::bundle::ModelBundle;
use crate::encoders::{AsvEncoder, CmEncoder, CmOutput, EmbeddingTriple};
use crate::error::{Error, Result};
use crate::protocol::{TrialPair, TrialType};
use crate::scalar::{cosine, Scalar};
use crate::synth::Corpus;
use crate::training::{OptimisationMode, TrainingCondition};

/// Equal error rate by threshold sweep.
///
/// Every distinct score is a candidate threshold `t` (accept iff
/// `score >= t`). `FAR = #neg >= t / N`, `FRR = #pos < t / P`. The threshold
/// minimising `|FAR - FRR|` wins, the smallest one on ties, and the EER is
/// `(FAR + FRR) / 2` there. Returns `(eer, threshold)` with `eer` in `[0, 1]`.
pub fn compute_eer<T: Scalar>(positives: &[T], negatives: &[T]) -> Result<(f64, T)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput(format!(
            "EER needs both classes, got {} positive and {} negative scores",
            positives.len(),
            negatives.len()
        )));
    }
    if positives.iter().chain(negatives).any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(Ordering::Equal);
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(cmp);
    neg.sort_by(cmp);
    let mut all: Vec<T> = pos.iter().chain(&neg).copied().collect();
    all.sort_by(cmp);
    all.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut ip, mut ineg) = (0usize, 0usize);
    let mut best: Option<(f64, f64, T)> = None;
    for &t in &all {
        while ip < pos.len() && pos[ip] < t {
            ip += 1;
        }
        while ineg < neg.len() && neg[ineg] < t {
            ineg += 1;
        }
        let far = (neg.len() - ineg) as f64 / nn;
        let frr = ip as f64 / np;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0, t));
        }
    }
    let (_, eer, t) = best.expect("at least one threshold");
    Ok((eer, t))
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn roc_auc<T: Scalar>(positives: &[T], negatives: &[T]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(Ordering::Equal);
    let mut neg = negatives.to_vec();
    neg.sort_by(cmp);
    let mut wins = 0.0;
    for p in positives {
        let below = neg.partition_point(|n| n < p);
        let not_above = neg.partition_point(|n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positives.len() as f64 * negatives.len() as f64))
}

/// Scores of one trial from the three streams; higher means more
/// target/bona fide in every stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord<T> {
    pub trial: TrialPair,
    /// Backend one-class score, in `[-1, 1]`.
    pub full: T,
    /// Cosine similarity of enrolment and test ASV embeddings, in `[-1, 1]`.
    pub asv: T,
    /// Bona fide logit of the test utterance.
    pub cm: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Full,
    Asv,
    Cm,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Full, Stream::Asv, Stream::Cm];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Full => "full",
            Stream::Asv => "asv",
            Stream::Cm => "cm",
        }
    }

    pub fn of<T: Copy>(self, r: &ScoreRecord<T>) -> T {
        match self {
            Stream::Full => r.full,
            Stream::Asv => r.asv,
            Stream::Cm => r.cm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Sasv,
    Sv,
    Spf,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Sasv, Metric::Sv, Metric::Spf];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sasv => "sasv_eer",
            Metric::Sv => "sv_eer",
            Metric::Spf => "spf_eer",
        }
    }

    /// Trial types scored as negatives; type 1 is always the positive class.
    pub fn negatives(self) -> &'static [TrialType] {
        match self {
            Metric::Sasv => &[TrialType::T2, TrialType::T3],
            Metric::Sv => &[TrialType::T2],
            Metric::Spf => &[TrialType::T3],
        }
    }
}

/// SASV-, SV- and SPF-EER of one stream, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EerSet {
    pub sasv: f64,
    pub sv: f64,
    pub spf: f64,
}

impl EerSet {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Sasv => self.sasv,
            Metric::Sv => self.sv,
            Metric::Spf => self.spf,
        }
    }

    fn get_mut(&mut self, m: Metric) -> &mut f64 {
        match m {
            Metric::Sasv => &mut self.sasv,
            Metric::Sv => &mut self.sv,
            Metric::Spf => &mut self.spf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub full: EerSet,
    pub asv: EerSet,
    pub cm: EerSet,
    /// Records seen per trial type; type 4 is counted but never scored.
    pub counts: [usize; 4],
}

impl EvalReport {
    pub fn stream(&self, s: Stream) -> &EerSet {
        match s {
            Stream::Full => &self.full,
            Stream::Asv => &self.asv,
            Stream::Cm => &self.cm,
        }
    }

    pub fn stream_mut(&mut self, s: Stream) -> &mut EerSet {
        match s {
            Stream::Full => &mut self.full,
            Stream::Asv => &mut self.asv,
            Stream::Cm => &mut self.cm,
        }
    }

    pub fn get(&self, s: Stream, m: Metric) -> f64 {
        self.stream(s).get(m)
    }

    /// The nine metrics in table column order.
    pub fn values(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, s) in Stream::ALL.iter().enumerate() {
            for (j, m) in Metric::ALL.iter().enumerate() {
                out[3 * i + j] = self.get(*s, *m);
            }
        }
        out
    }

    /// Arithmetic mean of every metric; counts are averaged and rounded.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        if reports.is_empty() {
            return Err(Error::InvalidInput("cannot average zero reports".into()));
        }
        let n = reports.len() as f64;
        let mut out = EvalReport::default();
        for s in Stream::ALL {
            for m in Metric::ALL {
                let sum: f64 = reports.iter().map(|r| r.get(s, m)).sum();
                *out.stream_mut(s).get_mut(m) = sum / n;
            }
        }
        for t in 0..4 {
            let sum: usize = reports.iter().map(|r| r.counts[t]).sum();
            out.counts[t] = (sum as f64 / n).round() as usize;
        }
        Ok(out)
    }
}

/// Computes all nine EERs. Type-4 records are dropped; every one of types
/// 1-3 must be present.
pub fn evaluate<T: Scalar>(records: &[ScoreRecord<T>]) -> Result<EvalReport> {
    let mut counts = [0usize; 4];
    for r in records {
        counts[r.trial.trial_type.index()] += 1;
    }
    for t in [TrialType::T1, TrialType::T2, TrialType::T3] {
        if counts[t.index()] == 0 {
            return Err(Error::MissingTrialType(t));
        }
    }
    if counts[3] > 0 {
        log::info!("evaluation ignores {} type-4 trials", counts[3]);
    }
    let mut report = EvalReport {
        counts,
        ..EvalReport::default()
    };
    for s in Stream::ALL {
        let of_type = |t: TrialType| -> Vec<T> {
            records
                .iter()
                .filter(|r| r.trial.trial_type == t)
                .map(|r| s.of(r))
                .collect()
        };
        let pos = of_type(TrialType::T1);
        for m in Metric::ALL {
            let neg: Vec<T> = m.negatives().iter().flat_map(|&t| of_type(t)).collect();
            let (eer, _) = compute_eer(&pos, &neg)?;
            *report.stream_mut(s).get_mut(m) = 100.0 * eer;
        }
    }
    Ok(report)
}

/// Lookup of utterance signals by id across one or more corpora.
pub trait UtteranceSource<T>: Sync {
    fn signal(&self, id: &str) -> Option<&[T]>;
}

impl<T: Scalar> UtteranceSource<T> for Corpus<T> {
    fn signal(&self, id: &str) -> Option<&[T]> {
        self.get(id).map(|u| u.signal.as_slice())
    }
}

impl<T: Scalar> UtteranceSource<T> for [&Corpus<T>] {
    fn signal(&self, id: &str) -> Option<&[T]> {
        self.iter().find_map(|c| c.signal(id))
    }
}

/// Unique ids in order of first appearance.
fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = std::collections::HashSet::new();
    ids.filter(|id| seen.insert(*id)).collect()
}

/// ASV embeddings of every referenced utterance and CM outputs of every
/// test utterance, computed once each.
pub struct EmbeddingCache<T> {
    pub asv: HashMap<String, Vec<T>>,
    pub cm: HashMap<String, CmOutput<T>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn empty() -> Self {
        Self {
            asv: HashMap::new(),
            cm: HashMap::new(),
        }
    }

    /// Caches every utterance `trials` refer to.
    pub fn build<S: UtteranceSource<T> + Sync + ?Sized>(
        bundle: &ModelBundle<T>,
        trials: &[TrialPair],
        source: &S,
    ) -> Result<Self> {
        let asv_ids = unique_ids(trials.iter().flat_map(|t| [t.enrol_id.as_str(), t.test_id.as_str()]));
        let cm_ids = unique_ids(trials.iter().map(|t| t.test_id.as_str()));
        let mut cache = Self::empty();
        cache.extend(&bundle.asv, &bundle.cm, &asv_ids, &cm_ids, source)?;
        Ok(cache)
    }

    /// Adds ASV embeddings for `asv_ids` and CM outputs for `cm_ids`,
    /// skipping ids already present.
    pub fn extend<S: UtteranceSource<T> + Sync + ?Sized>(
        &mut self,
        asv: &AsvEncoder<T>,
        cm: &CmEncoder<T>,
        asv_ids: &[&str],
        cm_ids: &[&str],
        source: &S,
    ) -> Result<()> {
        let fetch = |id: &str| source.signal(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
        for id in asv_ids.iter().chain(cm_ids) {
            fetch(id)?;
        }
        let todo: Vec<&str> = unique_ids(asv_ids.iter().copied().filter(|id| !self.asv.contains_key(*id)));
        let made = todo
            .par_iter()
            .map(|id| Ok((id.to_string(), asv.embed(fetch(id)?)?)))
            .collect::<Result<Vec<_>>>()?;
        self.asv.extend(made);
        let todo: Vec<&str> = unique_ids(cm_ids.iter().copied().filter(|id| !self.cm.contains_key(*id)));
        let made = todo
            .par_iter()
            .map(|id| Ok((id.to_string(), cm.run(fetch(id)?)?)))
            .collect::<Result<Vec<_>>>()?;
        self.cm.extend(made);
        Ok(())
    }

    /// Scores one trial; all its utterances must be cached.
    pub fn score(&self, bundle: &ModelBundle<T>, trial: &TrialPair) -> Result<ScoreRecord<T>> {
        let missing = |id: &str| Error::MissingUtterance(id.to_string());
        let e_enr = self.asv.get(&trial.enrol_id).ok_or_else(|| missing(&trial.enrol_id))?;
        let e_tst = self.asv.get(&trial.test_id).ok_or_else(|| missing(&trial.test_id))?;
        let cm = self.cm.get(&trial.test_id).ok_or_else(|| missing(&trial.test_id))?;
        let triple = EmbeddingTriple::new(e_enr.clone(), e_tst.clone(), cm.embedding.clone())?;
        let full = bundle.backend.score(&stack_embeddings(&triple)?)?;
        Ok(ScoreRecord {
            trial: trial.clone(),
            full,
            asv: cosine(e_enr, e_tst),
            cm: cm.score(),
        })
    }
}

/// One record per trial, in trial order.
pub fn score_trials<T: Scalar, S: UtteranceSource<T> + Sync + ?Sized>(
    bundle: &ModelBundle<T>,
    trials: &[TrialPair],
    source: &S,
) -> Result<Vec<ScoreRecord<T>>> {
    let cache = EmbeddingCache::build(bundle, trials, source)?;
    trials.par_iter().map(|t| cache.score(bundle, t)).collect()
}

// ---------------------------------------------------------------------------
// score files

pub fn format_scores<T: Scalar>(records: &[ScoreRecord<T>]) -> String {
    let mut out = String::new();
    for r in records {
        let t = &r.trial;
        writeln!(out, "{} {} {} {} {} {}", t.enrol_id, t.test_id, t.trial_type, r.full, r.asv, r.cm).unwrap();
    }
    out
}

pub fn write_scores<T: Scalar>(records: &[ScoreRecord<T>], path: &Path) -> Result<()> {
    std::fs::write(path, format_scores(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_scores_str<T: Scalar>(text: &str, path: &Path) -> Result<Vec<ScoreRecord<T>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let trial_type: TrialType = f[2].parse().map_err(err)?;
        let num = |s: &str| T::parse_decimal(s).ok_or_else(|| err(format!("bad score `{s}`")));
        out.push(ScoreRecord {
            trial: TrialPair::new(f[0], f[1], trial_type),
            full: num(f[3])?,
            asv: num(f[4])?,
            cm: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn read_scores<T: Scalar>(path: &Path) -> Result<Vec<ScoreRecord<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores_str(&text, path)
}

// ---------------------------------------------------------------------------
// report table

pub type ReportGrid = BTreeMap<(TrainingCondition, OptimisationMode), EvalReport>;

const MISSING: &str = "-";
const CELL: usize = 8;

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:>CELL$.2}")
    } else {
        format!("{MISSING:>CELL$}")
    }
}

/// Fixed-width table: one row per (condition, mode) in ascending order,
/// nine EER columns in percent with two decimals. Non-finite values print
/// as `-`.
pub fn report_table(reports: &ReportGrid) -> String {
    let mut out = String::new();
    let head = |names: [&str; 3]| names.iter().map(|n| format!("{n:>CELL$}")).collect::<String>();
    writeln!(
        out,
        "{:<12}{:<7}|{:^24}|{:^24}|{:^24}",
        "", "", "Full system", "ASV sub-system", "CM sub-system"
    )
    .unwrap();
    writeln!(
        out,
        "{:<12}{:<7}|{}|{}|{}",
        "condition",
        "mode",
        head(["SASV", "SV", "SPF"]),
        head(["SASV", "SV", "SPF"]),
        head(["SASV", "SV", "SPF"])
    )
    .unwrap();
    writeln!(out, "{}", "-".repeat(12 + 7 + 3 * (1 + 3 * CELL))).unwrap();
    for ((condition, mode), r) in reports {
        let v = r.values();
        let group = |k: usize| (0..3).map(|j| cell(v[3 * k + j])).collect::<String>();
        writeln!(
            out,
            "{:<12}{:<7}|{}|{}|{}",
            condition.name(),
            mode.name(),
            group(0),
            group(1),
            group(2)
        )
        .unwrap();
    }
    out
}

/// One parsed table row; `None` marks a `-` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub condition: TrainingCondition,
    pub mode: OptimisationMode,
    pub values: [Option<f64>; 9],
}

/// Parses the output of [`report_table`].
pub fn parse_report_table(text: &str) -> Result<Vec<TableRow>> {
    let path = Path::new("<report table>");
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().filter(|t| *t != "|").collect();
        let tokens: Vec<&str> = tokens.iter().flat_map(|t| t.split('|')).filter(|t| !t.is_empty()).collect();
        let Some(first) = tokens.first() else { continue };
        let Ok(condition) = first.parse::<TrainingCondition>() else {
            continue;
        };
        if tokens.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", tokens.len())));
        }
        let mode: OptimisationMode = tokens[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let mut values = [None; 9];
        for (k, tok) in tokens[2..].iter().enumerate() {
            values[k] = if *tok == MISSING {
                None
            } else {
                Some(tok.parse().map_err(|_| err(format!("bad value `{tok}`")))?)
            };
        }
        rows.push(TableRow { condition, mode, values });
    }
    Ok(rows)
}

/// `mode.condition.stream.metric=value` lines with full precision values.
pub fn report_sidecar(reports: &ReportGrid) -> String {
    let mut out = String::new();
    for ((condition, mode), r) in reports {
        for s in Stream::ALL {
            for m in Metric::ALL {
                writeln!(out, "{}.{}.{}.{}={}", mode.name(), condition.name(), s.name(), m.name(), r.get(s, m)).unwrap();
            }
        }
        for t in TrialType::ALL {
            writeln!(out, "{}.{}.count.{}={}", mode.name(), condition.name(), t, r.counts[t.index()]).unwrap();
        }
    }
    out
}

/// Parses [`report_sidecar`] output back into a grid.
pub fn parse_sidecar(text: &str) -> Result<ReportGrid> {
    let path = Path::new("<sidecar>");
    let mut grid = ReportGrid::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() != 4 {
            return Err(err(format!("bad key `{key}`")));
        }
        let mode: OptimisationMode = parts[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let condition: TrainingCondition = parts[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let r = grid.entry((condition, mode)).or_default();
        if parts[2] == "count" {
            let t: TrialType = parts[3].parse().map_err(err)?;
            r.counts[t.index()] = value.parse().map_err(|_| err(format!("bad count `{value}`")))?;
            continue;
        }
        let s = Stream::ALL
            .into_iter()
            .find(|s| s.name() == parts[2])
            .ok_or_else(|| err(format!("unknown stream `{}`", parts[2])))?;
        let m = Metric::ALL
            .into_iter()
            .find(|m| m.name() == parts[3])
            .ok_or_else(|| err(format!("unknown metric `{}`", parts[3])))?;
        *r.stream_mut(s).get_mut(m) = value.parse().map_err(|_| err(format!("bad value `{value}`")))?;
    }
    Ok(grid)
}

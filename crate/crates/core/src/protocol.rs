//! Trial types, trial-pair sampling at fixed per-batch proportions, and the
//! plain-text protocol file format.
//!
//! A trial always pairs a bona fide enrolment utterance of the claimed
//! speaker with a test utterance. The test utterance decides the type:
//!
//! | type | test utterance              |
//! |------|-----------------------------|
//! | T1   | bona fide, target speaker   |
//! | T2   | bona fide, non-target       |
//! | T3   | spoofed, target speaker     |
//! | T4   | spoofed, non-target         |
//!
//! Only T1 trials should be accepted by a spoofing-aware verifier.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialType {
    T1,
    T2,
    T3,
    T4,
}

impl TrialType {
    pub const ALL: [TrialType; 4] = [TrialType::T1, TrialType::T2, TrialType::T3, TrialType::T4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_target(self) -> bool {
        matches!(self, TrialType::T1 | TrialType::T3)
    }

    pub fn is_spoofed(self) -> bool {
        matches!(self, TrialType::T3 | TrialType::T4)
    }
}

impl fmt::Display for TrialType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrialType::T1 => "T1",
            TrialType::T2 => "T2",
            TrialType::T3 => "T3",
            TrialType::T4 => "T4",
        };
        f.write_str(s)
    }
}

impl FromStr for TrialType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "T1" => Ok(TrialType::T1),
            "T2" => Ok(TrialType::T2),
            "T3" => Ok(TrialType::T3),
            "T4" => Ok(TrialType::T4),
            other => Err(format!("unknown trial type tag `{other}`")),
        }
    }
}

/// Maps the (speaker match, spoof flag) labels of a pair onto its trial type.
pub fn classify_trial(same_speaker: bool, test_is_spoofed: bool) -> TrialType {
    match (same_speaker, test_is_spoofed) {
        (true, false) => TrialType::T1,
        (false, false) => TrialType::T2,
        (true, true) => TrialType::T3,
        (false, true) => TrialType::T4,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrialPair {
    pub enrol_id: String,
    pub test_id: String,
    pub trial_type: TrialType,
}

impl TrialPair {
    pub fn new(enrol_id: impl Into<String>, test_id: impl Into<String>, trial_type: TrialType) -> Self {
        Self {
            enrol_id: enrol_id.into(),
            test_id: test_id.into(),
            trial_type,
        }
    }
}

/// Fraction of each trial type in a training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProportionProfile {
    weights: [f64; 4],
}

impl ProportionProfile {
    /// Frozen sub-systems: 50% T1, 25% T2, 25% T3, no T4.
    pub const FIXED: ProportionProfile = ProportionProfile {
        weights: [0.50, 0.25, 0.25, 0.0],
    };

    /// End-to-end training: 25% of each type.
    pub const JOINT: ProportionProfile = ProportionProfile {
        weights: [0.25, 0.25, 0.25, 0.25],
    };

    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidInput(format!(
                "proportions must lie in [0,1], got {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "proportions must sum to 1, got {sum}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weight(&self, t: TrialType) -> f64 {
        self.weights[t.index()]
    }

    pub fn weights(&self) -> [f64; 4] {
        self.weights
    }

    /// Per-type counts for a batch of `batch_size` trials.
    ///
    /// Largest-remainder rounding: every type first gets `floor(w * n)`; the
    /// leftover trials go one each to the types with the largest fractional
    /// parts, ties resolved toward the lower type index. Zero-weight types
    /// never receive a trial.
    pub fn counts(&self, batch_size: usize) -> [usize; 4] {
        let n = batch_size as f64;
        let mut counts = [0usize; 4];
        let mut remainders = [(0.0f64, 0usize); 4];
        for (i, &w) in self.weights.iter().enumerate() {
            let exact = w * n;
            // guard against 0.25 * 20 = 4.999999... style drift
            let floor = (exact + 1e-9).floor();
            counts[i] = floor as usize;
            remainders[i] = ((exact - floor).max(0.0), i);
        }
        let assigned: usize = counts.iter().sum();
        let mut leftover = batch_size.saturating_sub(assigned);
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in remainders.iter().cycle() {
            if leftover == 0 {
                break;
            }
            if self.weights[i] > 0.0 {
                counts[i] += 1;
                leftover -= 1;
            }
        }
        counts
    }
}

/// Labels of one utterance as seen by the trial sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolUtterance {
    pub id: String,
    pub speaker_id: String,
    pub is_spoofed: bool,
}

/// Which roles utterances of a pool group may play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupRoles {
    /// Bona fide utterances may serve as enrolment.
    pub enrol: bool,
    /// Bona fide utterances may serve as test utterances (T1, T2).
    pub bonafide_test: bool,
    /// Spoofed utterances may serve as test utterances (T3, T4).
    pub spoofed_test: bool,
}

impl GroupRoles {
    pub const ALL: GroupRoles = GroupRoles {
        enrol: true,
        bonafide_test: true,
        spoofed_test: true,
    };
}

#[derive(Debug, Clone)]
struct SpeakerSlot {
    group: usize,
    enrol: Vec<usize>,
    bonafide: Vec<usize>,
    spoofed: Vec<usize>,
}

/// Index of candidate utterances by speaker, spoof flag and corpus group.
///
/// Non-target pairs are always formed within one group (one corpus), so a
/// trial never mixes enrolment and test material from different domains.
#[derive(Debug, Clone, Default)]
pub struct TrialPool {
    utterances: Vec<PoolUtterance>,
    speakers: Vec<SpeakerSlot>,
    n_groups: usize,
}

impl TrialPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one corpus as a new group. Returns the group index.
    pub fn add_group<'a, I>(&mut self, utterances: I, roles: GroupRoles) -> usize
    where
        I: IntoIterator<Item = &'a PoolUtterance>,
    {
        let group = self.n_groups;
        self.n_groups += 1;
        let first_slot = self.speakers.len();
        let mut names: Vec<String> = Vec::new();
        for u in utterances {
            let local = match names.iter().position(|s| s == &u.speaker_id) {
                Some(p) => p,
                None => {
                    names.push(u.speaker_id.clone());
                    self.speakers.push(SpeakerSlot {
                        group,
                        enrol: Vec::new(),
                        bonafide: Vec::new(),
                        spoofed: Vec::new(),
                    });
                    names.len() - 1
                }
            };
            let idx = self.utterances.len();
            self.utterances.push(u.clone());
            let slot = &mut self.speakers[first_slot + local];
            if u.is_spoofed {
                if roles.spoofed_test {
                    slot.spoofed.push(idx);
                }
            } else {
                if roles.enrol {
                    slot.enrol.push(idx);
                }
                if roles.bonafide_test {
                    slot.bonafide.push(idx);
                }
            }
        }
        group
    }

    pub fn utterance(&self, idx: usize) -> &PoolUtterance {
        &self.utterances[idx]
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    fn others_in_group(&self, s: usize, has: impl Fn(&SpeakerSlot) -> bool) -> Vec<usize> {
        let g = self.speakers[s].group;
        (0..self.speakers.len())
            .filter(|&o| o != s && self.speakers[o].group == g && has(&self.speakers[o]))
            .collect()
    }

    /// Enrolment speakers able to host a trial of type `t`.
    fn eligible(&self, t: TrialType) -> Vec<usize> {
        (0..self.speakers.len())
            .filter(|&s| {
                let slot = &self.speakers[s];
                if slot.enrol.is_empty() {
                    return false;
                }
                match t {
                    TrialType::T1 => slot.bonafide.iter().any(|b| slot.enrol.iter().any(|e| e != b)),
                    TrialType::T2 => !self.others_in_group(s, |o| !o.bonafide.is_empty()).is_empty(),
                    TrialType::T3 => !slot.spoofed.is_empty(),
                    TrialType::T4 => !self.others_in_group(s, |o| !o.spoofed.is_empty()).is_empty(),
                }
            })
            .collect()
    }

    fn draw_pair<R: Rng + ?Sized>(&self, t: TrialType, speakers: &[usize], rng: &mut R) -> (usize, usize) {
        let s = speakers[rng.random_range(0..speakers.len())];
        let slot = &self.speakers[s];
        let enrol = slot.enrol[rng.random_range(0..slot.enrol.len())];
        let pick = |v: &[usize], rng: &mut R| v[rng.random_range(0..v.len())];
        let test = match t {
            TrialType::T1 => {
                let cands: Vec<usize> = slot.bonafide.iter().copied().filter(|&b| b != enrol).collect();
                if cands.is_empty() {
                    // the chosen enrolment was the speaker's only bona fide
                    // test candidate; fall back to a different enrolment
                    let e2: Vec<usize> = slot.enrol.iter().copied().filter(|&e| slot.bonafide.iter().any(|&b| b != e)).collect();
                    let enrol = pick(&e2, rng);
                    let c2: Vec<usize> = slot.bonafide.iter().copied().filter(|&b| b != enrol).collect();
                    return (enrol, pick(&c2, rng));
                }
                pick(&cands, rng)
            }
            TrialType::T2 => {
                let others = self.others_in_group(s, |o| !o.bonafide.is_empty());
                let o = others[rng.random_range(0..others.len())];
                pick(&self.speakers[o].bonafide, rng)
            }
            TrialType::T3 => pick(&slot.spoofed, rng),
            TrialType::T4 => {
                let others = self.others_in_group(s, |o| !o.spoofed.is_empty());
                let o = others[rng.random_range(0..others.len())];
                pick(&self.speakers[o].spoofed, rng)
            }
        };
        (enrol, test)
    }

    fn make_pair(&self, enrol: usize, test: usize) -> TrialPair {
        let e = &self.utterances[enrol];
        let t = &self.utterances[test];
        TrialPair::new(
            e.id.clone(),
            t.id.clone(),
            classify_trial(e.speaker_id == t.speaker_id, t.is_spoofed),
        )
    }

    /// Samples exactly `counts[i]` trials of each type.
    ///
    /// With [`Uniqueness::Utterances`] no utterance is reused inside the
    /// returned list; with [`Uniqueness::Pairs`] only (enrol, test) pairs are
    /// kept distinct. When the pool is too small the constraint is dropped
    /// for the affected draw and a warning is logged.
    pub fn sample_counts<R: Rng + ?Sized>(
        &self,
        counts: [usize; 4],
        uniqueness: Uniqueness,
        rng: &mut R,
    ) -> Result<Vec<TrialPair>> {
        const MAX_TRIES: usize = 64;
        let mut used_utts: HashSet<usize> = HashSet::new();
        let mut used_pairs: HashSet<(usize, usize)> = HashSet::new();
        let mut out = Vec::with_capacity(counts.iter().sum());
        for t in TrialType::ALL {
            let n = counts[t.index()];
            if n == 0 {
                continue;
            }
            let speakers = self.eligible(t);
            if speakers.is_empty() {
                return Err(Error::EmptyPool(t));
            }
            for _ in 0..n {
                let mut chosen = None;
                for _ in 0..MAX_TRIES {
                    let (e, s) = self.draw_pair(t, &speakers, rng);
                    let fresh = match uniqueness {
                        Uniqueness::Utterances => !used_utts.contains(&e) && !used_utts.contains(&s),
                        Uniqueness::Pairs => !used_pairs.contains(&(e, s)),
                    };
                    if fresh {
                        chosen = Some((e, s));
                        break;
                    }
                }
                let (e, s) = match chosen {
                    Some(p) => p,
                    None => {
                        log::warn!("trial pool exhausted for {t}; allowing a repeated utterance");
                        self.draw_pair(t, &speakers, rng)
                    }
                };
                used_utts.insert(e);
                used_utts.insert(s);
                used_pairs.insert((e, s));
                out.push(self.make_pair(e, s));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Uniqueness {
    Utterances,
    Pairs,
}

/// Draws one training batch whose type counts follow `profile` exactly
/// (see [`ProportionProfile::counts`]). The returned order is shuffled.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &TrialPool,
    profile: &ProportionProfile,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrialPair>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut batch = pool.sample_counts(profile.counts(batch_size), Uniqueness::Utterances, rng)?;
    batch.shuffle(rng);
    Ok(batch)
}

pub fn parse_protocol_str(text: &str, path: &Path) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let trial_type = fields[2].parse::<TrialType>().map_err(err)?;
        out.push(TrialPair::new(fields[0], fields[1], trial_type));
    }
    Ok(out)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<TrialPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, path)
}

pub fn format_protocol(trials: &[TrialPair]) -> String {
    let mut s = String::new();
    for t in trials {
        s.push_str(&format!("{} {} {}\n", t.enrol_id, t.test_id, t.trial_type));
    }
    s
}

pub fn write_protocol(trials: &[TrialPair], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_protocol(trials).as_bytes())
        .map_err(|e| Error::io(path, e))
}

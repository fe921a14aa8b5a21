//! EER estimator against a brute-force oracle, and report invariances.

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;
use sasv_core::eval::{compute_eer, evaluate, ScoreRecord};
use sasv_core::protocol::{TrialPair, TrialType};
use sasv_core::rng;

/// Every candidate threshold scored independently; minimal gap wins, the
/// smallest threshold on ties. Returns `(eer, threshold, all minimising eers)`.
fn brute_force(pos: &[f64], neg: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut cands: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    let points: Vec<(f64, f64, f64)> = cands
        .iter()
        .map(|&t| {
            let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
            ((far - frr).abs(), (far + frr) / 2.0, t)
        })
        .collect();
    let best_gap = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let minimisers: Vec<&(f64, f64, f64)> = points.iter().filter(|p| p.0 == best_gap).collect();
    let first = minimisers
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("non-empty");
    (first.1, first.2, minimisers.iter().map(|p| p.1).collect())
}

/// Lists of 1..=50 scores, either continuous or from a coarse grid (ties).
fn score_lists() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let cont = prop::collection::vec(-3.0f64..3.0, 1..=50);
    let grid = prop::collection::vec((0i32..8).prop_map(|k| k as f64 * 0.25), 1..=50);
    prop_oneof![(cont.clone(), cont), (grid.clone(), grid)]
}

#[test]
fn matches_brute_force_on_1000_instances() {
    let start = Instant::now();
    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&score_lists(), |(pos, neg)| {
            let (eer, t) = compute_eer(&pos, &neg).unwrap();
            let (want, want_t, _) = brute_force(&pos, &neg);
            prop_assert!((eer - want).abs() <= 1e-12, "eer {eer} vs {want}");
            prop_assert_eq!(t, want_t);
            Ok(())
        })
        .unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
}

proptest! {
    #![proptest_config(Config { cases: 300, failure_persistence: None, ..Config::default() })]

    #[test]
    fn invariant_under_increasing_transforms((pos, neg) in score_lists()) {
        let f = |x: f64| (0.7 * x).exp() + x * x * x;
        let tp: Vec<f64> = pos.iter().map(|&x| f(x)).collect();
        let tn: Vec<f64> = neg.iter().map(|&x| f(x)).collect();
        let (a, ta) = compute_eer(&pos, &neg).unwrap();
        let (b, tb) = compute_eer(&tp, &tn).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(f(ta), tb);
    }

    /// Negating every score and swapping the lists maps each operating
    /// point to one with FAR and FRR exchanged. The earliest-threshold
    /// tie-break picks mirrored points, so the property is exact whenever
    /// the minimal gap determines the EER.
    #[test]
    fn invariant_under_negation_and_swap((pos, neg) in score_lists()) {
        let (_, _, minimisers) = brute_force(&pos, &neg);
        prop_assume!(minimisers.iter().all(|&m| m == minimisers[0]));
        let np: Vec<f64> = neg.iter().map(|x| -x).collect();
        let nn: Vec<f64> = pos.iter().map(|x| -x).collect();
        prop_assert_eq!(compute_eer(&pos, &neg).unwrap().0, compute_eer(&np, &nn).unwrap().0);
    }
}

#[test]
fn negation_swap_differs_only_through_gap_ties() {
    // Two operating points share |FAR - FRR| = 0.5 with means 0.25 and 0.75;
    // each side picks its own earliest threshold.
    let (pos, neg) = (vec![1.0], vec![0.0, 2.0]);
    assert_eq!(compute_eer(&pos, &neg).unwrap().0, 0.25);
    assert_eq!(compute_eer(&[0.0, -2.0], &[-1.0]).unwrap().0, 0.75);
    let (_, _, minimisers) = brute_force(&pos, &neg);
    assert_eq!(minimisers, vec![0.25, 0.75]);
}

fn records(n_per_type: usize, seed: u64, score: impl Fn(TrialType, &mut rng::Rng) -> [f64; 3]) -> Vec<ScoreRecord<f64>> {
    let mut r = rng::stream(seed, "records", 0);
    let mut out = Vec::new();
    for t in [TrialType::T1, TrialType::T2, TrialType::T3] {
        for i in 0..n_per_type {
            let [full, asv, cm] = score(t, &mut r);
            out.push(ScoreRecord {
                trial: TrialPair::new(format!("e{i}"), format!("{t}-{i}"), t),
                full,
                asv,
                cm,
            });
        }
    }
    out
}

#[test]
fn report_is_invariant_under_shuffling() {
    let recs = records(200, 1, |_, r| [r.random(), r.random(), r.random()]);
    let base = evaluate(&recs).unwrap();
    for k in 0..5 {
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rng::stream(2, "shuffle", k));
        assert_eq!(evaluate(&shuffled).unwrap(), base);
    }
}

#[test]
fn type_four_records_never_change_the_report() {
    let recs = records(150, 3, |t, r| {
        let bump = if t == TrialType::T1 { 0.3 } else { 0.0 };
        [r.random::<f64>() + bump, r.random::<f64>() + bump, r.random::<f64>()]
    });
    let base = evaluate(&recs).unwrap();
    for extreme in [f64::MAX, -f64::MAX, 0.5, 1e9] {
        let mut with4 = recs.clone();
        for i in 0..100 {
            with4.insert(
                (7 * i) % with4.len(),
                ScoreRecord {
                    trial: TrialPair::new(format!("x{i}"), format!("y{i}"), TrialType::T4),
                    full: extreme,
                    asv: extreme,
                    cm: -extreme,
                },
            );
        }
        let rep = evaluate(&with4).unwrap();
        assert_eq!(rep.values(), base.values());
        assert_eq!(rep.counts[3], 100);
    }
}

#[test]
fn random_stream_is_near_chance() {
    let recs = records(1000, 4, |_, r| [r.random(), r.random(), r.random()]);
    for v in evaluate(&recs).unwrap().values() {
        assert!((45.0..=55.0).contains(&v), "{v}");
    }
}

#[test]
fn countermeasure_oracle_is_speaker_blind() {
    let recs = records(50, 5, |t, _| {
        let cm = if t.is_spoofed() { 0.0 } else { 1.0 };
        let oracle = if t == TrialType::T1 { 1.0 } else { 0.0 };
        [oracle, oracle, cm]
    });
    let rep = evaluate(&recs).unwrap();
    assert_eq!((rep.full.sasv, rep.full.sv, rep.full.spf), (0.0, 0.0, 0.0));
    assert_eq!(rep.cm.spf, 0.0);
    assert_eq!(rep.cm.sv, 50.0);
}

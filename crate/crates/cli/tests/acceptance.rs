//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 5 to 9 run `sasv reproduce-all` twice with the shipped desk
//! configuration, which takes a while on a single core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use sasv_core::backend::{oc_softmax_loss, stack_embeddings, Backend, BackendConfig, OcSoftmax};
use sasv_core::bundle::{save_asv, save_cm, ModelBundle};
use sasv_core::config::ExperimentConfig;
use sasv_core::encoders::{
    asv_pretrain_loss, cm_pretrain_loss, AsvEncoder, AsvHead, CmEncoder, EmbeddingTriple, FrontEndConfig,
    SubsystemConfig,
};
use sasv_core::eval::{compute_eer, evaluate, read_scores, EvalReport};
use sasv_core::harness::{Layout, RunKey, SUMMARY_SIDECAR, SUMMARY_TABLE};
use sasv_core::nn::{Activation, AttentiveStatsPool, FeatureMap, Module};
use sasv_core::protocol::{sample_batch, GroupRoles, PoolUtterance, TrialPool};
use sasv_core::rng;
use sasv_core::synth::{generate_corpus, Corpus, CorpusSpec};
use sasv_core::training::{sample_eval_trials, train_sasv, OptimisationMode, SasvData, TrainConfig, TrainingCondition};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// criterion 1

fn brute_force_eer(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cands: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, 0.0);
    for t in cands {
        let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0);
        }
    }
    best.1
}

fn eer_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(1, "acceptance-eer", 0);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let grid = i % 2 == 0;
        let list = |r: &mut rng::Rng| -> Vec<f64> {
            let n = r.random_range(1..=50);
            (0..n)
                .map(|_| if grid { r.random_range(0..8) as f64 * 0.25 } else { r.random_range(-3.0..3.0) })
                .collect()
        };
        let (pos, neg) = (list(&mut r), list(&mut r));
        let got = compute_eer(&pos, &neg).unwrap().0;
        worst = worst.max((got - brute_force_eer(&pos, &neg)).abs());
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("max |diff| {worst:e} over 1000 instances in {t:.2?}"),
    )
}

// criterion 2

const H: f64 = 1e-6;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-7 {
        0.0
    } else {
        diff / scale
    }
}

fn numeric(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + H;
            let up = f(&v);
            v[i] = x[i] - H;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn module_err<M: Module<f64>>(m: &M, analytic: &M, loss: &dyn Fn(&M) -> f64) -> f64 {
    let n = m.tensors().len();
    (0..n)
        .map(|ti| {
            let base = m.tensors()[ti].data.clone();
            let num = numeric(&base, &mut |x| {
                let mut p = m.clone();
                p.tensors_mut()[ti].data.copy_from_slice(x);
                loss(&p)
            });
            rel_err(&analytic.tensors()[ti].data, &num)
        })
        .fold(0.0, f64::max)
}

fn vecr(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let configs = 20;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for c in 0..configs {
        let mut r = rng::stream(2, "acceptance-grad", c);

        let m_neg = r.random_range(-0.5..0.5);
        let oc = OcSoftmax {
            alpha: r.random_range(1.0..30.0),
            m_pos: m_neg + r.random_range(0.1..1.0),
            m_neg,
        };
        let s: f64 = r.random_range(-1.0..1.0);
        for target in [true, false] {
            let g = oc_softmax_loss(s, target, &oc).unwrap().1;
            let n = numeric(&[s], &mut |x| oc_softmax_loss(x[0], target, &oc).unwrap().0);
            note("oc-softmax", rel_err(&[g], &n));
        }

        let (f, a, len) = (r.random_range(1..6), r.random_range(1..5), r.random_range(1..9));
        let pool: AttentiveStatsPool<f64> = AttentiveStatsPool::new(f, a, &mut r);
        let h = FeatureMap {
            channels: f,
            len,
            data: vecr(f * len, &mut r),
        };
        let up = vecr(2 * f, &mut r);
        let obj = |p: &AttentiveStatsPool<f64>, h: &FeatureMap<f64>| -> f64 {
            p.forward(h).unwrap().0.iter().zip(&up).map(|(o, u)| o * u).sum()
        };
        let (_, cache) = pool.forward(&h).unwrap();
        let mut pg = pool.zeros_like();
        let gh = pool.backward(&h, &cache, &up, &mut pg);
        note("attentive pooling", module_err(&pool, &pg, &|p| obj(p, &h)));
        let n = numeric(&h.data, &mut |x| {
            obj(
                &pool,
                &FeatureMap {
                    data: x.to_vec(),
                    ..h.clone()
                },
            )
        });
        note("attentive pooling", rel_err(&gh.data, &n));

        let b = r.random_range(1..9);
        let flat = vecr(2 * b, &mut r);
        let spoofed: Vec<bool> = (0..b).map(|_| r.random_bool(0.5)).collect();
        let w = [r.random_range(0.2..5.0), r.random_range(0.2..5.0)];
        let pairs = |x: &[f64]| -> Vec<[f64; 2]> { x.chunks(2).map(|c| [3.0 * c[0], 3.0 * c[1]]).collect() };
        let g: Vec<f64> = cm_pretrain_loss(&pairs(&flat), &spoofed, w)
            .unwrap()
            .1
            .iter()
            .flat_map(|p| [3.0 * p[0], 3.0 * p[1]])
            .collect();
        let n = numeric(&flat, &mut |x| cm_pretrain_loss(&pairs(x), &spoofed, w).unwrap().0);
        note("weighted cross-entropy", rel_err(&g, &n));

        let (spk, d) = (r.random_range(2..5), r.random_range(2..7));
        let mut head: AsvHead<f64> = AsvHead::new(d, 6, &mut r);
        head.scale.data[0] = r.random_range(1.0..12.0);
        let labels: Vec<usize> = rand::seq::index::sample(&mut r, 6, spk).into_vec();
        let flat = vecr(2 * spk * d, &mut r);
        let split = |x: &[f64]| -> Vec<Vec<f64>> { x.chunks(d).map(|c| c.to_vec()).collect() };
        let loss_of = |h: &AsvHead<f64>, x: &[f64]| {
            let mut scratch = h.zeros_like();
            asv_pretrain_loss(&split(x), &labels, h, &mut scratch).unwrap().loss
        };
        let mut hg = head.zeros_like();
        let out = asv_pretrain_loss(&split(&flat), &labels, &head, &mut hg).unwrap();
        let n = numeric(&flat, &mut |x| loss_of(&head, x));
        note("angular prototypical", rel_err(&out.grad_embeddings.concat(), &n));
        note("angular prototypical", module_err(&head, &hg, &|h| loss_of(h, &flat)));

        let dim = r.random_range(6..12);
        let cfg = BackendConfig {
            conv_channels: (0..r.random_range(1..4)).map(|_| r.random_range(1..5)).collect(),
            kernel: 3,
            pool_len: r.random_range(1..=6),
            hidden: r.random_range(2..7),
            out: r.random_range(2..7),
            oc: OcSoftmax::default(),
        };
        let be: Backend<f64> = Backend::new(&cfg, &mut r).unwrap();
        let x = stack_embeddings(&EmbeddingTriple::new(vecr(dim, &mut r), vecr(dim, &mut r), vecr(dim, &mut r)).unwrap())
            .unwrap();
        let target = r.random_bool(0.5);
        let loss = |b: &Backend<f64>, x: &FeatureMap<f64>| oc_softmax_loss(b.score(x).unwrap(), target, &b.oc).unwrap().0;
        let (s, cache) = be.forward(&x).unwrap();
        let dl = oc_softmax_loss(s, target, &be.oc).unwrap().1;
        let mut bg = be.zeros_like();
        let gx = be.backward(&cache, dl, &mut bg);
        note("backend path", module_err(&be, &bg, &|b| loss(b, &x)));
        let n = numeric(&x.data, &mut |v| {
            loss(
                &be,
                &FeatureMap {
                    data: v.to_vec(),
                    ..x.clone()
                },
            )
        });
        note("backend path", rel_err(&gx.data, &n));
    }
    let t = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        max < 1e-4 && t < Duration::from_secs(60),
        format!("{configs} configs each, worst relative error: {} ({t:.2?})", parts.join(", ")),
    )
}

// criterion 3

fn protocol() -> Outcome {
    let utts: Vec<PoolUtterance> = (0..20)
        .flat_map(|s| {
            (0..30).map(move |k| PoolUtterance {
                id: format!("u{s}-{k}"),
                speaker_id: format!("s{s}"),
                is_spoofed: k % 3 == 2,
            })
        })
        .collect();
    let mut pool = TrialPool::new();
    pool.add_group(&utts, GroupRoles::ALL);
    let mut details = Vec::new();
    let mut pass = true;
    for (mode, want) in [(OptimisationMode::Fixed, [10, 5, 5, 0]), (OptimisationMode::Joint, [5, 5, 5, 5])] {
        let profile = mode.profile();
        pass &= profile.counts(20) == want;
        let mut r = rng::stream(3, "acceptance-protocol", 0);
        let mut totals = [0usize; 4];
        let mut exact = true;
        for _ in 0..10_000 {
            let mut c = [0usize; 4];
            for t in sample_batch(&pool, &profile, 20, &mut r).unwrap() {
                c[t.trial_type.index()] += 1;
            }
            exact &= c == want;
            for i in 0..4 {
                totals[i] += c[i];
            }
        }
        let n = 200_000.0;
        let active: Vec<usize> = (0..4).filter(|&i| profile.weights()[i] > 0.0).collect();
        let chi2: f64 = active
            .iter()
            .map(|&i| {
                let e = profile.weights()[i] * n;
                (totals[i] as f64 - e).powi(2) / e
            })
            .sum();
        let critical = [10.828, 13.816, 16.266][active.len() - 2];
        pass &= exact && chi2 < critical && (mode == OptimisationMode::Joint || totals[3] == 0);
        details.push(format!(
            "{mode}: split {want:?} exact={exact}, chi2 {chi2:.3} < {critical}, type-4 count {}",
            totals[3]
        ));
    }
    outcome(pass, details.join("; "))
}

// criterion 4

fn freeze_contract() -> Outcome {
    let mk = |aux: bool, seed: u64| -> Corpus<f32> {
        let mut spec = if aux {
            CorpusSpec::aux_like("aux", 10, seed)
        } else {
            CorpusSpec::base_like(&format!("base{seed}"), 10, seed)
        };
        spec.n_speakers = 6;
        spec.n_bonafide = 36;
        spec.n_spoofed = 60;
        spec.signal_length = 320;
        generate_corpus(&spec).unwrap()
    };
    let (base, aux, dev) = (mk(false, 1), mk(true, 2), mk(false, 3));
    let dev_trials = sample_eval_trials(&dev, [10, 10, 10, 5], 4).unwrap();
    let fe = FrontEndConfig {
        channels: vec![6, 8],
        kernels: vec![16, 3],
        strides: vec![8, 2],
        activations: vec![Activation::LogEnergy, Activation::Silu],
        attention_dim: 4,
    };
    let sub = SubsystemConfig {
        embed_dim: 8,
        asv: fe.clone(),
        cm: fe,
        cm_hidden: 8,
    };
    let asv: AsvEncoder<f32> = AsvEncoder::new(&sub, 6, &mut rng::stream(5, "asv", 0)).unwrap();
    let cm: CmEncoder<f32> = CmEncoder::new(&sub, &mut rng::stream(5, "cm", 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (asv_in, cm_in) = (dir.path().join("asv.in"), dir.path().join("cm.in"));
    save_asv(&asv_in, &asv).unwrap();
    save_cm(&cm_in, &cm).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 5,
        learning_rate: 1e-2,
        subsystem_learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let backend = BackendConfig {
        conv_channels: vec![4, 4],
        pool_len: 4,
        hidden: 8,
        out: 8,
        ..BackendConfig::default()
    };
    let mut pass = true;
    let mut details = Vec::new();
    for condition in TrainingCondition::ALL {
        let data = SasvData {
            base: &base,
            aux: Some(&aux),
            dev: &dev,
            dev_trials: &dev_trials,
            frozen: None,
        };
        let out = train_sasv(&asv, &cm, &backend, OptimisationMode::Fixed, condition, &data, &cfg, 1, &mut |_| Ok(()))
            .unwrap();
        let saved = dir.path().join(condition.name());
        out.bundle.save(&saved).unwrap();
        let same = |a: &Path, b: &Path| fs::read(a).unwrap() == fs::read(b).unwrap();
        let ok = same(&asv_in, &saved.join(ModelBundle::<f32>::ASV_FILE))
            && same(&cm_in, &saved.join(ModelBundle::<f32>::CM_FILE));
        pass &= ok;
        details.push(format!("{condition} {}", if ok { "identical" } else { "CHANGED" }));
    }
    outcome(pass, format!("sub-system checkpoints after fixed training: {}", details.join(", ")))
}

// criterion 5 to 9

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn reproduce(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_sasv"))
        .args(["reproduce-all", "--config"])
        .arg(shipped_config())
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).trim().to_string());
    }
    Ok(start.elapsed())
}

fn seed_reports(cfg: &ExperimentConfig, mode: OptimisationMode, condition: TrainingCondition) -> Vec<EvalReport> {
    let layout = Layout::new(cfg);
    cfg.seeds
        .iter()
        .map(|&seed| {
            let path = layout.eval_scores(RunKey { mode, condition, seed });
            evaluate(&read_scores::<f64>(&path).unwrap()).unwrap()
        })
        .collect()
}

fn outputs_to_compare(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let layout = Layout::new(cfg);
    let mut v = vec![PathBuf::from(SUMMARY_TABLE), PathBuf::from(SUMMARY_SIDECAR)];
    for mode in OptimisationMode::ALL {
        for condition in TrainingCondition::ALL {
            for &seed in &cfg.seeds {
                let p = layout.eval_scores(RunKey { mode, condition, seed });
                v.push(p.strip_prefix(&layout.root).unwrap().to_path_buf());
            }
        }
    }
    v
}

fn pipeline(results: &mut Vec<(u8, &'static str, Outcome)>) {
    let work = tempfile::tempdir().unwrap();
    let (a, b) = (work.path().join("first"), work.path().join("second"));
    let first = reproduce(&a);
    let second = reproduce(&b);
    let load = |out: &Path| {
        let mut cfg = ExperimentConfig::load(&shipped_config()).unwrap();
        cfg.output_dir = out.to_path_buf();
        cfg
    };
    let (cfg, cfg_b) = (load(&a), load(&b));
    let failed = |e: &str| outcome(false, format!("reproduce-all failed: {e}"));
    let t = match (&first, &second) {
        (Ok(t), Ok(_)) => *t,
        (Err(e), _) | (_, Err(e)) => {
            for (n, name) in [
                (5, "fixed-CM speaker blindness"),
                (6, "joint ASV SPF-EER trend"),
                (7, "tandem trend with auxiliary bona fide data"),
                (8, "determinism"),
                (9, "runtime budget"),
            ] {
                results.push((n, name, failed(e)));
            }
            return;
        }
    };

    let fixed_base = seed_reports(&cfg, OptimisationMode::Fixed, TrainingCondition::Base);
    let cm_sv: Vec<f64> = fixed_base.iter().map(|r| r.cm.sv).collect();
    let mean_cm_sv = cm_sv.iter().sum::<f64>() / cm_sv.len() as f64;
    results.push((
        5,
        "fixed-CM speaker blindness",
        outcome(
            (45.0..=55.0).contains(&mean_cm_sv),
            format!("CM SV-EER {mean_cm_sv:.2}% averaged over seeds {cm_sv:.2?}"),
        ),
    ));

    let joint_base = seed_reports(&cfg, OptimisationMode::Joint, TrainingCondition::Base);
    let pairs: Vec<(f64, f64)> = fixed_base.iter().zip(&joint_base).map(|(f, j)| (f.asv.spf, j.asv.spf)).collect();
    let wins = pairs.iter().filter(|(f, j)| j < f).count();
    results.push((
        6,
        "joint ASV SPF-EER trend",
        outcome(
            wins >= 4,
            format!("joint < fixed in {wins}/{} seeds; (fixed, joint) {pairs:.2?}", pairs.len()),
        ),
    ));

    let mean_sasv = |m| {
        let r = seed_reports(&cfg, m, TrainingCondition::BaseAuxBonafide);
        r.iter().map(|r| r.full.sasv).sum::<f64>() / r.len() as f64
    };
    let (f7, j7) = (mean_sasv(OptimisationMode::Fixed), mean_sasv(OptimisationMode::Joint));
    results.push((
        7,
        "tandem trend with auxiliary bona fide data",
        outcome(
            j7 < f7,
            format!(
                "base_aux_bf SASV-EER fixed {f7:.2}% vs joint {j7:.2}% (relative change {:+.1}%)",
                100.0 * (j7 - f7) / f7
            ),
        ),
    ));

    let (ra, rb) = (Layout::new(&cfg).root, Layout::new(&cfg_b).root);
    let files = outputs_to_compare(&cfg);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(ra.join(f)).ok() != fs::read(rb.join(f)).ok() || !ra.join(f).is_file())
        .map(|f| f.display().to_string())
        .collect();
    results.push((
        8,
        "determinism",
        outcome(
            differing.is_empty(),
            format!("{} score files and summaries compared, differing: {differing:?}", files.len()),
        ),
    ));

    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    results.push((
        9,
        "runtime budget",
        outcome(
            t < Duration::from_secs(30 * 60),
            format!("reproduce-all took {:.1} min on {cores} core(s); budget 30 min", t.as_secs_f64() / 60.0),
        ),
    ));
}

fn main() {
    let mut results: Vec<(u8, &'static str, Outcome)> = vec![
        (1, "EER oracle equivalence", eer_oracle()),
        (2, "gradient correctness", gradients()),
        (3, "protocol fidelity", protocol()),
        (4, "freeze contract", freeze_contract()),
    ];
    pipeline(&mut results);
    results.sort_by_key(|r| r.0);
    let mut failures = 0;
    for (n, name, o) in &results {
        failures += usize::from(!o.pass);
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failures, results.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

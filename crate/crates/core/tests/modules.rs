//! Structural properties of the pooling layer, encoders and backend.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use sasv_core::backend::{oc_softmax_loss, stack_embeddings, Backend, BackendConfig};
use sasv_core::bundle::ModelBundle;
use sasv_core::encoders::{AsvEncoder, CmEncoder, EmbeddingTriple, FrontEndConfig, SubsystemConfig};
use sasv_core::nn::{Activation, Adam, AttentiveStatsPool, FeatureMap, Module};
use sasv_core::rng;

fn feature_map(f: usize, n: usize, r: &mut impl Rng) -> FeatureMap<f64> {
    FeatureMap {
        channels: f,
        len: n,
        data: (0..f * n).map(|_| r.random_range(-2.0..2.0)).collect(),
    }
}

fn permute_frames(h: &FeatureMap<f64>, perm: &[usize]) -> FeatureMap<f64> {
    let mut out = h.clone();
    for c in 0..h.channels {
        for (t, &p) in perm.iter().enumerate() {
            out.data[c * h.len + t] = h.data[c * h.len + p];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pooling_ignores_frame_order(seed in any::<u64>(), f in 1usize..8, a in 1usize..6, n in 1usize..20) {
        let mut r = rng::stream(seed, "perm", 0);
        let pool: AttentiveStatsPool<f64> = AttentiveStatsPool::new(f, a, &mut r);
        let h = feature_map(f, n, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let (x, _) = pool.forward(&h).unwrap();
        let (y, _) = pool.forward(&permute_frames(&h, &perm)).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{p} vs {q}");
        }
    }

    #[test]
    fn pooled_std_never_drops_below_the_floor(seed in any::<u64>(), f in 1usize..6, n in 1usize..12, constant in any::<bool>()) {
        let mut r = rng::stream(seed, "std", 0);
        let pool: AttentiveStatsPool<f64> = AttentiveStatsPool::new(f, 3, &mut r);
        let mut h = feature_map(f, n, &mut r);
        if constant {
            for c in 0..f {
                let v = h.data[c * n];
                h.data[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = v);
            }
        }
        let (out, _) = pool.forward(&h).unwrap();
        let floor = pool.eps.sqrt();
        for s in &out[f..] {
            prop_assert!(s.is_finite() && *s >= floor * (1.0 - 1e-9), "std {s} below {floor}");
        }
    }

    #[test]
    fn backend_scores_are_cosines(seed in any::<u64>(), d in 4usize..16, spread in 0.01f64..100.0) {
        let mut r = rng::stream(seed, "bound", 0);
        let be: Backend<f64> = Backend::new(&BackendConfig::default(), &mut r).unwrap();
        let mut v = || (0..d).map(|_| r.random_range(-spread..spread)).collect::<Vec<f64>>();
        let t = EmbeddingTriple::new(v(), v(), v()).unwrap();
        let s = be.score_triple(&t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "{s}");
    }
}

#[test]
fn encoder_embedding_dimensions_agree() {
    let mut r = rng::stream(1, "dims", 0);
    for _ in 0..20 {
        let fe = |r: &mut rng::Rng| {
            let layers = r.random_range(1..4);
            FrontEndConfig {
                channels: (0..layers).map(|_| r.random_range(1..12)).collect(),
                kernels: (0..layers).map(|_| r.random_range(1..9)).collect(),
                strides: (0..layers).map(|_| r.random_range(1..4)).collect(),
                activations: (0..layers)
                    .map(|i| if i == 0 { Activation::LogEnergy } else { Activation::Silu })
                    .collect(),
                attention_dim: r.random_range(1..8),
            }
        };
        let sub = SubsystemConfig {
            embed_dim: r.random_range(1..40),
            asv: fe(&mut r),
            cm: fe(&mut r),
            cm_hidden: r.random_range(1..16),
        };
        let asv: AsvEncoder<f32> = AsvEncoder::new(&sub, 4, &mut r).unwrap();
        let cm: CmEncoder<f32> = CmEncoder::new(&sub, &mut r).unwrap();
        assert_eq!(asv.embed_dim(), sub.embed_dim);
        assert_eq!(cm.embed_dim(), sub.embed_dim);
        let len = asv.min_len().max(cm.min_len()) + 7;
        let signal: Vec<f32> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        assert_eq!(asv.embed(&signal).unwrap().len(), cm.run(&signal).unwrap().embedding.len());
        let be = Backend::new(&BackendConfig::default(), &mut r).unwrap();
        ModelBundle::new(asv, cm, be).unwrap();
    }
}

/// Targets share enrolment and test embeddings and carry a bona fide CM
/// code; non-targets differ in one of the two. Training only the backend
/// must bring the mean OC loss under log 2 within 200 steps.
#[test]
fn backend_learns_separable_triples_within_200_steps() {
    let mut r = rng::stream(2, "separable", 0);
    let d = 16;
    let unit = |r: &mut rng::Rng| {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let speakers: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut r)).collect();
    let bona = unit(&mut r);
    let spoof: Vec<f64> = bona.iter().map(|x| -x).collect();
    let mut triples = Vec::new();
    for i in 0..6 {
        let j = (i + 1) % 6;
        triples.push((speakers[i].clone(), speakers[i].clone(), bona.clone(), true));
        triples.push((speakers[i].clone(), speakers[j].clone(), bona.clone(), false));
        triples.push((speakers[i].clone(), speakers[i].clone(), spoof.clone(), false));
        triples.push((speakers[i].clone(), speakers[j].clone(), spoof.clone(), false));
    }
    let inputs: Vec<(FeatureMap<f64>, bool)> = triples
        .into_iter()
        .map(|(a, b, c, y)| (stack_embeddings(&EmbeddingTriple::new(a, b, c).unwrap()).unwrap(), y))
        .collect();

    let mut be: Backend<f64> = Backend::new(&BackendConfig::default(), &mut r).unwrap();
    let mut opt = Adam::new(1e-3);
    let mean_loss = |be: &Backend<f64>| {
        inputs
            .iter()
            .map(|(x, y)| oc_softmax_loss(be.score(x).unwrap(), *y, &be.oc).unwrap().0)
            .sum::<f64>()
            / inputs.len() as f64
    };
    let start = mean_loss(&be);
    let mut reached = None;
    for step in 1..=200 {
        let mut g = be.zeros_like();
        for (x, y) in &inputs {
            let (s, cache) = be.forward(x).unwrap();
            let (_, dl) = oc_softmax_loss(s, *y, &be.oc).unwrap();
            be.backward(&cache, dl / inputs.len() as f64, &mut g);
        }
        opt.update(&mut be, &g);
        be.normalize_direction();
        if mean_loss(&be) < std::f64::consts::LN_2 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "loss {start} -> {} after 200 steps", mean_loss(&be));
}

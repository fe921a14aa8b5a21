//! SASV training contracts: frozen sub-systems, gradient flow, data conditions.

use std::fs;

use sasv_core::backend::BackendConfig;
use sasv_core::bundle::{save_asv, save_cm, ModelBundle};
use sasv_core::encoders::{AsvEncoder, CmEncoder, FrontEndConfig, SubsystemConfig};
use sasv_core::nn::{Activation, Module};
use sasv_core::rng;
use sasv_core::synth::{generate_corpus, Corpus, CorpusSpec};
use sasv_core::training::{
    frozen_cache, sample_eval_trials, train_sasv, OptimisationMode, SasvData, TrainConfig, TrainingCondition,
};

fn tiny_subsystems() -> SubsystemConfig {
    let fe = FrontEndConfig {
        channels: vec![6, 8],
        kernels: vec![16, 3],
        strides: vec![8, 2],
        activations: vec![Activation::LogEnergy, Activation::Silu],
        attention_dim: 4,
    };
    SubsystemConfig {
        embed_dim: 8,
        asv: fe.clone(),
        cm: fe,
        cm_hidden: 8,
    }
}

fn tiny_backend() -> BackendConfig {
    BackendConfig {
        conv_channels: vec![4, 4],
        kernel: 3,
        pool_len: 4,
        hidden: 8,
        out: 8,
        ..BackendConfig::default()
    }
}

fn corpus(aux: bool, seed: u64) -> Corpus<f32> {
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
}

struct Fixture {
    base: Corpus<f32>,
    aux: Corpus<f32>,
    dev: Corpus<f32>,
    dev_trials: Vec<sasv_core::protocol::TrialPair>,
    asv: AsvEncoder<f32>,
    cm: CmEncoder<f32>,
}

fn fixture() -> Fixture {
    let base = corpus(false, 1);
    let aux = corpus(true, 2);
    let dev = corpus(false, 3);
    let dev_trials = sample_eval_trials(&dev, [10, 10, 10, 5], 4).unwrap();
    let sub = tiny_subsystems();
    let asv = AsvEncoder::new(&sub, 6, &mut rng::stream(5, "asv", 0)).unwrap();
    let cm = CmEncoder::new(&sub, &mut rng::stream(5, "cm", 0)).unwrap();
    Fixture {
        base,
        aux,
        dev,
        dev_trials,
        asv,
        cm,
    }
}

fn short_training() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        learning_rate: 1e-2,
        subsystem_learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

fn data(f: &Fixture) -> SasvData<'_, f32> {
    SasvData {
        base: &f.base,
        aux: Some(&f.aux),
        dev: &f.dev,
        dev_trials: &f.dev_trials,
        frozen: None,
    }
}

#[test]
fn fixed_mode_checkpoints_are_byte_identical_for_every_condition() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (asv_in, cm_in) = (dir.path().join("asv.in"), dir.path().join("cm.in"));
    save_asv(&asv_in, &f.asv).unwrap();
    save_cm(&cm_in, &f.cm).unwrap();
    for condition in TrainingCondition::ALL {
        let mut epochs_seen = 0;
        let out = train_sasv(
            &f.asv,
            &f.cm,
            &tiny_backend(),
            OptimisationMode::Fixed,
            condition,
            &data(&f),
            &short_training(),
            9,
            &mut |rec| {
                epochs_seen += 1;
                assert_eq!(rec.bundle.asv, f.asv);
                assert_eq!(rec.bundle.cm, f.cm);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(epochs_seen, 2);
        let saved = dir.path().join(condition.name());
        out.bundle.save(&saved).unwrap();
        assert_eq!(
            fs::read(&asv_in).unwrap(),
            fs::read(saved.join(ModelBundle::<f32>::ASV_FILE)).unwrap(),
            "{condition}: ASV checkpoint changed"
        );
        assert_eq!(
            fs::read(&cm_in).unwrap(),
            fs::read(saved.join(ModelBundle::<f32>::CM_FILE)).unwrap(),
            "{condition}: CM checkpoint changed"
        );
        let [ga, gc, gb] = out.first_batch_grad_sq_norms;
        assert_eq!((ga, gc), (0.0, 0.0));
        assert!(gb > 0.0);
    }
}

#[test]
fn joint_mode_moves_every_component() {
    let f = fixture();
    for condition in TrainingCondition::ALL {
        let mut first: Option<ModelBundle<f32>> = None;
        let out = train_sasv(
            &f.asv,
            &f.cm,
            &tiny_backend(),
            OptimisationMode::Joint,
            condition,
            &data(&f),
            &short_training(),
            9,
            &mut |rec| {
                if rec.epoch == 1 {
                    first = Some(rec.bundle.clone());
                }
                Ok(())
            },
        )
        .unwrap();
        let norms = out.first_batch_grad_sq_norms;
        assert!(norms.iter().all(|&n| n > 0.0 && n.is_finite()), "{condition}: {norms:?}");
        let after = first.expect("epoch 1 callback");
        assert_ne!(after.asv, f.asv, "{condition}: ASV unchanged");
        assert_ne!(after.cm, f.cm, "{condition}: CM unchanged");
        let init = ModelBundle::new(
            f.asv.clone(),
            f.cm.clone(),
            sasv_core::backend::Backend::new(&tiny_backend(), &mut rng::stream(9, "backend-init", 0)).unwrap(),
        )
        .unwrap();
        assert_ne!(after.backend, init.backend, "{condition}: backend unchanged");
        assert!(after.is_finite());
    }
}

#[test]
fn training_is_deterministic_and_shares_the_frozen_cache() {
    let f = fixture();
    let cache = frozen_cache(&f.asv, &f.cm, &[&f.base, &f.aux, &f.dev]).unwrap();
    let run = |frozen| {
        let d = SasvData { frozen, ..data(&f) };
        train_sasv(
            &f.asv,
            &f.cm,
            &tiny_backend(),
            OptimisationMode::Fixed,
            TrainingCondition::BaseAuxBonafide,
            &d,
            &short_training(),
            3,
            &mut |_| Ok(()),
        )
        .unwrap()
    };
    let (a, b) = (run(None), run(Some(&cache)));
    assert_eq!(a.bundle.backend, b.bundle.backend);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.dev_reports, b.dev_reports);
    assert_eq!(a.bundle.manifest, b.bundle.manifest);
}

#[test]
fn auxiliary_conditions_need_the_auxiliary_corpus() {
    let f = fixture();
    let d = SasvData { aux: None, ..data(&f) };
    for condition in [TrainingCondition::BaseAux, TrainingCondition::BaseAuxBonafide] {
        let r = train_sasv(
            &f.asv,
            &f.cm,
            &tiny_backend(),
            OptimisationMode::Fixed,
            condition,
            &d,
            &short_training(),
            1,
            &mut |_| Ok(()),
        );
        assert!(r.is_err(), "{condition} trained without auxiliary data");
    }
}

#[test]
fn selected_epoch_has_the_lowest_dev_sasv_eer() {
    let f = fixture();
    let cfg = TrainConfig {
        epochs: 4,
        ..short_training()
    };
    let mut bundles = Vec::new();
    let out = train_sasv(
        &f.asv,
        &f.cm,
        &tiny_backend(),
        OptimisationMode::Fixed,
        TrainingCondition::Base,
        &data(&f),
        &cfg,
        2,
        &mut |rec| {
            bundles.push(rec.bundle.backend.clone());
            Ok(())
        },
    )
    .unwrap();
    let eers: Vec<f64> = out.dev_reports.iter().map(|r| r.full.sasv).collect();
    let best = eers.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(eers.iter().position(|&v| v == best).unwrap() + 1, out.selected_epoch);
    assert_eq!(out.bundle.backend, bundles[out.selected_epoch - 1]);
    assert_eq!(out.bundle.manifest["selected_epoch"], out.selected_epoch.to_string());
    assert!(out.bundle.n_params() > 0);
}

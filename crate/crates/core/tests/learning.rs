mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use tddl_core::classification::{stratified_split, training_samples, WindowSpec};
use tddl_core::fixed_point::classification_loss;
use tddl_core::hsi_io::{synth_scene, SceneSpec};
use tddl_core::learning::{
    center_codes, initial_model, learning_rate, odl_train_with_probe, tddl_train, tddl_train_observed,
    unsupervised_dictionary, Model, OdlConfig, TrainConfig, TrainingSample,
};
use tddl_core::{Classifier, Dictionary, PriorKind, SolverConfig};

fn scene_samples(seed: u64, fraction: f64) -> Vec<TrainingSample> {
    let scene = synth_scene(&SceneSpec {
        seed,
        ..SceneSpec::default()
    })
    .unwrap();
    let mask = stratified_split(&scene.gt, fraction, seed).unwrap();
    training_samples(&scene.cube, &scene.gt, &mask, WindowSpec::new(3).unwrap()).unwrap()
}

fn names() -> Vec<String> {
    (1..=4).map(|c| format!("c{c}")).collect()
}

fn short_config(prior: PriorKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_prior(prior);
    cfg.seed = seed;
    cfg.total_iters = 10;
    cfg.t0 = 1.0;
    cfg.batch_size = 16;
    cfg
}

fn model0(samples: &[TrainingSample], cfg: &TrainConfig) -> Model {
    let solver = SolverConfig::default();
    let dict = unsupervised_dictionary(samples, 4, cfg, &OdlConfig { iters: 5, batch_size: 50 }).unwrap();
    initial_model(samples, names(), cfg, dict, &solver).unwrap()
}

/// Mean classification loss of the center codes over `probe`.
fn probe_loss(model: &Model, probe: &[TrainingSample]) -> f64 {
    let codes = center_codes(model.dictionary.matrix(), probe, &model.config, &SolverConfig::default()).unwrap();
    let w = model.classifier.weights();
    let total: f64 = probe
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut y = DVector::zeros(w.nrows());
            y[s.label] = 1.0;
            classification_loss(w, &codes.column(j).into_owned(), &y, model.config.mu)
        })
        .sum();
    total / probe.len() as f64
}

#[test]
fn odl_lowers_probe_objective() {
    for seed in 0..5 {
        let samples = scene_samples(seed, 0.2);
        let split = samples.len() * 3 / 4;
        let centers = |s: &[TrainingSample]| {
            DMatrix::from_columns(&s.iter().map(|t| t.patch.center_pixel()).collect::<Vec<_>>())
        };
        let train = centers(&samples[..split]);
        let probe = centers(&samples[split..]);
        let labels: Vec<usize> = samples[..split].iter().map(|s| s.label).collect();
        let d0 = tddl_core::learning::init_dictionary(&train, &labels, 4, 5, seed).unwrap();
        let (d, history) = odl_train_with_probe(&train, &d0, 1e-2, 20, 64, seed, &probe).unwrap();
        let start = history[0];
        let tail = history[history.len() - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail <= start, "seed {seed}: probe objective {start} -> {tail}");
        for col in d.matrix().column_iter() {
            assert!((col.norm() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn joint_training_lowers_probe_loss() {
    let mut improved = 0;
    for seed in 0..5 {
        let samples = scene_samples(seed, 0.3);
        let mut cfg = TrainConfig::for_prior(PriorKind::Joint);
        cfg.seed = seed;
        cfg.total_iters = 200;
        cfg.t0 = 20.0;
        cfg.batch_size = 100;
        let m0 = model0(&samples, &cfg);
        let probe: Vec<TrainingSample> = samples.iter().step_by(3).cloned().collect();
        let before = probe_loss(&m0, &probe);
        let trained = tddl_train(&samples, m0, &SolverConfig::default()).unwrap();
        let after = probe_loss(&trained.model, &probe);
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 4, "probe loss fell in only {improved}/5 seeds");
}

#[test]
fn zero_iterations_return_model_unchanged() {
    let samples = scene_samples(1, 0.1);
    let mut cfg = short_config(PriorKind::L1, 1);
    cfg.total_iters = 0;
    cfg.t0 = 0.0;
    let m0 = model0(&samples, &cfg);
    let out = tddl_train(&samples, m0.clone(), &SolverConfig::default()).unwrap();
    assert_eq!(out.model, m0);
    assert!(out.log.is_empty());
}

#[test]
fn zero_rate_is_identity() {
    let samples = scene_samples(2, 0.1);
    for prior in [PriorKind::L1, PriorKind::Joint, PriorKind::Laplacian] {
        let mut cfg = short_config(prior, 2);
        cfg.rho = 0.0;
        let m0 = model0(&samples, &cfg);
        let out = tddl_train(&samples, m0.clone(), &SolverConfig::default()).unwrap();
        assert_eq!(out.model.dictionary, m0.dictionary);
        assert_eq!(out.model.classifier, m0.classifier);
        assert_eq!(out.log.len(), cfg.total_iters);
    }
}

#[test]
fn zero_loss_gradient_leaves_model_unchanged() {
    // Every sample is an atom whose classifier output equals its label.
    let d = DMatrix::<f64>::identity(4, 4);
    let samples: Vec<TrainingSample> = (0..4)
        .map(|k| TrainingSample {
            patch: tddl_core::Patch::single(&(d.column(k) * 2.0)).unwrap(),
            label: k,
        })
        .collect();
    let mut cfg = short_config(PriorKind::L1, 0);
    cfg.mu = 0.0;
    cfg.atoms_per_class = 1;
    // α = (2 − λ/2)·e_k, so W = I / (2 − λ/2) classifies exactly.
    let scale = 1.0 / (2.0 - cfg.lambda / 2.0);
    let model = Model {
        dictionary: Dictionary::new(d).unwrap(),
        classifier: Classifier::new(DMatrix::identity(4, 4) * scale).unwrap(),
        config: cfg,
        class_names: names(),
    };
    let out = tddl_train(&samples, model.clone(), &SolverConfig::precise()).unwrap();
    assert!((out.model.dictionary.matrix() - model.dictionary.matrix()).amax() < 1e-12);
    assert!((out.model.classifier.weights() - model.classifier.weights()).amax() < 1e-12);
}

#[test]
fn atoms_stay_unit_norm_after_every_step() {
    let samples = scene_samples(3, 0.1);
    for prior in [PriorKind::L1, PriorKind::Joint, PriorKind::Laplacian] {
        let mut cfg = short_config(prior, 3);
        cfg.rho *= 10.0;
        let m0 = model0(&samples, &cfg);
        let mut steps = 0;
        tddl_train_observed(&samples, m0, &SolverConfig::default(), |_, d, _| {
            steps += 1;
            for col in d.column_iter() {
                assert!((col.norm() - 1.0).abs() <= 1e-9);
            }
        })
        .unwrap();
        assert_eq!(steps, cfg.total_iters);
    }
}

#[test]
fn training_is_deterministic() {
    let samples = scene_samples(4, 0.1);
    let cfg = short_config(PriorKind::Laplacian, 4);
    let run = || tddl_train(&samples, model0(&samples, &cfg), &SolverConfig::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    let strip = |o: &tddl_core::TrainOutcome| -> Vec<(usize, u64, usize)> {
        o.log.iter().map(|r| (r.iteration, r.loss.to_bits(), r.skip_count)).collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn log_records_are_line_formatted() {
    let samples = scene_samples(5, 0.1);
    let cfg = short_config(PriorKind::L1, 5);
    let out = tddl_train(&samples, model0(&samples, &cfg), &SolverConfig::default()).unwrap();
    let line = out.log[0].to_line();
    assert!(line.starts_with("iteration=1 loss="));
    assert!(line.contains(" skip_count=") && line.contains(" wall_ms="));
}

proptest! {
    #[test]
    fn learning_rate_never_increases(rho in 1e-4f64..1.0, t0 in 0.0f64..500.0, t in 1usize..5000) {
        prop_assert!(learning_rate(t + 1, rho, t0) <= learning_rate(t, rho, t0));
        prop_assert!(learning_rate(t, rho, t0) <= rho);
    }
}

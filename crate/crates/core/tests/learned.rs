use std::fs;
use std::sync::Arc;

use learnopt::classic::{ClassicKind, ClassicOptimizer, Hyperparams, Optimizer};
use learnopt::learned::{
    dm_inputs, features, load_checkpoint, save_checkpoint, CoordState, LearnedConfig, LearnedOptimizer, LearnedParams,
    Manifest, ModelKind, MANIFEST_FILE,
};
use learnopt::{seeded_rng, Error, Rng, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random_params(config: LearnedConfig, seed: u64) -> Arc<LearnedParams> {
    let mut rng = seeded_rng(seed);
    Arc::new(LearnedParams::init(config, &mut rng).unwrap())
}

fn gradient_sequence(rng: &mut Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-3.0..1.0))).collect())
        .collect()
}

#[test]
fn input_pipeline_is_scale_invariant() {
    let config = LearnedConfig::rnnprop().with_eps(0.0);
    let params = random_params(config.clone(), 1);
    let mut rng = seeded_rng(2);
    for trial in 0..100 {
        let dim = 8;
        let gs = gradient_sequence(&mut rng, 15, dim);
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0f64).exp()).collect();
        let mut plain = CoordState::new(dim).unwrap();
        let mut scaled = CoordState::new(dim).unwrap();
        let mut a = LearnedOptimizer::new(params.clone());
        let mut b = LearnedOptimizer::new(params.clone());
        for (t, g) in gs.iter().enumerate() {
            let cg: Vec<f64> = g.iter().zip(&c).map(|(g, c)| g * c).collect();
            let fa = features(&config, &mut plain, g).unwrap();
            let fb = features(&config, &mut scaled, &cg).unwrap();
            for (x, y) in fa.data().iter().zip(fb.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "features trial {trial} step {t}");
            }
            let da = a.step_flat(g).unwrap();
            let db = b.step_flat(&cg).unwrap();
            for (x, y) in da.iter().zip(&db) {
                assert!((x - y).abs() <= 1e-12, "Δθ trial {trial} step {t}: {x:e} vs {y:e}");
            }
        }
    }
}

#[test]
fn scaling_by_ten_leaves_features_unchanged() {
    let config = LearnedConfig::rnnprop().with_eps(0.0);
    let mut rng = seeded_rng(3);
    let mut a = CoordState::new(4).unwrap();
    let mut b = CoordState::new(4).unwrap();
    for g in gradient_sequence(&mut rng, 10, 4) {
        let ten: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
        let (ma, ga) = a.compute_inputs(&config, &g).unwrap();
        let (mb, gb) = b.compute_inputs(&config, &ten).unwrap();
        for (x, y) in ma.iter().chain(&ga).zip(mb.iter().chain(&gb)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn dm_inputs_are_scale_sensitive() {
    let mut st = CoordState::new(1).unwrap();
    let config = LearnedConfig::dm();
    let a = features(&config, &mut st, &[0.5]).unwrap();
    let b = features(&config, &mut st, &[5.0]).unwrap();
    assert_ne!(a, b);
    assert_eq!(dm_inputs(10.0, 1.0), (0.0, 1.0));
}

#[test]
fn forced_readout_reduces_to_adam() {
    let config = LearnedConfig::rnnprop();
    let params = random_params(config.clone(), 4);
    let c = 0.01;
    let mut rng = seeded_rng(5);
    let mut worst_tanh: f64 = 0.0;
    let mut worst_adam: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=10);
        let gs = gradient_sequence(&mut rng, len, 1);
        let mut rnn = LearnedOptimizer::new(params.clone());
        let mut shadow = CoordState::new(1).unwrap();
        let hp = Hyperparams {
            lr: config.alpha * c,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            ..Hyperparams::defaults(ClassicKind::Adam)
        };
        let mut adam = ClassicOptimizer::new(ClassicKind::Adam, hp).unwrap();
        for g in &gs {
            let grad = [Tensor::vector(g.clone())];
            let d = rnn.step_with_readout(&grad, |m, _| c * m).unwrap()[0].data()[0];
            let (m, _) = shadow.compute_inputs(&config, g).unwrap();
            let linear = config.alpha * c * m[0];
            let adam_step = adam.step(&grad).unwrap()[0].data()[0];
            if linear != 0.0 {
                worst_tanh = worst_tanh.max(((d - linear) / linear).abs());
                assert!(((d - linear) / linear).abs() <= (c * m[0]).powi(2) / 3.0 + 1e-12);
            }
            if adam_step != 0.0 {
                worst_adam = worst_adam.max(((d + adam_step) / adam_step).abs());
            }
        }
    }
    assert!(worst_tanh < 1e-3, "worst relative error vs α·c·m̃: {worst_tanh:e}");
    assert!(worst_adam < 1e-3, "worst relative error vs Adam: {worst_adam:e}");
}

#[test]
fn coordinates_are_processed_independently() {
    let params = random_params(LearnedConfig::rnnprop(), 6);
    let mut rng = seeded_rng(7);
    let n = 37;
    let gs = gradient_sequence(&mut rng, 6, n);
    let perm: Vec<usize> = rand::seq::index::sample(&mut rng, n, n).into_vec();
    let mut a = LearnedOptimizer::new(params.clone());
    let mut b = LearnedOptimizer::new(params);
    for g in &gs {
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let da = a.step_flat(g).unwrap();
        let db = b.step_flat(&gp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((db[k] - da[i]).abs() <= 1e-15, "coordinate {i}");
        }
    }
}

#[test]
fn parameter_count_ignores_optimizee_size() {
    let params = random_params(LearnedConfig::rnnprop(), 8);
    let count = params.num_params();
    let mut rng = seeded_rng(9);
    for n in [10, 10_000] {
        let mut opt = LearnedOptimizer::new(params.clone());
        let d = opt.step_flat(&gradient_sequence(&mut rng, 1, n)[0]).unwrap();
        assert_eq!(d.len(), n);
        assert_eq!(opt.params().num_params(), count);
        assert_eq!(opt.state().unwrap().hidden(0).shape(), &[n, 20]);
    }
}

#[test]
fn init_state_is_zero() {
    let st = CoordState::new(5).unwrap();
    assert!(st.m.iter().chain(&st.v).all(|&x| x == 0.0));
    assert!(st.lstm.iter().all(|s| s.shape() == [5, 40] && s.data().iter().all(|&x| x == 0.0)));
    assert_eq!(st.t, 0);
    assert!(CoordState::new(0).is_err());
}

#[test]
fn checkpoint_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let params = random_params(LearnedConfig::rnnprop(), 10);
    let path = save_checkpoint(dir.path(), &params, 7, None).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().0, *params);

    let manifest_path = path.join(MANIFEST_FILE);
    let original = fs::read(&manifest_path).unwrap();
    let mut manifest: Manifest = serde_json::from_slice(&original).unwrap();
    manifest.format_version += 1;
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut manifest: Manifest = serde_json::from_slice(&original).unwrap();
    manifest.config.kind = ModelKind::Dm;
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    assert!(load_checkpoint(&path).is_err());

    fs::write(&manifest_path, b"{").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Json(_))));
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_stay_inside_the_bound(
        seed in 0u64..1000,
        weight_scale in 0.0f64..50.0,
        grad_exp in -12.0f64..12.0,
        steps in 1usize..8,
    ) {
        let mut rng = seeded_rng(seed);
        let base = LearnedParams::init(LearnedConfig::rnnprop(), &mut rng).unwrap();
        let tensors = base.tensors().iter().map(|t| t.map(|x| x * weight_scale)).collect();
        let params = Arc::new(LearnedParams::new(LearnedConfig::rnnprop(), tensors).unwrap());
        let mut opt = LearnedOptimizer::new(params);
        for _ in 0..steps {
            let g: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(grad_exp)).collect();
            let d = opt.step_flat(&g).unwrap();
            prop_assert!(d.iter().all(|x| x.abs() < 0.1));
            let st = opt.state().unwrap();
            prop_assert!(st.v.iter().all(|&v| v >= 0.0));
        }
    }
}

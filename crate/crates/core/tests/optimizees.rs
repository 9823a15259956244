use std::sync::Arc;

use learnopt::data::synthetic_fallback;
use learnopt::gradcheck::check_optimizee;
use learnopt::meta::{apply_random_scaling, combine_with_convex, sample_scaling, ScaledOptimizee};
use learnopt::optimizee::{Activation, Batch, ConvexCompanion, Mlp, Optimizee, Quadratic, SineLstm, SineSample};
use learnopt::{seeded_rng, Rng, Tensor};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const COORDS: usize = 60;

fn check_seeds(name: &str, f: &dyn Optimizee, batch: impl Fn(&mut Rng) -> Batch) {
    for seed in 0..SEEDS {
        let mut rng = seeded_rng(seed);
        let params = f.init_params(&mut rng);
        let b = batch(&mut rng);
        let err = check_optimizee(f, &params, &b, COORDS, &mut rng).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn small_data() -> Arc<learnopt::data::Dataset> {
    Arc::new(synthetic_fallback(11, 50).unwrap())
}

#[test]
fn mlp_gradients_every_activation() {
    let data = small_data();
    for act in Activation::ALL {
        let mlp = Mlp::new(data.clone(), 1, act).unwrap().with_batch_size(5).unwrap();
        check_seeds(&format!("mlp {act}"), &mlp, |rng| mlp.sample_batch(rng).unwrap());
    }
    let deep = Mlp::new(data, 2, Activation::Sigmoid).unwrap().with_batch_size(5).unwrap();
    check_seeds("mlp depth 2", &deep, |rng| deep.sample_batch(rng).unwrap());
}

#[test]
fn sine_lstm_gradients() {
    for layers in [1, 2] {
        let f = SineLstm::new(layers, 0.1).unwrap().with_batch_size(2).unwrap();
        check_seeds(&format!("sine {layers}"), &f, |rng| f.sample_batch(rng).unwrap());
    }
}

#[test]
fn quadratic_and_convex_gradients() {
    let q = Quadratic::new(0.7, 6).unwrap();
    check_seeds("quadratic", &q, |_| Batch::None);
    let mut rng = seeded_rng(99);
    let g = ConvexCompanion::sample(20, &mut rng).unwrap();
    check_seeds("convex", &g, |_| Batch::None);
}

#[test]
fn scaled_and_combined_gradients() {
    let data = small_data();
    let mlp: Arc<dyn Optimizee> = Arc::new(Mlp::base(data).unwrap().with_batch_size(5).unwrap());
    for seed in 0..SEEDS {
        let mut rng = seeded_rng(1000 + seed);
        let scaled = ScaledOptimizee::sample(mlp.clone(), 3.0, &mut rng).unwrap();
        let companion = ConvexCompanion::sample(20, &mut rng).unwrap();
        let (g, _) = apply_random_scaling(
            Arc::new(companion),
            &[Tensor::zeros(&[20])],
            vec![sample_scaling(&[20], 1.0, &mut rng).unwrap()],
        )
        .unwrap();
        let combined = combine_with_convex(Arc::new(scaled.clone()), Arc::new(g));
        for (name, f) in [("scaled", &scaled as &dyn Optimizee), ("combined", &combined)] {
            let params = f.init_params(&mut rng);
            let batch = f.sample_batch(&mut rng).unwrap();
            let err = check_optimizee(f, &params, &batch, COORDS, &mut rng).unwrap();
            assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn scaled_gradient_is_chain_rule() {
    let mut rng = seeded_rng(4);
    for _ in 0..20 {
        let lambda = rng_uniform(&mut rng, 0.1, 5.0);
        let q: Arc<dyn Optimizee> = Arc::new(Quadratic::new(lambda, 8).unwrap());
        let theta0 = Tensor::randn(&[8], 0.0, 1.0, &mut rng);
        let c = sample_scaling(&[8], 3.0, &mut rng).unwrap();
        let (fc, th) = apply_random_scaling(q.clone(), &[theta0.clone()], vec![c.clone()]).unwrap();
        let (_, gc) = fc.value_and_grad(&th, &Batch::None).unwrap();
        let (_, g) = q.value_and_grad(&[theta0], &Batch::None).unwrap();
        for ((a, c), b) in gc[0].data().iter().zip(c.data()).zip(g[0].data()) {
            assert!((a - c * b).abs() <= 1e-12 * (c * b).abs().max(1.0));
        }
    }
}

fn rng_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    rng.random_range(lo..hi)
}

#[test]
fn sine_targets_follow_the_function() {
    let mut rng = seeded_rng(2);
    let s = SineSample::draw(&mut rng);
    let Batch::Sequences { inputs, targets } = SineLstm::batch_from(&[s], 0.0, &mut rng).unwrap() else {
        panic!("sequence batch expected");
    };
    for x in 0..10 {
        assert_eq!(inputs.data()[x], s.at(x as f64));
    }
    assert_eq!(targets.data()[0], s.at(10.0));
}

#[test]
fn mlp_rejects_foreign_batches() {
    let mlp = Mlp::base(small_data()).unwrap();
    let mut rng = seeded_rng(0);
    let p = mlp.init_params(&mut rng);
    assert!(mlp.value(&p, &Batch::None).is_err());
    assert!(mlp.value(&p, &Batch::Indices(vec![50])).is_err());
    assert!(mlp.value(&p, &Batch::Indices(vec![])).is_err());
}

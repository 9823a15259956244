use std::sync::Arc;

use learnopt::data::synthetic_fallback;
use learnopt::gradcheck::relative_error;
use learnopt::learned::{CoordState, LearnedConfig, LearnedParams};
use learnopt::meta::{
    apply_random_scaling, sample_scaling, unroll_period, LossWeights, MetaConfig, MetaTrainer, PeriodOutcome,
};
use learnopt::optimizee::{
    flatten, Batch, ConvexCompanion, Mlp, Optimizee, Quadratic, QuadraticFamily, SineLstm, TaskFamily,
};
use learnopt::{seeded_rng, Error, Rng, Tensor};
use rand::Rng as _;

/// Plain-`f64` forward pass of RNNprop over `n` coordinates, written
/// independently of the tape.
struct Reference<'a> {
    phi: &'a [Vec<f64>],
    config: &'a LearnedConfig,
}

const H: usize = 20;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// One LSTM cell for a single coordinate; `hc` holds `[h | c]`.
fn cell(x: &[f64], hc: &mut [f64], w: &[f64], b: &[f64]) {
    let inputs: Vec<f64> = x.iter().chain(&hc[..H]).copied().collect();
    let mut z = b.to_vec();
    for (k, v) in inputs.iter().enumerate() {
        for j in 0..4 * H {
            z[j] += v * w[k * 4 * H + j];
        }
    }
    for j in 0..H {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[H + j]);
        let g = z[2 * H + j].tanh();
        let o = sigmoid(z[3 * H + j]);
        let c = f * hc[H + j] + i * g;
        hc[H + j] = c;
        hc[j] = o * c.tanh();
    }
}

impl Reference<'_> {
    /// Loss `Σ w_t λ‖θ_{t+1}‖² / norm` with the gradient sequence frozen.
    fn loss(&self, lambda: f64, theta0: &[f64], grads: &[Vec<f64>], weights: &[f64], norm: f64) -> f64 {
        let n = theta0.len();
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut s1 = vec![vec![0.0; 2 * H]; n];
        let mut s2 = vec![vec![0.0; 2 * H]; n];
        let mut total = 0.0;
        for (t, (g, w)) in grads.iter().zip(weights).enumerate() {
            let step = t as i32 + 1;
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = (v[i] / (1.0 - b2.powi(step))).sqrt() + eps;
                let feats = [m[i] / (1.0 - b1.powi(step)) / denom, g[i] / denom];
                let x: Vec<f64> = (0..H)
                    .map(|j| elu(self.phi[1][j] + feats[0] * self.phi[0][j] + feats[1] * self.phi[0][H + j]))
                    .collect();
                cell(&x, &mut s1[i], &self.phi[2], &self.phi[3]);
                let h1 = s1[i][..H].to_vec();
                cell(&h1, &mut s2[i], &self.phi[4], &self.phi[5]);
                let out: f64 = self.phi[7][0] + (0..H).map(|j| s2[i][j] * self.phi[6][j]).sum::<f64>();
                theta[i] += self.config.alpha * out.tanh();
            }
            total += w * lambda * theta.iter().map(|x| x * x).sum::<f64>();
        }
        total / norm
    }
}

struct Toy {
    lambda: f64,
    f: Quadratic,
    theta0: Vec<f64>,
    grad0: Vec<f64>,
    phi: LearnedParams,
}

fn toy(seed: u64) -> Toy {
    let mut rng = seeded_rng(seed);
    let lambda = rng.random_range(0.5..2.0);
    let f = Quadratic::new(lambda, 3).unwrap();
    let theta = f.init_params(&mut rng);
    let (_, g) = f.value_and_grad(&theta, &Batch::None).unwrap();
    let phi = LearnedParams::init(LearnedConfig::rnnprop(), &mut rng).unwrap();
    Toy {
        lambda,
        f,
        theta0: flatten(&theta),
        grad0: flatten(&g),
        phi,
    }
}

fn unroll(t: &Toy, phi: &LearnedParams, theta: Vec<f64>, grad: Vec<f64>, state: CoordState, weights: &[f64], norm: f64) -> PeriodOutcome {
    unroll_period(phi, &t.f, theta, grad, state, weights, norm, 1e6, &mut || Ok(Batch::None)).unwrap()
}

/// Central differences of the frozen-gradient reference loss over every
/// entry of `φ`, flattened in storage order.
fn reference_gradient(t: &Toy, phi: &LearnedParams, theta0: &[f64], inputs: &[Vec<f64>], weights: &[f64], norm: f64) -> Vec<f64> {
    let mut flat: Vec<Vec<f64>> = phi.tensors().iter().map(|x| x.data().to_vec()).collect();
    let h = 1e-6;
    let mut out = Vec::new();
    for p in 0..flat.len() {
        for i in 0..flat[p].len() {
            let orig = flat[p][i];
            flat[p][i] = orig + h;
            let plus = Reference { phi: &flat, config: phi.config() }.loss(t.lambda, theta0, inputs, weights, norm);
            flat[p][i] = orig - h;
            let minus = Reference { phi: &flat, config: phi.config() }.loss(t.lambda, theta0, inputs, weights, norm);
            flat[p][i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

#[test]
fn reference_forward_matches_unroll() {
    let t = toy(0);
    let weights = [1.0; 4];
    let out = unroll(&t, &t.phi, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &weights, 4.0);
    let flat: Vec<Vec<f64>> = t.phi.tensors().iter().map(|x| x.data().to_vec()).collect();
    let r = Reference { phi: &flat, config: t.phi.config() };
    for k in 1..=4 {
        let mut w = [0.0; 4];
        w[k - 1] = 1.0;
        let want = r.loss(t.lambda, &t.theta0, &out.inputs[..k], &w[..k], 1.0);
        assert!((out.losses[k - 1] - want).abs() <= 1e-12 * want.max(1.0), "step {k}");
    }
}

#[test]
fn meta_gradient_matches_finite_differences() {
    for (seed, weights) in [(1, LossWeights::Uniform), (2, LossWeights::FinalOnly), (3, LossWeights::Uniform)] {
        let t = toy(seed);
        let w = weights.weights(4);
        let out = unroll(&t, &t.phi, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &w, 4.0);
        let analytic = flatten(&out.phi_grads.unwrap());
        let numeric = reference_gradient(&t, &t.phi, &t.theta0, &out.inputs, &w, 4.0);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
        // The readout block alone.
        let k = analytic.len();
        let err = relative_error(&analytic[k - 21..], &numeric[k - 21..]);
        assert!(err < 1e-3, "seed {seed} readout: relative error {err:e}");
    }
}

#[test]
fn truncated_periods_are_detached() {
    let t = toy(4);
    let w = [1.0; 2];
    let first = unroll(&t, &t.phi, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &w, 4.0);
    let second = unroll(&t, &t.phi, first.theta.clone(), first.grad.clone(), first.state.clone(), &w, 4.0);

    // Period 2 differentiated as if it started from constants.
    let analytic = flatten(second.phi_grads.as_ref().unwrap());
    let numeric = second_period_reference(&t, &first, &second.inputs, &w);
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err:e}");

    // Rebuilding period 1 with another φ leaves period 2 untouched when the
    // carried values are the same.
    let mut rng = seeded_rng(40);
    let other = LearnedParams::init(LearnedConfig::rnnprop(), &mut rng).unwrap();
    let _ = unroll(&t, &other, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &w, 4.0);
    let again = unroll(&t, &t.phi, first.theta.clone(), first.grad.clone(), first.state.clone(), &w, 4.0);
    assert_eq!(again.phi_grads, second.phi_grads);
    assert_eq!(again.losses, second.losses);

    // The full unroll over the same four steps is a different gradient.
    let full = unroll(&t, &t.phi, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &[1.0; 4], 4.0);
    let full_grad = flatten(&full.phi_grads.unwrap());
    let first_grad = flatten(first.phi_grads.as_ref().unwrap());
    let summed: Vec<f64> = first_grad.iter().zip(&analytic).map(|(a, b)| a + b).collect();
    assert!(relative_error(&full_grad, &summed) > 1e-6);
}

/// FD of period 2's loss with the carried state frozen: the LSTM state
/// and moments at the boundary are constants, only period 2 depends on φ.
fn second_period_reference(t: &Toy, first: &PeriodOutcome, inputs: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let config = t.phi.config();
    let mut flat: Vec<Vec<f64>> = t.phi.tensors().iter().map(|x| x.data().to_vec()).collect();
    let eval = |phi: &[Vec<f64>]| -> f64 {
        let n = first.theta.len();
        let st = &first.state;
        let (b1, b2, eps) = (config.beta1, config.beta2, config.eps);
        let mut theta = first.theta.clone();
        let mut m = st.m.clone();
        let mut v = st.v.clone();
        let mut s1: Vec<Vec<f64>> = st.lstm[0].data().chunks(2 * H).map(<[f64]>::to_vec).collect();
        let mut s2: Vec<Vec<f64>> = st.lstm[1].data().chunks(2 * H).map(<[f64]>::to_vec).collect();
        let mut total = 0.0;
        for (k, (g, w)) in inputs.iter().zip(w).enumerate() {
            let step = (st.t + k as u64 + 1) as i32;
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = (v[i] / (1.0 - b2.powi(step))).sqrt() + eps;
                let feats = [m[i] / (1.0 - b1.powi(step)) / denom, g[i] / denom];
                let x: Vec<f64> = (0..H)
                    .map(|j| elu(phi[1][j] + feats[0] * phi[0][j] + feats[1] * phi[0][H + j]))
                    .collect();
                cell(&x, &mut s1[i], &phi[2], &phi[3]);
                let h1 = s1[i][..H].to_vec();
                cell(&h1, &mut s2[i], &phi[4], &phi[5]);
                let out: f64 = phi[7][0] + (0..H).map(|j| s2[i][j] * phi[6][j]).sum::<f64>();
                theta[i] += config.alpha * out.tanh();
            }
            total += w * t.lambda * theta.iter().map(|x| x * x).sum::<f64>();
        }
        total / 4.0
    };
    let h = 1e-6;
    let mut out = Vec::new();
    for p in 0..flat.len() {
        for i in 0..flat[p].len() {
            let orig = flat[p][i];
            flat[p][i] = orig + h;
            let plus = eval(&flat);
            flat[p][i] = orig - h;
            let minus = eval(&flat);
            flat[p][i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

#[test]
fn zero_weight_period_records_nothing() {
    let t = toy(5);
    let out = unroll(&t, &t.phi, t.theta0.clone(), t.grad0.clone(), CoordState::new(3).unwrap(), &[0.0; 3], 3.0);
    assert!(out.phi_grads.is_none());
    assert_eq!(out.losses.len(), 3);
    assert_eq!(out.inputs.len(), 3);
    assert_eq!(out.state.t, 3);
}

#[test]
fn divergence_is_reported() {
    let t = toy(6);
    let err = unroll_period(
        &t.phi,
        &t.f,
        t.theta0.clone(),
        t.grad0.clone(),
        CoordState::new(3).unwrap(),
        &[1.0; 3],
        3.0,
        1e-9,
        &mut || Ok(Batch::None),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Diverged(_)));

    let family = Arc::new(QuadraticFamily {
        dim: 4,
        lambda_low: 0.5,
        lambda_high: 2.0,
    });
    let config = MetaConfig {
        periods: 1,
        period_len: 3,
        divergence_threshold: 1e-9,
        max_resamples: 2,
        ..MetaConfig::default()
    };
    let mut trainer = MetaTrainer::new(config, t.phi.clone(), family, 1).unwrap();
    assert!(matches!(trainer.step(), Err(Error::Diverged(_))));
    assert_eq!(trainer.params(), &t.phi);
    assert_eq!(trainer.iterations_done(), 0);
}

fn random_optimizee(rng: &mut Rng, mlp: &Arc<dyn Optimizee>) -> Arc<dyn Optimizee> {
    match rng.random_range(0..4) {
        0 => Arc::new(Quadratic::new(rng.random_range(0.01..10.0), rng.random_range(1..20)).unwrap()),
        1 => Arc::new(ConvexCompanion::sample(20, rng).unwrap()),
        2 => mlp.clone(),
        _ => Arc::new(SineLstm::new(1, 0.1).unwrap().with_batch_size(4).unwrap()),
    }
}

#[test]
fn random_scaling_preserves_initial_loss() {
    let mlp: Arc<dyn Optimizee> = Arc::new(Mlp::base(Arc::new(synthetic_fallback(3, 40).unwrap())).unwrap().with_batch_size(8).unwrap());
    let mut rng = seeded_rng(12);
    for sample in 0..1000 {
        let f = random_optimizee(&mut rng, &mlp);
        let l = [3.0, 1.0][sample % 2];
        let theta0 = f.init_params(&mut rng);
        let c: Vec<Tensor> = f
            .param_shapes()
            .iter()
            .map(|s| sample_scaling(s, l, &mut rng).unwrap())
            .collect();
        for t in &c {
            assert!(t.data().iter().all(|&x| (-l).exp() <= x && x <= l.exp()));
        }
        let batch = f.sample_batch(&mut rng).unwrap();
        let (fc, theta) = apply_random_scaling(f.clone(), &theta0, c).unwrap();
        let before = f.value(&theta0, &batch).unwrap();
        let after = fc.value(&theta, &batch).unwrap();
        assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0), "{}: {before} vs {after}", f.name());
    }
}

#[test]
fn scaling_is_symmetric_in_log_space() {
    let mut rng = seeded_rng(13);
    let n = 1_000_000;
    let c = sample_scaling(&[n], 3.0, &mut rng).unwrap();
    let low = c.data().iter().filter(|&&x| (0.1..=1.0 / 9.0).contains(&x)).count() as f64;
    let high = c.data().iter().filter(|&&x| (9.0..=10.0).contains(&x)).count() as f64;
    // Both intervals have log-width ln(10/9); expected count ≈ 17,560.
    let expected = n as f64 * (10.0f64 / 9.0).ln() / 6.0;
    for count in [low, high] {
        assert!((count - expected).abs() < 5.0 * expected.sqrt(), "{count} vs {expected}");
    }
}

#[test]
fn quadratic_meta_training_makes_progress() {
    let family: Arc<dyn TaskFamily> = Arc::new(QuadraticFamily {
        dim: 10,
        lambda_low: 0.1,
        lambda_high: 10.0,
    });
    let mut improved = 0;
    let mut summary = Vec::new();
    for seed in 0..10 {
        let mut rng = seeded_rng(500 + seed);
        let phi = LearnedParams::init(LearnedConfig::rnnprop(), &mut rng).unwrap();
        let mut trainer = MetaTrainer::new(MetaConfig::default(), phi, family.clone(), seed).unwrap();
        trainer.train(500).unwrap();
        let losses: Vec<f64> = trainer.log().iter().map(|e| e.meta_loss).collect();
        let early = losses[..100].iter().sum::<f64>() / 100.0;
        let late = losses[400..].iter().sum::<f64>() / 100.0;
        summary.push((early, late));
        if late < early {
            improved += 1;
        }
    }
    assert!(improved >= 9, "improved in {improved}/10 runs: {summary:?}");
}

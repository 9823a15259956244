//! Meta-training of learned optimizers by truncated backpropagation through
//! unrolled optimization.
//!
//! Each meta-iteration samples an optimizee, optionally rescales it
//! coordinatewise ([`ScaledOptimizee`]) and adds a rescaled convex companion
//! ([`Combined`]), then unrolls `periods x period_len` optimizer steps. Every
//! period is recorded on its own tape and followed by one Adam update of
//! `φ`; parameters and LSTM states cross period boundaries as plain values.
//!
//! The gradient fed to the optimizer enters the tape as a constant, so the
//! meta-gradient ignores how `∇f(θ_t)` depends on earlier steps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Uniform};

use crate::autograd::{Tape, Var};
use crate::classic::{ClassicKind, ClassicOptimizer, Hyperparams, Optimizer};
use crate::error::{Error, Result};
use crate::learned::{self, CoordState, LearnedParams};
use crate::optimizee::{unflatten, Batch, ConvexCompanion, Optimizee, TaskFamily};
use crate::tensor::Tensor;
use crate::Rng;

/// `cᵢ = exp(pᵢ)` with `pᵢ ~ U[-L, L]`.
pub fn sample_scaling(shape: &[usize], l: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(l >= 0.0 && l.is_finite()) {
        return Err(Error::Hyperparameter {
            name: "L",
            value: l,
            reason: "must be non-negative and finite",
        });
    }
    if l == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let dist = Uniform::new_inclusive(-l, l).map_err(|e| Error::arg("sample_scaling", e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng).exp()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// `f_c(θ) = f(c ⊙ θ)`.
#[derive(Clone)]
pub struct ScaledOptimizee {
    base: Arc<dyn Optimizee>,
    c: Vec<Tensor>,
}

impl ScaledOptimizee {
    pub fn new(base: Arc<dyn Optimizee>, c: Vec<Tensor>) -> Result<Self> {
        let shapes = base.param_shapes();
        if shapes.len() != c.len() {
            return Err(Error::arg("scaled optimizee", "one scaling tensor per parameter is required"));
        }
        for (s, t) in shapes.iter().zip(&c) {
            if s.as_slice() != t.shape() {
                return Err(Error::shape("scaled optimizee", s, t.shape()));
            }
            if t.data().iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::arg("scaled optimizee", "scaling must be positive and finite"));
            }
        }
        Ok(ScaledOptimizee { base, c })
    }

    /// Draws `c` for every parameter tensor of `base` with range `l`.
    pub fn sample(base: Arc<dyn Optimizee>, l: f64, rng: &mut Rng) -> Result<Self> {
        let c = base
            .param_shapes()
            .iter()
            .map(|s| sample_scaling(s, l, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, c)
    }

    pub fn scaling(&self) -> &[Tensor] {
        &self.c
    }

    pub fn base(&self) -> &Arc<dyn Optimizee> {
        &self.base
    }

    /// `c⁻¹ ⊙ θ`, the starting point matching `θ` of the base.
    pub fn rescale_initial(&self, theta: &[Tensor]) -> Result<Vec<Tensor>> {
        theta
            .iter()
            .zip(&self.c)
            .map(|(t, c)| t.zip_map(c, |t, c| t / c))
            .collect()
    }
}

/// Returns `(f_c, c⁻¹ ⊙ θ₀)`.
pub fn apply_random_scaling(
    f: Arc<dyn Optimizee>,
    theta0: &[Tensor],
    c: Vec<Tensor>,
) -> Result<(ScaledOptimizee, Vec<Tensor>)> {
    let scaled = ScaledOptimizee::new(f, c)?;
    let theta = scaled.rescale_initial(theta0)?;
    Ok((scaled, theta))
}

impl Optimizee for ScaledOptimizee {
    fn name(&self) -> String {
        format!("scaled({})", self.base.name())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.base.param_shapes()
    }

    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        let theta = self.base.init_params(rng);
        self.rescale_initial(&theta).expect("shapes checked at construction")
    }

    fn sample_batch(&self, rng: &mut Rng) -> Result<Batch> {
        self.base.sample_batch(rng)
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
        if params.len() != self.c.len() {
            return Err(Error::arg("scaled optimizee", "parameter count mismatch"));
        }
        let scaled = params
            .iter()
            .zip(&self.c)
            .map(|(p, c)| p.mul(&tape.constant(c.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.base.loss(tape, &scaled, batch)
    }

    fn final_average_loss(&self, params: &[Tensor], encountered: &[Batch]) -> Result<f64> {
        let scaled = params
            .iter()
            .zip(&self.c)
            .map(|(p, c)| p.zip_map(c, |p, c| p * c))
            .collect::<Result<Vec<_>>>()?;
        self.base.final_average_loss(&scaled, encountered)
    }
}

/// `F(θ, x) = f(θ) + g(x)` with parameters `θ` followed by `x`.
#[derive(Clone)]
pub struct Combined {
    f: Arc<dyn Optimizee>,
    g: Arc<dyn Optimizee>,
    split: usize,
}

impl Combined {
    pub fn new(f: Arc<dyn Optimizee>, g: Arc<dyn Optimizee>) -> Self {
        let split = f.param_shapes().len();
        Combined { f, g, split }
    }
}

pub fn combine_with_convex(f: Arc<dyn Optimizee>, g: Arc<dyn Optimizee>) -> Combined {
    Combined::new(f, g)
}

impl Optimizee for Combined {
    fn name(&self) -> String {
        format!("{} + {}", self.f.name(), self.g.name())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.f.param_shapes();
        s.extend(self.g.param_shapes());
        s
    }

    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        let mut p = self.f.init_params(rng);
        p.extend(self.g.init_params(rng));
        p
    }

    fn sample_batch(&self, rng: &mut Rng) -> Result<Batch> {
        self.f.sample_batch(rng)
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
        if params.len() < self.split {
            return Err(Error::arg("combined optimizee", "parameter count mismatch"));
        }
        let f = self.f.loss(tape, &params[..self.split], batch)?;
        let g = self.g.loss(tape, &params[self.split..], &Batch::None)?;
        f.add(&g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeights {
    /// `w_T = 1`, every other `w_t = 0`.
    FinalOnly,
    /// `w_t = 1` for every step.
    Uniform,
}

impl LossWeights {
    /// `w_1, ..., w_T`.
    pub fn weights(self, horizon: usize) -> Vec<f64> {
        match self {
            LossWeights::FinalOnly => {
                let mut w = vec![0.0; horizon];
                if let Some(last) = w.last_mut() {
                    *last = 1.0;
                }
                w
            }
            LossWeights::Uniform => vec![1.0; horizon],
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetaConfig {
    pub periods: usize,
    pub period_len: usize,
    pub weights: LossWeights,
    pub meta_lr: f64,
    pub random_scaling: bool,
    pub convex_combination: bool,
    pub l_f: f64,
    pub l_g: f64,
    pub n_convex: usize,
    pub checkpoint_every: u64,
    pub ema_decay: f64,
    pub divergence_threshold: f64,
    pub max_resamples: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            periods: 5,
            period_len: 20,
            weights: LossWeights::FinalOnly,
            meta_lr: 1e-3,
            random_scaling: true,
            convex_combination: true,
            l_f: 3.0,
            l_g: 1.0,
            n_convex: 20,
            checkpoint_every: 1000,
            ema_decay: 0.9,
            divergence_threshold: 1e6,
            max_resamples: 10,
        }
    }
}

impl MetaConfig {
    /// Settings of the raw-gradient baseline: no tricks, every step weighted.
    pub fn dm() -> Self {
        MetaConfig {
            weights: LossWeights::Uniform,
            random_scaling: false,
            convex_combination: false,
            ..Self::default()
        }
    }

    pub fn horizon(&self) -> usize {
        self.periods * self.period_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods == 0 || self.period_len == 0 {
            return Err(Error::arg("meta config", "periods and period_len must be positive"));
        }
        if !(self.meta_lr > 0.0) {
            return Err(Error::Hyperparameter {
                name: "meta_lr",
                value: self.meta_lr,
                reason: "must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Hyperparameter {
                name: "ema_decay",
                value: self.ema_decay,
                reason: "must lie in [0, 1)",
            });
        }
        if self.checkpoint_every == 0 {
            return Err(Error::arg("meta config", "checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Result of unrolling one period.
#[derive(Clone, Debug)]
pub struct PeriodOutcome {
    /// Flat parameters after the last step.
    pub theta: Vec<f64>,
    /// Gradient at `theta`, the input of the next step.
    pub grad: Vec<f64>,
    pub state: CoordState,
    /// `f(θ_{t+1})` for every step of the period.
    pub losses: Vec<f64>,
    /// Gradients fed to the optimizer, one per step.
    pub inputs: Vec<Vec<f64>>,
    /// `∂(Σ w f / norm)/∂φ`, absent when every weight is zero.
    pub phi_grads: Option<Vec<Tensor>>,
}

/// Unrolls `weights.len()` optimizer steps from `(theta, grad, state)`.
///
/// Step `t` applies `Δθ` computed from `grad`, draws the next batch, and
/// records `f(θ_{t+1})` with weight `weights[t]`; that same evaluation
/// supplies the next gradient. The tape loss is `Σ w f / norm`.
#[allow(clippy::too_many_arguments)]
pub fn unroll_period(
    phi: &LearnedParams,
    f: &dyn Optimizee,
    theta: Vec<f64>,
    grad: Vec<f64>,
    mut state: CoordState,
    weights: &[f64],
    norm: f64,
    divergence_threshold: f64,
    next_batch: &mut dyn FnMut() -> Result<Batch>,
) -> Result<PeriodOutcome> {
    let config = phi.config();
    let shapes = f.param_shapes();
    let live = weights.iter().any(|&w| w != 0.0);
    let tape = Tape::new();
    let phi_vars: Vec<Var<'_>> = phi
        .tensors()
        .iter()
        .map(|t| if live { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let n = theta.len();
    let mut theta_var = tape.constant(Tensor::new(vec![n, 1], theta)?);
    let mut states = [
        tape.constant(state.lstm[0].clone()),
        tape.constant(state.lstm[1].clone()),
    ];
    let mut grad = grad;
    let mut losses = Vec::with_capacity(weights.len());
    let mut inputs = Vec::with_capacity(weights.len());
    let mut total: Option<Var<'_>> = None;

    for &w in weights {
        let feats = learned::features(config, &mut state, &grad)?;
        inputs.push(std::mem::take(&mut grad));
        let (delta, [s0, s1]) = learned::network_step(config, &phi_vars, tape.constant(feats), [&states[0], &states[1]])?;
        states = [s0, s1];
        theta_var = theta_var.add(&delta)?;

        let values = theta_var.value().data();
        if let Some(bad) = values.iter().find(|x| !(x.abs() <= divergence_threshold)) {
            return Err(Error::Diverged(format!("|θ| reached {bad:e}")));
        }
        let params = unflatten(values, &shapes)?;
        let batch = next_batch()?;
        let (loss, g) = f.value_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss}")));
        }
        losses.push(loss);
        grad = crate::optimizee::flatten(&g);

        if w != 0.0 {
            let mut offset = 0;
            let mut vars = Vec::with_capacity(shapes.len());
            for s in &shapes {
                let len: usize = s.iter().product();
                vars.push(theta_var.slice(0, offset, len)?.reshape(s)?);
                offset += len;
            }
            let term = f.loss(&tape, &vars, &batch)?.scale(w / norm);
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }

    let phi_grads = match &total {
        Some(root) => {
            let grads = tape.backward(root)?.collect(&phi_vars);
            if let Some(bad) = grads.iter().find(|g| !g.all_finite()) {
                return Err(Error::Diverged(format!("non-finite meta-gradient (max |g| = {:e})", bad.max_abs())));
            }
            Some(grads)
        }
        None => None,
    };
    state.lstm = [states[0].value().clone(), states[1].value().clone()];
    Ok(PeriodOutcome {
        theta: theta_var.value().data().to_vec(),
        grad,
        state,
        losses,
        inputs,
        phi_grads,
    })
}

/// `decay · prev + (1 - decay) · loss`, starting from the first loss.
pub fn ema_update(prev: Option<f64>, loss: f64, decay: f64) -> f64 {
    match prev {
        Some(p) => decay * p + (1.0 - decay) * loss,
        None => loss,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub meta_loss: f64,
    pub moving_average: f64,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub iteration: u64,
    pub ema_loss: f64,
    pub params: Arc<LearnedParams>,
    pub path: Option<PathBuf>,
}

/// The checkpoint with the lowest moving-average loss (earliest on ties).
pub fn checkpoint_select(history: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    history
        .iter()
        .reduce(|best, c| if c.ema_loss < best.ema_loss { c } else { best })
        .ok_or(Error::Empty("checkpoint history"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub meta_loss: f64,
    pub moving_average: f64,
    pub resamples: usize,
}

/// Owns `φ`, the meta-optimizer and the sampling stream.
pub struct MetaTrainer {
    config: MetaConfig,
    phi: LearnedParams,
    adam: ClassicOptimizer,
    family: Arc<dyn TaskFamily>,
    rng: Rng,
    iteration: u64,
    ema: Option<f64>,
    log: Vec<LogEntry>,
    checkpoints: Vec<CheckpointRecord>,
    checkpoint_dir: Option<PathBuf>,
}

impl MetaTrainer {
    pub fn new(config: MetaConfig, phi: LearnedParams, family: Arc<dyn TaskFamily>, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = ClassicOptimizer::new(
            ClassicKind::Adam,
            Hyperparams::defaults(ClassicKind::Adam).with_lr(config.meta_lr),
        )?;
        Ok(MetaTrainer {
            config,
            phi,
            adam,
            family,
            rng: crate::seeded_rng(seed),
            iteration: 0,
            ema: None,
            log: Vec::new(),
            checkpoints: Vec::new(),
            checkpoint_dir: None,
        })
    }

    /// Also write every checkpoint below `dir`.
    pub fn with_checkpoint_dir(mut self, dir: impl AsRef<Path>) -> Self {
        self.checkpoint_dir = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn params(&self) -> &LearnedParams {
        &self.phi
    }

    pub fn iterations_done(&self) -> u64 {
        self.iteration
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }

    /// Draws the training objective and its starting point.
    fn sample_task(&mut self) -> Result<(Arc<dyn Optimizee>, Vec<Tensor>)> {
        let base: Arc<dyn Optimizee> = Arc::from(self.family.sample(&mut self.rng)?);
        let theta0 = base.init_params(&mut self.rng);
        let (f, mut theta): (Arc<dyn Optimizee>, Vec<Tensor>) = if self.config.random_scaling {
            let scaled = ScaledOptimizee::sample(base, self.config.l_f, &mut self.rng)?;
            let theta = scaled.rescale_initial(&theta0)?;
            (Arc::new(scaled), theta)
        } else {
            (base, theta0)
        };
        if !self.config.convex_combination {
            return Ok((f, theta));
        }
        let g = ConvexCompanion::sample(self.config.n_convex, &mut self.rng)?;
        let x0 = g.initial_point().clone();
        let g: Arc<dyn Optimizee> = Arc::new(g);
        let l_g = if self.config.random_scaling { self.config.l_g } else { 0.0 };
        let (g, x0) = apply_random_scaling(g.clone(), &[x0], vec![sample_scaling(&[self.config.n_convex], l_g, &mut self.rng)?])?;
        theta.extend(x0);
        Ok((Arc::new(Combined::new(f, Arc::new(g))), theta))
    }

    fn unroll(&mut self, f: &dyn Optimizee, theta0: &[Tensor]) -> Result<f64> {
        let horizon = self.config.horizon();
        let weights = self.config.weights.weights(horizon);
        let mut theta = crate::optimizee::flatten(theta0);
        let first = f.sample_batch(&mut self.rng)?;
        let (_, g0) = f.value_and_grad(theta0, &first)?;
        let mut grad = crate::optimizee::flatten(&g0);
        let mut state = CoordState::new(theta.len())?;
        let mut weighted = 0.0;
        for k in 0..self.config.periods {
            let w = &weights[k * self.config.period_len..(k + 1) * self.config.period_len];
            let rng = &mut self.rng;
            let out = unroll_period(
                &self.phi,
                f,
                theta,
                grad,
                state,
                w,
                horizon as f64,
                self.config.divergence_threshold,
                &mut || f.sample_batch(rng),
            )?;
            weighted += out.losses.iter().zip(w).map(|(l, w)| l * w).sum::<f64>();
            let phi_grads = out
                .phi_grads
                .unwrap_or_else(|| self.phi.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect());
            let deltas = self.adam.step(&phi_grads)?;
            let updated = self
                .phi
                .tensors()
                .iter()
                .zip(&deltas)
                .map(|(p, d)| p.zip_map(d, |p, d| p + d))
                .collect::<Result<Vec<_>>>()?;
            self.phi = LearnedParams::new(self.phi.config().clone(), updated)?;
            theta = out.theta;
            grad = out.grad;
            state = out.state;
        }
        let meta_loss = weighted / weights.iter().sum::<f64>();
        if !meta_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite meta-loss {meta_loss}")));
        }
        Ok(meta_loss)
    }

    /// One meta-iteration; abandoned unrolls are rolled back and resampled.
    pub fn step(&mut self) -> Result<IterationReport> {
        let mut resamples = 0;
        loop {
            let phi = self.phi.clone();
            let adam = self.adam.clone();
            let (f, theta0) = self.sample_task()?;
            match self.unroll(f.as_ref(), &theta0) {
                Ok(meta_loss) => {
                    self.iteration += 1;
                    let ema = ema_update(self.ema, meta_loss, self.config.ema_decay);
                    self.ema = Some(ema);
                    self.log.push(LogEntry {
                        iteration: self.iteration,
                        meta_loss,
                        moving_average: ema,
                    });
                    if self.iteration % self.config.checkpoint_every == 0 {
                        self.checkpoint()?;
                    }
                    return Ok(IterationReport {
                        iteration: self.iteration,
                        meta_loss,
                        moving_average: ema,
                        resamples,
                    });
                }
                Err(Error::Diverged(why)) => {
                    self.phi = phi;
                    self.adam = adam;
                    resamples += 1;
                    log::warn!("meta-iteration {} abandoned ({why}); resampling", self.iteration + 1);
                    if resamples > self.config.max_resamples {
                        return Err(Error::Diverged(format!(
                            "{resamples} consecutive unrolls diverged; last: {why}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs `iterations` meta-iterations.
    pub fn train(&mut self, iterations: u64) -> Result<()> {
        for _ in 0..iterations {
            let r = self.step()?;
            log::debug!("iteration {} meta-loss {:.6} ema {:.6}", r.iteration, r.meta_loss, r.moving_average);
        }
        Ok(())
    }

    /// Records the current `φ` with its moving-average loss.
    pub fn checkpoint(&mut self) -> Result<&CheckpointRecord> {
        let ema = self.ema.ok_or(Error::Empty("loss history"))?;
        let path = match &self.checkpoint_dir {
            Some(dir) => Some(learned::save_checkpoint(dir, &self.phi, self.iteration, Some(ema))?),
            None => None,
        };
        self.checkpoints.push(CheckpointRecord {
            iteration: self.iteration,
            ema_loss: ema,
            params: Arc::new(self.phi.clone()),
            path,
        });
        Ok(self.checkpoints.last().expect("just pushed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learned::LearnedConfig;
    use crate::optimizee::{Quadratic, QuadraticFamily};

    #[test]
    fn scaling_range_and_identity() {
        let mut rng = crate::seeded_rng(0);
        let c = sample_scaling(&[10_000], 3.0, &mut rng).unwrap();
        assert!(c.data().iter().all(|&x| (-3.0f64).exp() <= x && x <= 3.0f64.exp()));
        assert_eq!(sample_scaling(&[4], 0.0, &mut rng).unwrap(), Tensor::ones(&[4]));
        assert!(sample_scaling(&[4], -1.0, &mut rng).is_err());
    }

    #[test]
    fn scaled_square_example() {
        let q: Arc<dyn Optimizee> = Arc::new(Quadratic::new(1.0, 1).unwrap());
        let (fc, th) = apply_random_scaling(q.clone(), &[Tensor::vector(vec![1.0])], vec![Tensor::vector(vec![2.0])]).unwrap();
        assert_eq!(th[0].data(), &[0.5]);
        assert_eq!(fc.value(&th, &Batch::None).unwrap(), 1.0);
        let (v, g) = fc.value_and_grad(&[Tensor::vector(vec![1.0])], &Batch::None).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g[0].data(), &[8.0]);
    }

    #[test]
    fn combined_is_separable() {
        let q: Arc<dyn Optimizee> = Arc::new(Quadratic::new(2.0, 3).unwrap());
        let mut rng = crate::seeded_rng(1);
        let g = ConvexCompanion::sample(20, &mut rng).unwrap();
        let v = g.target().clone();
        let f = combine_with_convex(q.clone(), Arc::new(g));
        let theta = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let at_min = f.value(&[theta.clone(), v.clone()], &Batch::None).unwrap();
        assert_eq!(at_min, q.value(&[theta.clone()], &Batch::None).unwrap());
        let x = Tensor::uniform(&[20], -1.0, 1.0, &mut rng);
        let (_, g1) = f.value_and_grad(&[theta, x.clone()], &Batch::None).unwrap();
        let (_, g2) = f.value_and_grad(&[Tensor::vector(vec![5.0, 1.0, -3.0]), x], &Batch::None).unwrap();
        assert_eq!(g1[1], g2[1]);
    }

    #[test]
    fn weights_and_ema() {
        let w = LossWeights::FinalOnly.weights(100);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
        assert_eq!(w[99], 1.0);
        assert_eq!(LossWeights::Uniform.weights(3), vec![1.0; 3]);
        let mut e = None;
        for _ in 0..20 {
            e = Some(ema_update(e, 0.7, 0.9));
        }
        assert!((e.unwrap() - 0.7).abs() < 1e-15);
    }

    fn record(iteration: u64, ema_loss: f64) -> CheckpointRecord {
        CheckpointRecord {
            iteration,
            ema_loss,
            params: Arc::new(LearnedParams::zeros(LearnedConfig::rnnprop()).unwrap()),
            path: None,
        }
    }

    #[test]
    fn selection() {
        assert!(checkpoint_select(&[]).is_err());
        assert_eq!(checkpoint_select(&[record(5, 1.0)]).unwrap().iteration, 5);
        let dec: Vec<_> = (1..=4).map(|i| record(i, 1.0 / i as f64)).collect();
        assert_eq!(checkpoint_select(&dec).unwrap().iteration, 4);
        let mixed = vec![record(1, 0.5), record(2, 0.2), record(3, 0.4)];
        assert_eq!(checkpoint_select(&mixed).unwrap().iteration, 2);
    }

    #[test]
    fn trainer_is_deterministic_and_checkpoints() {
        let family = Arc::new(QuadraticFamily {
            dim: 5,
            lambda_low: 0.5,
            lambda_high: 2.0,
        });
        let run = || {
            let mut rng = crate::seeded_rng(9);
            let phi = LearnedParams::init(LearnedConfig::rnnprop(), &mut rng).unwrap();
            let cfg = MetaConfig {
                periods: 2,
                period_len: 5,
                checkpoint_every: 2,
                ..MetaConfig::default()
            };
            let mut t = MetaTrainer::new(cfg, phi, family.clone(), 3).unwrap();
            t.train(4).unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params(), b.params());
        assert_eq!(a.log(), b.log());
        assert_eq!(a.checkpoints().len(), 2);
        assert!(a.log().iter().all(|e| e.meta_loss.is_finite()));
    }
}

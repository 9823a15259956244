//! Coordinatewise LSTM optimizers.
//!
//! Both models share one skeleton applied independently to every optimizee
//! coordinate: per-coordinate features, two stacked LSTM cells of width 20
//! and a scalar readout.
//!
//! * [`ModelKind::RnnProp`] feeds `(m̃, g̃)`, the bias-corrected first moment
//!   and raw gradient each divided by the root of the bias-corrected second
//!   moment, through an affine+ELU layer into the LSTMs and outputs
//!   `Δθ = α tanh(x_out)`.
//! * [`ModelKind::Dm`] feeds the log-magnitude/sign encoding of the raw
//!   gradient straight into the LSTMs and outputs an unbounded
//!   `Δθ = scale · x_out`.
//!
//! [`network_step`] records one step on a tape. Meta-training calls it with
//! live parameters; [`LearnedOptimizer`] calls it on a throwaway tape with
//! frozen ones.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::classic::Optimizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const HIDDEN: usize = 20;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    RnnProp,
    Dm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedConfig {
    pub kind: ModelKind,
    /// Output bound `α` (RNNprop) or output multiplier (DM).
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Log-magnitude cutoff of the DM input encoding.
    pub dm_p: f64,
}

impl LearnedConfig {
    pub fn rnnprop() -> Self {
        LearnedConfig {
            kind: ModelKind::RnnProp,
            alpha: 0.1,
            beta1: 0.95,
            beta2: 0.95,
            eps: 1e-8,
            dm_p: 10.0,
        }
    }

    pub fn dm() -> Self {
        LearnedConfig {
            kind: ModelKind::Dm,
            ..Self::rnnprop()
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, reason| Err(Error::Hyperparameter { name, value, reason });
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha, "must be positive");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(name, b, "must lie in (0, 1)");
            }
        }
        if !(self.eps >= 0.0) {
            return bad("eps", self.eps, "must be non-negative");
        }
        if !(self.dm_p > 0.0) {
            return bad("dm_p", self.dm_p, "must be positive");
        }
        Ok(())
    }

    /// Multiplier of the network output: `α` for DM, and for RNNprop `α`
    /// rounded down one ulp so that `|Δθ| < α` survives `tanh` rounding to 1.
    pub fn output_scale(&self) -> f64 {
        match self.kind {
            ModelKind::RnnProp => self.alpha.next_down(),
            ModelKind::Dm => self.alpha,
        }
    }

    fn input_width(&self) -> usize {
        match self.kind {
            ModelKind::RnnProp => HIDDEN,
            ModelKind::Dm => 2,
        }
    }

    /// Names and shapes of the parameter tensors, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut l = Vec::new();
        if self.kind == ModelKind::RnnProp {
            l.push(("pre_w", vec![2, HIDDEN]));
            l.push(("pre_b", vec![HIDDEN]));
        }
        l.push(("lstm1_w", vec![self.input_width() + HIDDEN, 4 * HIDDEN]));
        l.push(("lstm1_b", vec![4 * HIDDEN]));
        l.push(("lstm2_w", vec![2 * HIDDEN, 4 * HIDDEN]));
        l.push(("lstm2_b", vec![4 * HIDDEN]));
        l.push(("out_w", vec![HIDDEN, 1]));
        l.push(("out_b", vec![1]));
        l
    }
}

/// The meta-learned parameters `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedParams {
    config: LearnedConfig,
    tensors: Vec<Tensor>,
}

impl LearnedParams {
    pub fn new(config: LearnedConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::arg(
                "learned params",
                format!("expected {} tensors, got {}", layout.len(), tensors.len()),
            ));
        }
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            if shape.as_slice() != t.shape() {
                return Err(Error::shape("learned params", shape, t.shape()));
            }
        }
        Ok(LearnedParams { config, tensors })
    }

    /// Weights `U(-1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init(config: LearnedConfig, rng: &mut Rng) -> Result<Self> {
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape)| {
                if shape.len() == 2 {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::from_parts(shape, data)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Self::new(config, tensors)
    }

    pub fn zeros(config: LearnedConfig) -> Result<Self> {
        let tensors = config.layout().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self::new(config, tensors)
    }

    pub fn config(&self) -> &LearnedConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Hash of the exact bit patterns of every tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.shape().hash(&mut h);
            for x in t.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Per-coordinate optimizer state. LSTM states are stored `[h | c]`, one
/// row per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lstm: [Tensor; 2],
    pub t: u64,
}

impl CoordState {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("coordinate state"));
        }
        Ok(CoordState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            lstm: [Tensor::zeros(&[n, 2 * HIDDEN]), Tensor::zeros(&[n, 2 * HIDDEN])],
            t: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Hidden vector `h` of `layer` (0 or 1) for every coordinate.
    pub fn hidden(&self, layer: usize) -> Tensor {
        self.lstm_half(layer, 0)
    }

    /// Cell vector `c` of `layer` for every coordinate.
    pub fn cell(&self, layer: usize) -> Tensor {
        self.lstm_half(layer, HIDDEN)
    }

    fn lstm_half(&self, layer: usize, start: usize) -> Tensor {
        let s = &self.lstm[layer];
        let data = s
            .data()
            .chunks(2 * HIDDEN)
            .flat_map(|row| row[start..start + HIDDEN].iter().copied())
            .collect();
        Tensor::from_parts(vec![self.len(), HIDDEN], data)
    }

    /// Advances `t`, updates the moments with `g` and returns `(m̃, g̃)`.
    pub fn compute_inputs(&mut self, config: &LearnedConfig, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_gradient(g, self.len())?;
        self.t += 1;
        let (b1, b2, eps) = (config.beta1, config.beta2, config.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut m_tilde = Vec::with_capacity(g.len());
        let mut g_tilde = Vec::with_capacity(g.len());
        for ((&g, m), v) in g.iter().zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let denom = (*v / c2).sqrt() + eps;
            let (mt, gt) = (*m / c1 / denom, g / denom);
            // 0/0 only when the gradient history is all zeros and eps = 0.
            m_tilde.push(if mt.is_nan() { 0.0 } else { mt });
            g_tilde.push(if gt.is_nan() { 0.0 } else { gt });
        }
        Ok((m_tilde, g_tilde))
    }
}

fn check_gradient(g: &[f64], n: usize) -> Result<()> {
    if g.len() != n {
        return Err(Error::shape("learned optimizer", &[n], &[g.len()]));
    }
    match g.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFiniteGradient { index, value: g[index] }),
        None => Ok(()),
    }
}

/// The log-magnitude/sign encoding: `(ln|g|/p, sign g)` when
/// `|g| >= e^{-p}`, otherwise `(-1, e^p g)`.
pub fn dm_inputs(p: f64, g: f64) -> (f64, f64) {
    if g.abs() >= (-p).exp() {
        (g.abs().ln() / p, g.signum())
    } else {
        (-1.0, p.exp() * g)
    }
}

/// Builds the `n x 2` feature matrix for one step, advancing `state`.
pub fn features(config: &LearnedConfig, state: &mut CoordState, g: &[f64]) -> Result<Tensor> {
    let n = state.len();
    let mut out = Vec::with_capacity(2 * n);
    match config.kind {
        ModelKind::RnnProp => {
            let (mt, gt) = state.compute_inputs(config, g)?;
            for (a, b) in mt.into_iter().zip(gt) {
                out.push(a);
                out.push(b);
            }
        }
        ModelKind::Dm => {
            check_gradient(g, n)?;
            state.t += 1;
            for &x in g {
                let (a, b) = dm_inputs(config.dm_p, x);
                out.push(a);
                out.push(b);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, 2], out))
}

/// One optimizer step recorded on the tape of its inputs: `features (n x 2)` and LSTM states
/// `(n x 40)` in, `Δθ (n x 1)` and the new states out.
pub fn network_step<'t>(
    config: &LearnedConfig,
    phi: &[Var<'t>],
    features: Var<'t>,
    states: [&Var<'t>; 2],
) -> Result<(Var<'t>, [Var<'t>; 2])> {
    let (x, rest) = match config.kind {
        ModelKind::RnnProp => {
            let x = features.matmul(&phi[0])?.add_row(&phi[1])?.elu();
            (x, &phi[2..])
        }
        ModelKind::Dm => (features, phi),
    };
    let s1 = x.lstm_cell(states[0], &rest[0], &rest[1])?;
    let h1 = s1.slice(1, 0, HIDDEN)?;
    let s2 = h1.lstm_cell(states[1], &rest[2], &rest[3])?;
    let h2 = s2.slice(1, 0, HIDDEN)?;
    let out = h2.matmul(&rest[4])?.add_row(&rest[5])?;
    let delta = match config.kind {
        ModelKind::RnnProp => out.tanh().scale(config.output_scale()),
        ModelKind::Dm => out.scale(config.output_scale()),
    };
    Ok((delta, [s1, s2]))
}

/// A frozen learned optimizer usable wherever a classic one is.
///
/// All parameter tensors are treated as one flat coordinate vector.
#[derive(Clone, Debug)]
pub struct LearnedOptimizer {
    params: Arc<LearnedParams>,
    state: Option<CoordState>,
}

impl LearnedOptimizer {
    pub fn new(params: Arc<LearnedParams>) -> Self {
        LearnedOptimizer { params, state: None }
    }

    pub fn params(&self) -> &Arc<LearnedParams> {
        &self.params
    }

    pub fn state(&self) -> Option<&CoordState> {
        self.state.as_ref()
    }

    fn prepare(&mut self, grads: &[Tensor]) -> Result<Vec<f64>> {
        let flat: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        if self.state.is_none() {
            self.state = Some(CoordState::new(flat.len())?);
        }
        Ok(flat)
    }

    /// Advances the state by one step on flat gradients and returns flat `Δθ`.
    pub fn step_flat(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        if self.state.is_none() {
            self.state = Some(CoordState::new(g.len())?);
        }
        let state = self.state.as_mut().expect("initialized above");
        let config = self.params.config();
        let feats = features(config, state, g)?;
        let tape = Tape::new();
        let phi: Vec<Var<'_>> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let s0 = tape.constant(state.lstm[0].clone());
        let s1 = tape.constant(state.lstm[1].clone());
        let (delta, [n0, n1]) = network_step(config, &phi, tape.constant(feats), [&s0, &s1])?;
        state.lstm = [n0.value().clone(), n1.value().clone()];
        Ok(delta.value().data().to_vec())
    }

    /// Runs only the moment pipeline and replaces the network by
    /// `Δθ = α tanh(readout(m̃, g̃))`.
    pub fn step_with_readout(&mut self, grads: &[Tensor], readout: impl Fn(f64, f64) -> f64) -> Result<Vec<Tensor>> {
        let g = self.prepare(grads)?;
        let config = self.params.config().clone();
        let state = self.state.as_mut().expect("initialized by prepare");
        let (mt, gt) = state.compute_inputs(&config, &g)?;
        let flat: Vec<f64> = mt
            .iter()
            .zip(&gt)
            .map(|(&m, &g)| config.output_scale() * readout(m, g).tanh())
            .collect();
        split_like(&flat, grads)
    }
}

fn split_like(flat: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let shapes: Vec<Vec<usize>> = like.iter().map(|t| t.shape().to_vec()).collect();
    crate::optimizee::unflatten(flat, &shapes)
}

impl Optimizer for LearnedOptimizer {
    fn step(&mut self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = self.prepare(grads)?;
        let flat = self.step_flat(&g)?;
        split_like(&flat, grads)
    }

    fn name(&self) -> String {
        match self.params.config().kind {
            ModelKind::RnnProp => "rnnprop".into(),
            ModelKind::Dm => "dm".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `tensors.bin`, in elements.
    pub offset: usize,
    pub len: usize,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: LearnedConfig,
    pub tensors: Vec<TensorEntry>,
    pub iteration: u64,
    pub ema_loss: Option<f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

/// Writes `dir/ckpt_<iteration>/{manifest.json, tensors.bin}`; tensors are
/// raw little-endian `f64`.
pub fn save_checkpoint(dir: impl AsRef<Path>, params: &LearnedParams, iteration: u64, ema_loss: Option<f64>) -> Result<PathBuf> {
    let path = dir.as_ref().join(format!("ckpt_{iteration}"));
    fs::create_dir_all(&path)?;
    let mut bytes = Vec::with_capacity(8 * params.num_params());
    let mut entries = Vec::new();
    let mut offset = 0;
    for ((name, _), t) in params.config.layout().into_iter().zip(&params.tensors) {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors: entries,
        iteration,
        ema_loss,
    };
    fs::write(path.join(TENSORS_FILE), bytes)?;
    fs::write(path.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Reads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(LearnedParams, Manifest)> {
    let path = path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(path.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(path.join(TENSORS_FILE))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{TENSORS_FILE} length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let layout = manifest.config.layout();
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("tensor list does not match the model layout".into()));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), e) in layout.iter().zip(&manifest.tensors) {
        if e.name != *name || e.shape != *shape || e.len != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("unexpected tensor entry {} {:?}", e.name, e.shape)));
        }
        let end = e.offset + e.len;
        if end > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} extends past the end of {TENSORS_FILE}", e.name)));
        }
        tensors.push(Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())?);
    }
    let params = LearnedParams::new(manifest.config.clone(), tensors)?;
    Ok((params, manifest))
}

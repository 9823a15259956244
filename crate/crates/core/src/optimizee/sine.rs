use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{check_params, Batch, Optimizee, TaskFamily};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const SEQ_LEN: usize = 10;
pub const HIDDEN: usize = 20;

/// `f(x) = A sin(ω x + φ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineSample {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl SineSample {
    /// `A ~ U(0, 10)`, `ω ~ U(0, π/2)`, `φ ~ U(0, 2π)`.
    pub fn draw(rng: &mut Rng) -> Self {
        SineSample {
            amplitude: rng.random_range(0.0..10.0),
            omega: rng.random_range(0.0..PI / 2.0),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    pub fn at(&self, x: f64) -> f64 {
        self.amplitude * (self.omega * x + self.phase).sin()
    }
}

/// An LSTM reading `f(0), ..., f(9)` (plus noise) and predicting `f(10)`
/// through a linear readout of its final hidden state.
///
/// Parameters per layer are `w ((in + 20) x 80)` and `b (80)`, then the
/// readout `w (20 x 1)` and `b (1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SineLstm {
    layers: usize,
    noise_sigma: f64,
    batch_size: usize,
}

impl SineLstm {
    pub fn new(layers: usize, noise_sigma: f64) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(Error::arg("sine lstm", format!("{layers} layers requested; 1 or 2 supported")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Hyperparameter {
                name: "noise_sigma",
                value: noise_sigma,
                reason: "must be nonnegative and finite",
            });
        }
        Ok(SineLstm {
            layers,
            noise_sigma,
            batch_size: 128,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Empty("minibatch"));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Builds a batch from explicit functions and noise draws.
    pub fn batch_from(samples: &[SineSample], sigma: f64, rng: &mut Rng) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::arg("sine lstm", e.to_string()))?;
        let mut inputs = Vec::with_capacity(samples.len() * SEQ_LEN);
        for s in samples {
            for x in 0..SEQ_LEN {
                inputs.push(s.at(x as f64) + noise.sample(rng));
            }
        }
        let targets = samples.iter().map(|s| s.at(SEQ_LEN as f64)).collect();
        Ok(Batch::Sequences {
            inputs: Tensor::from_parts(vec![samples.len(), SEQ_LEN], inputs),
            targets: Tensor::from_parts(vec![samples.len(), 1], targets),
        })
    }
}

impl Optimizee for SineLstm {
    fn name(&self) -> String {
        format!("sine-lstm({} layer, sigma={})", self.layers, self.noise_sigma)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in 0..self.layers {
            let input = if l == 0 { 1 } else { HIDDEN };
            shapes.push(vec![input + HIDDEN, 4 * HIDDEN]);
            shapes.push(vec![4 * HIDDEN]);
        }
        shapes.push(vec![HIDDEN, 1]);
        shapes.push(vec![1]);
        shapes
    }

    /// Weights `N(0, 0.1²)`, biases zero.
    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.param_shapes()
            .iter()
            .map(|s| {
                if s.len() == 2 {
                    Tensor::randn(s, 0.0, 0.1, rng)
                } else {
                    Tensor::zeros(s)
                }
            })
            .collect()
    }

    fn sample_batch(&self, rng: &mut Rng) -> Result<Batch> {
        let samples: Vec<SineSample> = (0..self.batch_size).map(|_| SineSample::draw(rng)).collect();
        Self::batch_from(&samples, self.noise_sigma, rng)
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
        check_params("sine lstm", &self.param_shapes(), params)?;
        let Batch::Sequences { inputs, targets } = batch else {
            return Err(Error::arg("sine lstm", "expected a batch of sequences"));
        };
        let (b, len) = inputs
            .dims2()
            .ok_or_else(|| Error::arg("sine lstm", "inputs must be a matrix"))?;
        if len != SEQ_LEN {
            return Err(Error::arg("sine lstm", format!("sequence length {len}, expected {SEQ_LEN}")));
        }
        if targets.shape() != [b, 1] {
            return Err(Error::shape("sine lstm", &[b, 1], targets.shape()));
        }
        let inputs = tape.constant(inputs.clone());
        let mut states: Vec<Var<'t>> = (0..self.layers)
            .map(|_| tape.constant(Tensor::zeros(&[b, 2 * HIDDEN])))
            .collect();
        for t in 0..SEQ_LEN {
            let mut x = inputs.slice(1, t, 1)?;
            for (l, state) in states.iter_mut().enumerate() {
                *state = x.lstm_cell(state, &params[2 * l], &params[2 * l + 1])?;
                x = state.slice(1, 0, HIDDEN)?;
            }
        }
        let h = states[self.layers - 1].slice(1, 0, HIDDEN)?;
        let n = params.len();
        let pred = h.matmul(&params[n - 2])?.add_row(&params[n - 1])?;
        pred.mse(&tape.constant(targets.clone()))
    }
}

impl TaskFamily for SineLstm {
    fn name(&self) -> String {
        Optimizee::name(self)
    }

    fn sample(&self, _rng: &mut Rng) -> Result<Box<dyn Optimizee>> {
        Ok(Box::new(self.clone()))
    }
}

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_params, Batch, Optimizee, TaskFamily};
use crate::autograd::{Tape, Var};
use crate::data::{sample_minibatch, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const HIDDEN_UNITS: usize = 20;
pub const BATCH_SIZE: usize = 128;
pub const INIT_STD: f64 = 0.1;

/// Rows evaluated per tape when averaging over many examples.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Sigmoid,
        Activation::Relu,
        Activation::Elu,
        Activation::Tanh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Sigmoid => x.sigmoid(),
            Activation::Relu => x.relu(),
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::arg("activation", format!("unknown activation `{s}`")))
    }
}

/// Fully connected classifier with softmax cross-entropy loss.
///
/// Parameters alternate weight `(in x out)` and bias `(out)` per layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    data: Arc<Dataset>,
    hidden_layers: usize,
    hidden_units: usize,
    activation: Activation,
    batch_size: usize,
}

impl Mlp {
    pub fn new(data: Arc<Dataset>, hidden_layers: usize, activation: Activation) -> Result<Self> {
        if hidden_layers == 0 {
            return Err(Error::arg("mlp", "at least one hidden layer is required"));
        }
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(Mlp {
            batch_size: BATCH_SIZE.min(data.len()),
            data,
            hidden_layers,
            hidden_units: HIDDEN_UNITS,
            activation,
        })
    }

    /// One hidden layer of 20 sigmoid units.
    pub fn base(data: Arc<Dataset>) -> Result<Self> {
        Self::new(data, 1, Activation::Sigmoid)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > self.data.len() {
            return Err(Error::arg(
                "mlp",
                format!("batch size {batch_size} not in 1..={}", self.data.len()),
            ));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden_layers
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.image_dim()];
        w.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        w.push(NUM_CLASSES);
        w
    }

    fn loss_on_rows<'t>(&self, tape: &'t Tape, params: &[Var<'t>], indices: &[usize]) -> Result<Var<'t>> {
        check_params("mlp", &self.param_shapes(), params)?;
        if indices.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::arg("mlp", format!("example index {bad} out of range")));
        }
        let (x, y) = self.data.gather(indices);
        let mut h = tape.constant(x);
        let layers = params.len() / 2;
        for l in 0..layers {
            let z = h.matmul(&params[2 * l])?.add_row(&params[2 * l + 1])?;
            h = if l + 1 < layers { self.activation.apply(&z) } else { z };
        }
        h.softmax_cross_entropy(&tape.constant(y))
    }
}

impl Optimizee for Mlp {
    fn name(&self) -> String {
        format!("mlp({}x{} {})", self.hidden_layers, self.hidden_units, self.activation)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths()
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.param_shapes()
            .iter()
            .map(|s| Tensor::randn(s, 0.0, INIT_STD, rng))
            .collect()
    }

    fn sample_batch(&self, rng: &mut Rng) -> Result<Batch> {
        Ok(Batch::Indices(sample_minibatch(&self.data, self.batch_size, rng)?))
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
        match batch {
            Batch::Indices(idx) => self.loss_on_rows(tape, params, idx),
            _ => Err(Error::arg("mlp", "expected a batch of example indices")),
        }
    }

    /// Mean loss over the distinct examples appearing in `encountered`.
    fn final_average_loss(&self, params: &[Tensor], encountered: &[Batch]) -> Result<f64> {
        let mut seen = BTreeSet::new();
        for b in encountered {
            match b {
                Batch::Indices(idx) => seen.extend(idx.iter().copied()),
                _ => return Err(Error::arg("mlp", "expected a batch of example indices")),
            }
        }
        if seen.is_empty() {
            return Err(Error::Empty("encountered batches"));
        }
        let all: Vec<usize> = seen.into_iter().collect();
        let mut total = 0.0;
        for chunk in all.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
            total += self.loss_on_rows(&tape, &vars, chunk)?.value().item() * chunk.len() as f64;
        }
        Ok(total / all.len() as f64)
    }
}

impl TaskFamily for Mlp {
    fn name(&self) -> String {
        Optimizee::name(self)
    }

    fn sample(&self, _rng: &mut Rng) -> Result<Box<dyn Optimizee>> {
        Ok(Box::new(self.clone()))
    }
}

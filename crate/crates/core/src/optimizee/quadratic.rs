use rand_distr::{Distribution, Uniform};

use super::{check_params, Batch, Optimizee, TaskFamily};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// `f(θ) = λ ‖θ‖²` over a single vector parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    lambda: f64,
    dim: usize,
    init_std: f64,
}

impl Quadratic {
    pub fn new(lambda: f64, dim: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Hyperparameter {
                name: "lambda",
                value: lambda,
                reason: "must be positive and finite",
            });
        }
        if dim == 0 {
            return Err(Error::Empty("quadratic dimension"));
        }
        Ok(Quadratic {
            lambda,
            dim,
            init_std: 1.0,
        })
    }

    /// Standard deviation of the Gaussian initial point (default 1).
    pub fn with_init_std(mut self, std: f64) -> Self {
        self.init_std = std;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Optimizee for Quadratic {
    fn name(&self) -> String {
        format!("quadratic(lambda={}, dim={})", self.lambda, self.dim)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim]]
    }

    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        vec![Tensor::randn(&[self.dim], 0.0, self.init_std, rng)]
    }

    fn sample_batch(&self, _rng: &mut Rng) -> Result<Batch> {
        Ok(Batch::None)
    }

    fn loss<'t>(&self, _tape: &'t Tape, params: &[Var<'t>], _batch: &Batch) -> Result<Var<'t>> {
        check_params("quadratic", &self.param_shapes(), params)?;
        Ok(params[0].square().sum().scale(self.lambda))
    }
}

impl TaskFamily for Quadratic {
    fn name(&self) -> String {
        Optimizee::name(self)
    }

    fn sample(&self, _rng: &mut Rng) -> Result<Box<dyn Optimizee>> {
        Ok(Box::new(self.clone()))
    }
}

/// Quadratics with `λ` drawn log-uniformly from `[low, high]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFamily {
    pub dim: usize,
    pub lambda_low: f64,
    pub lambda_high: f64,
}

impl TaskFamily for QuadraticFamily {
    fn name(&self) -> String {
        format!(
            "quadratic-family(dim={}, lambda in [{}, {}])",
            self.dim, self.lambda_low, self.lambda_high
        )
    }

    fn sample(&self, rng: &mut Rng) -> Result<Box<dyn Optimizee>> {
        let (lo, hi) = (self.lambda_low.ln(), self.lambda_high.ln());
        let lambda = if hi > lo {
            Uniform::new(lo, hi)
                .map_err(|e| Error::arg("quadratic family", e.to_string()))?
                .sample(rng)
                .exp()
        } else {
            self.lambda_low
        };
        Ok(Box::new(Quadratic::new(lambda, self.dim)?))
    }
}

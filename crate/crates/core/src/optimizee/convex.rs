use super::{check_params, Batch, Optimizee};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// `g(x) = (1/n) Σ (xᵢ - vᵢ)²` with a stored initial point `x₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexCompanion {
    v: Tensor,
    x0: Tensor,
}

impl ConvexCompanion {
    pub fn new(v: Tensor, x0: Tensor) -> Result<Self> {
        if v.ndim() != 1 || v.is_empty() {
            return Err(Error::arg("convex companion", "target must be a non-empty vector"));
        }
        if v.shape() != x0.shape() {
            return Err(Error::shape("convex companion", v.shape(), x0.shape()));
        }
        Ok(ConvexCompanion { v, x0 })
    }

    /// Draws `v` and `x₀` from `U[-1, 1]ⁿ`.
    pub fn sample(n: usize, rng: &mut Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("convex companion dimension"));
        }
        let v = Tensor::uniform(&[n], -1.0, 1.0, rng);
        let x0 = Tensor::uniform(&[n], -1.0, 1.0, rng);
        Self::new(v, x0)
    }

    pub fn target(&self) -> &Tensor {
        &self.v
    }

    pub fn initial_point(&self) -> &Tensor {
        &self.x0
    }
}

impl Optimizee for ConvexCompanion {
    fn name(&self) -> String {
        format!("convex(n={})", self.v.len())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![self.v.shape().to_vec()]
    }

    fn init_params(&self, _rng: &mut Rng) -> Vec<Tensor> {
        vec![self.x0.clone()]
    }

    fn sample_batch(&self, _rng: &mut Rng) -> Result<Batch> {
        Ok(Batch::None)
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], _batch: &Batch) -> Result<Var<'t>> {
        check_params("convex companion", &self.param_shapes(), params)?;
        let v = tape.constant(self.v.clone());
        Ok(params[0].sub(&v)?.square().mean())
    }
}

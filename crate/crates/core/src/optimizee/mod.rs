//! Objectives trained by the optimizers.
//!
//! An [`Optimizee`] owns a parameter layout, an initialization rule and a
//! stochastic loss. Losses are recorded on a caller-supplied [`Tape`] so the
//! same definition serves plain gradient evaluation and meta-training.

mod convex;
mod mlp;
mod quadratic;
mod sine;

pub use convex::ConvexCompanion;
pub use mlp::{Activation, Mlp};
pub use quadratic::{Quadratic, QuadraticFamily};
pub use sine::{SineLstm, SineSample};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// One stochastic sample `d_t` for a loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// Deterministic objectives.
    None,
    /// Rows of a dataset held by the optimizee.
    Indices(Vec<usize>),
    /// Input sequences `(B x len)` with targets `(B x 1)`.
    Sequences { inputs: Tensor, targets: Tensor },
}

pub trait Optimizee: Send + Sync {
    fn name(&self) -> String;

    fn param_shapes(&self) -> Vec<Vec<usize>>;

    fn init_params(&self, rng: &mut Rng) -> Vec<Tensor>;

    fn sample_batch(&self, rng: &mut Rng) -> Result<Batch>;

    /// Records the scalar loss at `params` on `tape`.
    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>>;

    fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn value(&self, params: &[Tensor], batch: &Batch) -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(self.loss(&tape, &vars, batch)?.value().item())
    }

    fn value_and_grad(&self, params: &[Tensor], batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = self.loss(&tape, &vars, batch)?;
        let grads = tape.backward(&loss)?;
        Ok((loss.value().item(), grads.collect(&vars)))
    }

    /// Loss of the frozen `params` over every sample seen during a run.
    /// Defaults to the mean over the recorded batches.
    fn final_average_loss(&self, params: &[Tensor], encountered: &[Batch]) -> Result<f64> {
        if encountered.is_empty() {
            return Err(Error::Empty("encountered batches"));
        }
        let mut total = 0.0;
        for b in encountered {
            total += self.value(params, b)?;
        }
        Ok(total / encountered.len() as f64)
    }
}

/// A distribution over optimizees; meta-training draws one per iteration.
pub trait TaskFamily: Send + Sync {
    fn name(&self) -> String;

    fn sample(&self, rng: &mut Rng) -> Result<Box<dyn Optimizee>>;
}

/// Checks a parameter list against `shapes`.
pub(crate) fn check_params(op: &'static str, shapes: &[Vec<usize>], params: &[Var<'_>]) -> Result<()> {
    if shapes.len() != params.len() {
        return Err(Error::arg(
            op,
            format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
        ));
    }
    for (s, p) in shapes.iter().zip(params) {
        if s.as_slice() != p.shape() {
            return Err(Error::shape(op, s, p.shape()));
        }
    }
    Ok(())
}

/// Flattens a parameter list into one vector.
pub fn flatten(params: &[Tensor]) -> Vec<f64> {
    params.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.len() {
        return Err(Error::InvalidShape {
            shape: vec![total],
            len: flat.len(),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let ps = vec![
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::vector(vec![5.0]),
        ];
        let flat = flatten(&ps);
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let shapes: Vec<Vec<usize>> = ps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(unflatten(&flat, &shapes).unwrap(), ps);
        assert!(unflatten(&flat[..4], &shapes).is_err());
    }
}

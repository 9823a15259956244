//! Central finite differences, used as an independent oracle for the tape.
//!
//! The difference quotients only evaluate forward values; [`check_primitive`]
//! and [`check_optimizee`] compare them against the tape's gradients.

use rand::seq::index::sample;

use crate::autograd::{Primitive, Tape, Var};
use crate::error::Result;
use crate::optimizee::{Batch, Optimizee};
use crate::tensor::Tensor;
use crate::Rng;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every entry of every tensor.
pub fn numerical_gradient(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    h: f64,
) -> Vec<Tensor> {
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let flat = numerical_gradient_at(&mut f, params, &coords, h);
    let mut it = flat.into_iter();
    params
        .iter()
        .map(|t| {
            let data: Vec<f64> = it.by_ref().take(t.len()).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape as parameter")
        })
        .collect()
}

/// Central differences for the listed `(tensor, flat index)` coordinates.
pub fn numerical_gradient_at(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Vec<f64> {
    let mut work: Vec<Vec<f64>> = params.iter().map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|t| t.shape().to_vec()).collect();
    let mut eval = |work: &Vec<Vec<f64>>| {
        let ts: Vec<Tensor> = work
            .iter()
            .zip(&shapes)
            .map(|(d, s)| Tensor::new(s.clone(), d.clone()).expect("valid shape"))
            .collect();
        f(&ts)
    };
    coords
        .iter()
        .map(|&(p, i)| {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let plus = eval(&work);
            work[p][i] = orig - h;
            let minus = eval(&work);
            work[p][i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference when both
/// vectors are numerically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// [`relative_error`] over whole tensor lists.
pub fn relative_error_tensors(a: &[Tensor], b: &[Tensor]) -> f64 {
    let flat = |ts: &[Tensor]| -> Vec<f64> { ts.iter().flat_map(|t| t.data().to_vec()).collect() };
    relative_error(&flat(a), &flat(b))
}

/// Relative error between the tape gradient and central differences of
/// `sum(r ⊙ op(inputs))` for a random positive weighting `r`, over the
/// inputs listed in `wrt`.
pub fn check_primitive(op: &Primitive, inputs: &[Tensor], wrt: &[usize], rng: &mut Rng) -> Result<f64> {
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let refs: Vec<&Var<'_>> = vars.iter().collect();
        tape.apply(op, &refs)?.shape().to_vec()
    };
    let r = Tensor::uniform(&out_shape, 0.5, 1.5, rng);
    let weighted = |tape: &Tape, inputs: &[Tensor]| -> Result<f64> {
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let refs: Vec<&Var<'_>> = vars.iter().collect();
        let root = tape.apply(op, &refs)?.mul(&tape.constant(r.clone()))?.sum();
        Ok(root.value().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let refs: Vec<&Var<'_>> = vars.iter().collect();
    let root = tape.apply(op, &refs)?.mul(&tape.constant(r.clone()))?.sum();
    let grads = tape.backward(&root)?;
    let coords: Vec<(usize, usize)> = wrt
        .iter()
        .flat_map(|&p| (0..inputs[p].len()).map(move |i| (p, i)))
        .collect();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, i)| grads.wrt(&vars[p]).map_or(0.0, |g| g.data()[i]))
        .collect();
    let mut failure = None;
    let numeric = numerical_gradient_at(
        |ps| {
            let tape = Tape::new();
            weighted(&tape, ps).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        inputs,
        &coords,
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Relative error between `value_and_grad` and central differences of
/// `value` at `params` on a fixed `batch`. At most `max_coords` randomly
/// chosen coordinates are differenced.
pub fn check_optimizee(
    f: &dyn Optimizee,
    params: &[Tensor],
    batch: &Batch,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let (_, grads) = f.value_and_grad(params, batch)?;
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let coords: Vec<(usize, usize)> = if all.len() <= max_coords {
        all
    } else {
        sample(rng, all.len(), max_coords).into_iter().map(|i| all[i]).collect()
    };
    let analytic: Vec<f64> = coords.iter().map(|&(p, i)| grads[p].data()[i]).collect();
    let mut failure = None;
    let numeric = numerical_gradient_at(
        |ps| {
            f.value(ps, batch).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        params,
        &coords,
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

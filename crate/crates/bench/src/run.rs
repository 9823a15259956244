//! Optimization runs with a fixed optimizer and their CSV records.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use learnopt::classic::{ClassicKind, ClassicOptimizer, Hyperparams, Optimizer};
use learnopt::learned::{LearnedOptimizer, LearnedParams};
use learnopt::optimizee::{Batch, Optimizee};
use learnopt::{seeded_rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// `|θ|` beyond this marks a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const FINALS_FILE: &str = "finals.csv";

#[derive(Clone, Debug)]
pub enum OptimizerSpec {
    Classic { kind: ClassicKind, hp: Hyperparams },
    /// A frozen learned optimizer; `label` names it in the output.
    Learned { params: Arc<LearnedParams>, label: String },
}

impl OptimizerSpec {
    pub fn label(&self) -> String {
        match self {
            OptimizerSpec::Classic { kind, hp } => format!("{kind}(lr={})", hp.lr),
            OptimizerSpec::Learned { label, .. } => label.clone(),
        }
    }

    fn build(&self) -> Result<Box<dyn Optimizer>> {
        Ok(match self {
            OptimizerSpec::Classic { kind, hp } => Box::new(ClassicOptimizer::new(*kind, hp.clone())?),
            OptimizerSpec::Learned { params, .. } => Box::new(LearnedOptimizer::new(params.clone())),
        })
    }
}

/// One optimizer step: the loss at `θ_t` on the batch drawn for step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub run: usize,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub max_abs_step: f64,
}

/// Summary row of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub run: usize,
    pub seed: u64,
    pub task: String,
    pub optimizer: String,
    pub steps: usize,
    /// Loss of the final parameters on a fresh batch.
    pub final_loss: f64,
    /// Loss of the final parameters over every example seen during the run.
    pub final_average_loss: f64,
    pub max_abs_step: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub summary: FinalRecord,
}

fn add_in_place(theta: &mut [Tensor], delta: &[Tensor]) -> Result<f64> {
    let mut max_abs: f64 = 0.0;
    for (t, d) in theta.iter_mut().zip(delta) {
        max_abs = max_abs.max(d.max_abs());
        *t = t.zip_map(d, |a, b| a + b)?;
    }
    Ok(max_abs)
}

fn out_of_bounds(theta: &[Tensor]) -> bool {
    theta.iter().any(|t| !t.all_finite() || t.max_abs() > DIVERGENCE_THRESHOLD)
}

/// Trains `f` from a fresh `θ₀` for `steps` steps. A diverged run keeps
/// `steps` rows, with `NaN` losses after the failure.
pub fn run_once(task: &str, f: &dyn Optimizee, opt: &OptimizerSpec, steps: usize, run: usize, seed: u64) -> Result<TrajectoryRecord> {
    if steps == 0 {
        return Err(BenchError::config("steps", "must be at least 1"));
    }
    let mut rng = seeded_rng(seed);
    let mut theta = f.init_params(&mut rng);
    let mut optimizer = opt.build()?;
    let mut records = Vec::with_capacity(steps);
    let mut encountered: Vec<Batch> = Vec::with_capacity(steps);
    let mut max_abs_step: f64 = 0.0;
    let mut diverged = false;
    for step in 0..steps {
        let batch = f.sample_batch(&mut rng)?;
        let (loss, grads) = match f.value_and_grad(&theta, &batch) {
            Ok((loss, g)) if loss.is_finite() => (loss, g),
            Ok(_) | Err(learnopt::Error::NonFiniteGradient { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let delta = optimizer.step(&grads)?;
        let step_max = add_in_place(&mut theta, &delta)?;
        max_abs_step = max_abs_step.max(step_max);
        records.push(StepRecord {
            run,
            seed,
            step,
            loss,
            max_abs_step: step_max,
        });
        encountered.push(batch);
        if out_of_bounds(&theta) {
            diverged = true;
            break;
        }
    }
    let (final_loss, final_average_loss) = if diverged {
        (f64::NAN, f64::NAN)
    } else {
        let fresh = f.sample_batch(&mut rng)?;
        (f.value(&theta, &fresh)?, f.final_average_loss(&theta, &encountered)?)
    };
    while records.len() < steps {
        records.push(StepRecord {
            run,
            seed,
            step: records.len(),
            loss: f64::NAN,
            max_abs_step: f64::NAN,
        });
    }
    Ok(TrajectoryRecord {
        steps: records,
        summary: FinalRecord {
            run,
            seed,
            task: task.to_string(),
            optimizer: opt.label(),
            steps,
            final_loss,
            final_average_loss,
            max_abs_step,
            diverged: diverged || !final_loss.is_finite(),
        },
    })
}

/// Seed of run `r` in a batch started from `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64)
}

/// `repeats` independent runs with seeds `seed, seed+1, ...`. A learned
/// optimizer's parameters are checked unchanged afterwards.
pub fn run_training(task: &str, f: &dyn Optimizee, opt: &OptimizerSpec, steps: usize, repeats: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    if repeats == 0 {
        return Err(BenchError::config("repeats", "must be at least 1"));
    }
    let fingerprint = match opt {
        OptimizerSpec::Learned { params, .. } => Some(params.fingerprint()),
        OptimizerSpec::Classic { .. } => None,
    };
    let mut out = Vec::with_capacity(repeats);
    for run in 0..repeats {
        let rec = run_once(task, f, opt, steps, run, run_seed(seed, run))?;
        log::info!(
            "{task} {} run {run}: final loss {:.6}{}",
            opt.label(),
            rec.summary.final_loss,
            if rec.summary.diverged { " (diverged)" } else { "" }
        );
        out.push(rec);
    }
    if let (Some(before), OptimizerSpec::Learned { params, .. }) = (fingerprint, opt) {
        assert_eq!(before, params.fingerprint(), "evaluation modified the learned optimizer");
    }
    Ok(out)
}

pub fn write_trajectories(path: impl AsRef<Path>, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for s in &r.steps {
            w.serialize(s)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_finals(path: impl AsRef<Path>, finals: &[FinalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in finals {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_finals(path: impl AsRef<Path>) -> Result<Vec<FinalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes `trajectories.csv` and `finals.csv` below `dir`.
pub fn write_run_outputs(dir: impl AsRef<Path>, records: &[TrajectoryRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_trajectories(dir.join(TRAJECTORIES_FILE), records)?;
    let finals: Vec<FinalRecord> = records.iter().map(|r| r.summary.clone()).collect();
    write_finals(dir.join(FINALS_FILE), &finals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use learnopt::optimizee::Quadratic;

    fn sgd(lr: f64) -> OptimizerSpec {
        OptimizerSpec::Classic {
            kind: ClassicKind::Sgd,
            hp: Hyperparams::defaults(ClassicKind::Sgd).with_lr(lr),
        }
    }

    #[test]
    fn newton_step_on_quadratic() {
        let q = Quadratic::new(1.0, 5).unwrap();
        let rec = run_once("quadratic", &q, &sgd(0.5), 3, 0, 1).unwrap();
        assert!(rec.steps[0].loss > 0.0);
        assert_eq!(rec.steps[1].loss, 0.0);
        assert_eq!(rec.summary.final_loss, 0.0);
        assert!(!rec.summary.diverged);
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let q = Quadratic::new(1.0, 5).unwrap();
        let recs = run_training("quadratic", &q, &sgd(100.0), 50, 2, 0).unwrap();
        for r in &recs {
            assert!(r.summary.diverged);
            assert_eq!(r.steps.len(), 50);
            assert!(r.steps[49].loss.is_nan());
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let q = Quadratic::new(2.0, 3).unwrap();
        let recs = run_training("quadratic", &q, &sgd(0.1), 4, 3, 9).unwrap();
        write_run_outputs(dir.path(), &recs).unwrap();
        let finals = read_finals(dir.path().join(FINALS_FILE)).unwrap();
        assert_eq!(finals.len(), 3);
        assert_eq!(finals[2], recs[2].summary);
        assert_eq!(finals[1].seed, 10);
    }
}

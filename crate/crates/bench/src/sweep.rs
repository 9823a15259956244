//! Learning-rate sweeps of a classic optimizer.

use learnopt::classic::{ClassicKind, Hyperparams};
use learnopt::optimizee::Optimizee;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::run::{run_training, OptimizerSpec, TrajectoryRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    /// Mean final average loss over the non-diverged runs; `inf` when
    /// every run diverged.
    pub final_average_loss: f64,
    pub final_loss: f64,
    pub runs: usize,
    pub diverged: usize,
}

/// `n` learning rates spaced evenly in log space from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) || n < 2 {
        return Err(BenchError::config("sweep.range", format!("need 0 < lo < hi and n >= 2, got {lo}, {hi}, {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect())
}

/// Checks that `grid` has at least five positive, increasing, log-spaced
/// points.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    let bad = |reason: String| Err(BenchError::config("sweep.grid", reason));
    if grid.len() < 5 {
        return bad(format!("need at least 5 learning rates, got {}", grid.len()));
    }
    if grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return bad("learning rates must be positive".into());
    }
    let steps: Vec<f64> = grid.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    if steps.iter().any(|&s| s <= 0.0) {
        return bad("learning rates must increase".into());
    }
    if steps.iter().any(|&s| (s - steps[0]).abs() > 1e-6 * steps[0]) {
        return bad("learning rates must be evenly spaced in log space".into());
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// One batch of runs per learning rate, all starting from the same seeds.
pub fn lr_sweep(
    task: &str,
    f: &dyn Optimizee,
    kind: ClassicKind,
    base: &Hyperparams,
    grid: &[f64],
    steps: usize,
    repeats: usize,
    seed: u64,
) -> Result<(Vec<SweepPoint>, Vec<TrajectoryRecord>)> {
    validate_grid(grid)?;
    let mut points = Vec::with_capacity(grid.len());
    let mut all = Vec::new();
    for &lr in grid {
        let opt = OptimizerSpec::Classic {
            kind,
            hp: base.clone().with_lr(lr),
        };
        let runs = run_training(task, f, &opt, steps, repeats, seed)?;
        let ok = || runs.iter().map(|r| &r.summary).filter(|s| !s.diverged);
        points.push(SweepPoint {
            lr,
            final_average_loss: mean(ok().map(|s| s.final_average_loss)),
            final_loss: mean(ok().map(|s| s.final_loss)),
            runs: runs.len(),
            diverged: runs.len() - ok().count(),
        });
        all.extend(runs);
    }
    Ok((points, all))
}

pub fn write_sweep(path: impl AsRef<std::path::Path>, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Whether the smallest loss lies strictly inside the grid and below both
/// endpoints.
pub fn has_interior_minimum(points: &[SweepPoint]) -> bool {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return false;
    };
    let interior = &points[1..points.len().saturating_sub(1)];
    interior
        .iter()
        .map(|p| p.final_average_loss)
        .fold(f64::INFINITY, f64::min)
        .lt(&first.final_average_loss.min(last.final_average_loss))
}

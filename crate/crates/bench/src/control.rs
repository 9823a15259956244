//! Control experiments: learned-optimizer variants meta-trained on equal
//! budgets and evaluated at fixed fractions of that budget.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use learnopt::data::Dataset;
use learnopt::learned::ModelKind;
use learnopt::meta::{LossWeights, MetaConfig, MetaTrainer};
use learnopt::optimizee::TaskFamily;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::run::{run_training, OptimizerSpec};
use crate::task::TaskSpec;
use crate::train::MetaSettings;

/// Evaluation runs use seeds offset by this from the trial seed, so they
/// never coincide with meta-training streams.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Both tricks.
    #[serde(rename = "rnnprop")]
    RnnProp,
    /// Without Random Scaling.
    #[serde(rename = "rnnprop-rs")]
    RnnPropNoRs,
    /// Without the convex companion.
    #[serde(rename = "rnnprop-cc")]
    RnnPropNoCc,
    #[serde(rename = "dm")]
    Dm,
    /// The raw-gradient model trained with both tricks.
    #[serde(rename = "dm+tricks")]
    DmTricks,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::RnnProp,
        Variant::RnnPropNoRs,
        Variant::RnnPropNoCc,
        Variant::Dm,
        Variant::DmTricks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::RnnProp => "rnnprop",
            Variant::RnnPropNoRs => "rnnprop-rs",
            Variant::RnnPropNoCc => "rnnprop-cc",
            Variant::Dm => "dm",
            Variant::DmTricks => "dm+tricks",
        }
    }

    /// Meta-training settings of this variant on top of `base`, which
    /// supplies everything except the model, the tricks and the weights.
    pub fn settings(self, base: &MetaConfig, iterations: u64, phi_seed: u64) -> MetaSettings {
        let (model, rs, cc) = match self {
            Variant::RnnProp => (ModelKind::RnnProp, true, true),
            Variant::RnnPropNoRs => (ModelKind::RnnProp, false, true),
            Variant::RnnPropNoCc => (ModelKind::RnnProp, true, false),
            Variant::Dm => (ModelKind::Dm, false, false),
            Variant::DmTricks => (ModelKind::Dm, true, true),
        };
        MetaSettings {
            model,
            iterations,
            config: MetaConfig {
                random_scaling: rs,
                convex_combination: cc,
                weights: match model {
                    ModelKind::RnnProp => LossWeights::FinalOnly,
                    ModelKind::Dm => LossWeights::Uniform,
                },
                ..base.clone()
            },
            phi_seed,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('\u{2212}', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| BenchError::config("control.variants", format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSettings {
    pub variants: Vec<Variant>,
    /// Meta-iteration budget of each variant, in `variants` order.
    pub budgets: Vec<u64>,
    /// Checkpoints evaluated, as fractions of the budget in `(0, 1]`.
    pub fractions: Vec<f64>,
    pub base: MetaConfig,
    pub eval_tasks: Vec<TaskSpec>,
    pub eval_steps: usize,
    pub eval_repeats: usize,
    pub trials: usize,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            variants: vec![Variant::RnnProp, Variant::RnnPropNoCc],
            budgets: vec![200, 200],
            fractions: vec![0.25, 0.5, 0.75],
            base: MetaConfig::default(),
            eval_tasks: vec![
                TaskSpec::base_mlp(),
                TaskSpec::Mlp {
                    layers: 1,
                    activation: learnopt::optimizee::Activation::Relu,
                },
            ],
            eval_steps: 100,
            eval_repeats: 10,
            trials: 1,
        }
    }
}

impl ControlSettings {
    /// The common budget; differing budgets are rejected.
    pub fn budget(&self) -> Result<u64> {
        if self.variants.is_empty() {
            return Err(BenchError::config("control.variants", "no variants"));
        }
        if self.budgets.len() != self.variants.len() {
            return Err(BenchError::BudgetMismatch(format!(
                "{} budgets for {} variants",
                self.budgets.len(),
                self.variants.len()
            )));
        }
        let first = self.budgets[0];
        if let Some((v, b)) = self.variants.iter().zip(&self.budgets).find(|(_, &b)| b != first) {
            return Err(BenchError::BudgetMismatch(format!(
                "{} has {first} iterations but {v} has {b}",
                self.variants[0]
            )));
        }
        if first == 0 {
            return Err(BenchError::config("control.budget", "must be at least 1"));
        }
        Ok(first)
    }

    /// Meta-iteration counts at which variants are evaluated.
    pub fn checkpoints(&self) -> Result<Vec<u64>> {
        let budget = self.budget()?;
        if self.fractions.is_empty() {
            return Err(BenchError::config("control.fractions", "no checkpoints requested"));
        }
        let mut its = Vec::with_capacity(self.fractions.len());
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(BenchError::config("control.fractions", format!("{f} outside (0, 1]")));
            }
            let it = (budget as f64 * f).round() as u64;
            if it == 0 || its.last().is_some_and(|&last| it <= last) {
                return Err(BenchError::config(
                    "control.fractions",
                    "fractions must increase and map to distinct positive iteration counts",
                ));
            }
            its.push(it);
        }
        Ok(its)
    }
}

/// Evaluated loss of one variant at one checkpoint on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub trial: usize,
    pub seed: u64,
    pub eval_task: String,
    pub variant: Variant,
    pub iterations: u64,
    pub fraction: f64,
    pub mean_final_loss: f64,
    pub median_final_loss: f64,
    pub runs: usize,
    pub diverged: usize,
    /// Largest `|Δθ|` over every evaluation step.
    pub max_abs_step: f64,
}

pub(crate) fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Runs every trial: trial `k` uses seed `seed + k` for both the initial
/// `φ` and the meta-training stream, shared by all variants.
pub fn control_experiment(
    family: Arc<dyn TaskFamily>,
    data: Option<&Arc<Dataset>>,
    settings: &ControlSettings,
    seed: u64,
) -> Result<Vec<ControlRow>> {
    let budget = settings.budget()?;
    let checkpoints = settings.checkpoints()?;
    if settings.trials == 0 {
        return Err(BenchError::config("control.trials", "must be at least 1"));
    }
    let tasks = settings
        .eval_tasks
        .iter()
        .map(|t| Ok((t.to_string(), t.build(data)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for trial in 0..settings.trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        for &variant in &settings.variants {
            let s = variant.settings(&settings.base, budget, trial_seed);
            let mut trainer = MetaTrainer::new(s.config.clone(), s.initial_params()?, family.clone(), trial_seed)?;
            for (&it, &fraction) in checkpoints.iter().zip(&settings.fractions) {
                trainer.train(it - trainer.iterations_done())?;
                let params = Arc::new(trainer.params().clone());
                log::info!("trial {trial} {variant}: evaluating after {it} meta-iterations");
                for (name, f) in &tasks {
                    let opt = OptimizerSpec::Learned {
                        params: params.clone(),
                        label: format!("{variant}@{it}"),
                    };
                    let runs = run_training(
                        name,
                        f.as_ref(),
                        &opt,
                        settings.eval_steps,
                        settings.eval_repeats,
                        trial_seed.wrapping_add(EVAL_SEED_OFFSET),
                    )?;
                    let mut finals: Vec<f64> = runs
                        .iter()
                        .filter(|r| !r.summary.diverged)
                        .map(|r| r.summary.final_loss)
                        .collect();
                    let mean = if finals.is_empty() {
                        f64::INFINITY
                    } else {
                        finals.iter().sum::<f64>() / finals.len() as f64
                    };
                    rows.push(ControlRow {
                        trial,
                        seed: trial_seed,
                        eval_task: name.clone(),
                        variant,
                        iterations: it,
                        fraction,
                        mean_final_loss: mean,
                        median_final_loss: median(&mut finals).unwrap_or(f64::INFINITY),
                        runs: runs.len(),
                        diverged: runs.len() - finals.len(),
                        max_abs_step: runs.iter().map(|r| r.summary.max_abs_step).fold(0.0, f64::max),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_rows(path: impl AsRef<Path>, rows: &[ControlRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one line per (task, iterations) with the trial-averaged mean
/// final loss of each variant in its own column.
pub fn write_table(path: impl AsRef<Path>, rows: &[ControlRow]) -> Result<()> {
    let mut variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    variants.sort_unstable();
    variants.dedup();
    let mut task_order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, u64, Variant), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if !task_order.contains(&r.eval_task.as_str()) {
            task_order.push(&r.eval_task);
        }
        let c = cells.entry((&r.eval_task, r.iterations, r.variant)).or_insert((0.0, 0));
        c.0 += r.mean_final_loss;
        c.1 += 1;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["eval_task".to_string(), "iterations".to_string()];
    header.extend(variants.iter().map(|v| v.to_string()));
    w.write_record(&header)?;
    for task in task_order {
        let mut its: Vec<u64> = cells.keys().filter(|k| k.0 == task).map(|k| k.1).collect();
        its.dedup();
        for it in its {
            let mut line = vec![task.to_string(), it.to_string()];
            for v in &variants {
                line.push(match cells.get(&(task, it, *v)) {
                    Some((sum, n)) => (sum / *n as f64).to_string(),
                    None => String::new(),
                });
            }
            w.write_record(&line)?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Experiment harness for the `learnopt` optimizers.
//!
//! Each command reads an [`ExperimentConfig`](config::ExperimentConfig) and
//! writes CSV/JSON below the configured output directory:
//!
//! * [`commands::meta_train`]: `training_log.csv`, `checkpoints/ckpt_<n>/`,
//!   `meta_summary.json`.
//! * [`commands::evaluate`]: `trajectories.csv` (one row per run and step)
//!   and `finals.csv` (one row per run).
//! * [`commands::sweep`]: `sweep.csv` plus the runs behind it.
//! * [`commands::control`]: `control.csv` and the pivoted `control_table.csv`.
//! * [`report::report`]: `summary.json` and `summary.csv`.

pub mod config;
pub mod control;
pub mod error;
pub mod report;
pub mod run;
pub mod sweep;
pub mod task;
pub mod train;

pub use error::{BenchError, Result};

/// Keeps freed tape buffers inside the heap instead of returning them to
/// the OS after every optimizer step. No-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // 32 MiB is glibc's ceiling for the mmap threshold.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Flushes subnormal results and inputs to zero on this thread. Saturated
/// sigmoids at large learning rates otherwise fill the gradients with
/// subnormals, which x86 processes about 20x slower.
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly));
    }
}

pub mod commands {
    //! The CLI subcommands as library calls.

    use std::fs;
    use std::sync::Arc;

    use learnopt::data::Dataset;
    use learnopt::learned::LearnedParams;
    use learnopt::seeded_rng;

    use crate::config::{CheckpointSource, ExperimentConfig, OptimizerChoice};
    use crate::control::{self, ControlRow};
    use crate::error::{BenchError, Result};
    use crate::run::{run_training, write_run_outputs, OptimizerSpec, TrajectoryRecord};
    use crate::sweep::{self, SweepPoint};
    use crate::train::{self, MetaOutcome};

    fn dataset(config: &ExperimentConfig, needed: bool) -> Result<Option<Arc<Dataset>>> {
        if needed {
            Ok(Some(Arc::new(config.data.load()?)))
        } else {
            Ok(None)
        }
    }

    /// Optimizer described by the config; learned ones need a checkpoint.
    pub fn optimizer(config: &ExperimentConfig) -> Result<OptimizerSpec> {
        match config.optimizer {
            OptimizerChoice::Classic(kind) => Ok(OptimizerSpec::Classic {
                kind,
                hp: config.hyperparams.clone(),
            }),
            OptimizerChoice::Learned(model) => {
                let source = config.checkpoint.as_ref().ok_or_else(|| {
                    BenchError::MissingCheckpoint("set `checkpoint` to a checkpoint path or `untrained[:seed]`".into())
                })?;
                let mut settings = train::MetaSettings::new(model);
                let (params, label) = match source {
                    CheckpointSource::Path(p) => (train::resolve_checkpoint(p)?, format!("{model:?}").to_lowercase()),
                    CheckpointSource::Untrained { seed } => {
                        settings.phi_seed = *seed;
                        (settings.initial_params()?, format!("{model:?}-untrained").to_lowercase())
                    }
                };
                if params.config().kind != model {
                    return Err(BenchError::config(
                        "checkpoint",
                        format!("checkpoint holds a {:?} model but optimizer is {model:?}", params.config().kind),
                    ));
                }
                Ok(OptimizerSpec::Learned {
                    params: Arc::new(params),
                    label,
                })
            }
        }
    }

    pub fn meta_train(config: &ExperimentConfig) -> Result<MetaOutcome> {
        let data = dataset(config, config.task.needs_data())?;
        let family = config.task.family(data.as_ref())?;
        train::meta_train(family, &config.meta, config.seed, Some(&config.out))
    }

    pub fn evaluate(config: &ExperimentConfig) -> Result<Vec<TrajectoryRecord>> {
        let data = dataset(config, config.task.needs_data())?;
        let f = config.task.build(data.as_ref())?;
        let opt = optimizer(config)?;
        let records = run_training(&config.task.to_string(), f.as_ref(), &opt, config.steps, config.repeats, config.seed)?;
        write_run_outputs(&config.out, &records)?;
        Ok(records)
    }

    pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
        let OptimizerChoice::Classic(kind) = config.optimizer else {
            return Err(BenchError::config("optimizer", "learning-rate sweeps need a classic optimizer"));
        };
        let data = dataset(config, config.task.needs_data())?;
        let f = config.task.build(data.as_ref())?;
        let (points, records) = sweep::lr_sweep(
            &config.task.to_string(),
            f.as_ref(),
            kind,
            &config.hyperparams,
            &config.sweep_grid,
            config.steps,
            config.repeats,
            config.seed,
        )?;
        write_run_outputs(&config.out, &records)?;
        sweep::write_sweep(config.out.join("sweep.csv"), &points)?;
        Ok(points)
    }

    pub fn control(config: &ExperimentConfig) -> Result<Vec<ControlRow>> {
        config.control.budget()?;
        let needs = config.task.needs_data() || config.control.eval_tasks.iter().any(|t| t.needs_data());
        let data = dataset(config, needs)?;
        let family = config.task.family(data.as_ref())?;
        let rows = control::control_experiment(family, data.as_ref(), &config.control, config.seed)?;
        fs::create_dir_all(&config.out)?;
        control::write_rows(config.out.join("control.csv"), &rows)?;
        control::write_table(config.out.join("control_table.csv"), &rows)?;
        Ok(rows)
    }

    /// Untrained parameters drawn like a fresh meta-training run's.
    pub fn untrained(config: &ExperimentConfig, seed: u64) -> Result<LearnedParams> {
        Ok(LearnedParams::init(config.meta.learned_config(), &mut seeded_rng(seed))?)
    }
}

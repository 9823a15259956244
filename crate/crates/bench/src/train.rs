//! Meta-training runs and checkpoint lookup.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use learnopt::learned::{load_checkpoint, LearnedConfig, LearnedParams, ModelKind, MANIFEST_FILE};
use learnopt::meta::{checkpoint_select, CheckpointRecord, LogEntry, MetaConfig, MetaTrainer};
use learnopt::optimizee::TaskFamily;
use learnopt::seeded_rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const SUMMARY_FILE: &str = "meta_summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSettings {
    pub model: ModelKind,
    pub iterations: u64,
    pub config: MetaConfig,
    /// Seed of the initial `φ`.
    pub phi_seed: u64,
}

impl MetaSettings {
    pub fn new(model: ModelKind) -> Self {
        MetaSettings {
            model,
            iterations: 2000,
            config: match model {
                ModelKind::RnnProp => MetaConfig::default(),
                ModelKind::Dm => MetaConfig::dm(),
            },
            phi_seed: 0,
        }
    }

    pub fn learned_config(&self) -> LearnedConfig {
        match self.model {
            ModelKind::RnnProp => LearnedConfig::rnnprop(),
            ModelKind::Dm => LearnedConfig::dm(),
        }
    }

    pub fn initial_params(&self) -> Result<LearnedParams> {
        Ok(LearnedParams::init(self.learned_config(), &mut seeded_rng(self.phi_seed))?)
    }
}

/// Where a checkpoint lives and how it scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub iteration: u64,
    pub ema_loss: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub iterations: u64,
    pub checkpoints: Vec<CheckpointSummary>,
    pub selected: CheckpointSummary,
}

pub struct MetaOutcome {
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected: Arc<LearnedParams>,
    pub summary: MetaSummary,
}

fn summarize(c: &CheckpointRecord) -> CheckpointSummary {
    CheckpointSummary {
        iteration: c.iteration,
        ema_loss: c.ema_loss,
        path: c.path.clone(),
    }
}

/// Meta-trains for `settings.iterations` and selects the checkpoint with
/// the lowest moving-average loss. A final checkpoint is added when the
/// last iteration is not a multiple of the checkpoint interval. With `out`,
/// writes the log, every checkpoint and `meta_summary.json`.
pub fn meta_train(family: Arc<dyn TaskFamily>, settings: &MetaSettings, seed: u64, out: Option<&Path>) -> Result<MetaOutcome> {
    if settings.iterations == 0 {
        return Err(BenchError::config("meta.iterations", "must be at least 1"));
    }
    let mut trainer = MetaTrainer::new(settings.config.clone(), settings.initial_params()?, family, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        trainer = trainer.with_checkpoint_dir(dir.join(CHECKPOINT_DIR));
    }
    let every = (settings.iterations / 20).max(1);
    for _ in 0..settings.iterations {
        let r = trainer.step()?;
        if r.iteration % every == 0 {
            log::info!("meta-iteration {} loss {:.5} ema {:.5}", r.iteration, r.meta_loss, r.moving_average);
        }
    }
    if trainer.iterations_done() % settings.config.checkpoint_every != 0 {
        trainer.checkpoint()?;
    }
    let selected = checkpoint_select(trainer.checkpoints())?;
    let summary = MetaSummary {
        iterations: trainer.iterations_done(),
        checkpoints: trainer.checkpoints().iter().map(summarize).collect(),
        selected: summarize(selected),
    };
    let selected = selected.params.clone();
    if let Some(dir) = out {
        write_log(dir.join(TRAINING_LOG_FILE), trainer.log())?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(MetaOutcome {
        log: trainer.log().to_vec(),
        checkpoints: trainer.checkpoints().to_vec(),
        selected,
        summary,
    })
}

#[derive(Serialize)]
struct LogRow {
    iteration: u64,
    meta_loss: f64,
    moving_average: f64,
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(LogRow {
            iteration: e.iteration,
            meta_loss: e.meta_loss,
            moving_average: e.moving_average,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a learned optimizer from a checkpoint directory, from a
/// meta-training output directory (its selected checkpoint), or from a
/// directory of `ckpt_*` entries (lowest recorded moving-average loss).
pub fn resolve_checkpoint(path: impl AsRef<Path>) -> Result<LearnedParams> {
    let path = path.as_ref();
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(load_checkpoint(path)?.0);
    }
    if path.join(SUMMARY_FILE).is_file() {
        let summary: MetaSummary = serde_json::from_slice(&fs::read(path.join(SUMMARY_FILE))?)?;
        let selected = summary.selected.path.ok_or_else(|| {
            BenchError::MissingCheckpoint(format!("{} records no checkpoint path", path.join(SUMMARY_FILE).display()))
        })?;
        return Ok(load_checkpoint(selected)?.0);
    }
    let dir = if path.join(CHECKPOINT_DIR).is_dir() {
        path.join(CHECKPOINT_DIR)
    } else {
        path.to_path_buf()
    };
    let entries = fs::read_dir(&dir).map_err(|_| BenchError::MissingCheckpoint(format!("{} not found", path.display())))?;
    let mut best: Option<(f64, u64, PathBuf)> = None;
    for entry in entries {
        let p = entry?.path();
        if !p.join(MANIFEST_FILE).is_file() {
            continue;
        }
        let (_, manifest) = load_checkpoint(&p)?;
        let ema = manifest.ema_loss.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((e, it, _)) => ema < *e || (ema == *e && manifest.iteration > *it),
        };
        if better {
            best = Some((ema, manifest.iteration, p));
        }
    }
    match best {
        Some((_, _, p)) => Ok(load_checkpoint(p)?.0),
        None => Err(BenchError::MissingCheckpoint(format!("no checkpoint found under {}", path.display()))),
    }
}

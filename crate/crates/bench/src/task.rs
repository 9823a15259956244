//! Task identifiers and the datasets behind them.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use learnopt::data::{load_idx, synthetic_fallback, Dataset};
use learnopt::optimizee::{Activation, Mlp, Optimizee, Quadratic, QuadraticFamily, SineLstm, TaskFamily};

use crate::error::{BenchError, Result};

pub const DEFAULT_NOISE: f64 = 0.1;
pub const SMALL_NOISE: f64 = 0.01;

/// An optimizee selected by id: `base-mlp`, `mlp-act:<act>`,
/// `mlp-depth:<k>`, `sine-lstm[:2layer|:smallnoise]` or `quadratic`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    Mlp { layers: usize, activation: Activation },
    Sine { layers: usize, noise_sigma: f64 },
    Quadratic { lambda: f64, dim: usize },
}

impl TaskSpec {
    pub fn base_mlp() -> Self {
        TaskSpec::Mlp {
            layers: 1,
            activation: Activation::Sigmoid,
        }
    }

    pub fn needs_data(&self) -> bool {
        matches!(self, TaskSpec::Mlp { .. })
    }

    /// The optimizee; MLP tasks need `data`.
    pub fn build(&self, data: Option<&Arc<Dataset>>) -> Result<Arc<dyn Optimizee>> {
        Ok(match *self {
            TaskSpec::Mlp { layers, activation } => {
                let data = data.ok_or_else(|| BenchError::config("task", format!("{self} needs a dataset")))?;
                Arc::new(Mlp::new(data.clone(), layers, activation)?)
            }
            TaskSpec::Sine { layers, noise_sigma } => Arc::new(SineLstm::new(layers, noise_sigma)?),
            TaskSpec::Quadratic { lambda, dim } => Arc::new(Quadratic::new(lambda, dim)?),
        })
    }

    /// Distribution used for meta-training. For `quadratic`, `λ` is drawn
    /// from `[λ/10, 10λ]`.
    pub fn family(&self, data: Option<&Arc<Dataset>>) -> Result<Arc<dyn TaskFamily>> {
        Ok(match *self {
            TaskSpec::Mlp { layers, activation } => {
                let data = data.ok_or_else(|| BenchError::config("task", format!("{self} needs a dataset")))?;
                Arc::new(Mlp::new(data.clone(), layers, activation)?)
            }
            TaskSpec::Sine { layers, noise_sigma } => Arc::new(SineLstm::new(layers, noise_sigma)?),
            TaskSpec::Quadratic { lambda, dim } => Arc::new(QuadraticFamily {
                dim,
                lambda_low: lambda / 10.0,
                lambda_high: lambda * 10.0,
            }),
        })
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TaskSpec::Mlp {
                layers: 1,
                activation: Activation::Sigmoid,
            } => f.write_str("base-mlp"),
            TaskSpec::Mlp { layers: 1, activation } => write!(f, "mlp-act:{activation}"),
            TaskSpec::Mlp {
                layers,
                activation: Activation::Sigmoid,
            } => write!(f, "mlp-depth:{layers}"),
            TaskSpec::Mlp { layers, activation } => write!(f, "mlp:{layers}x{activation}"),
            TaskSpec::Sine { layers: 1, noise_sigma } if noise_sigma == DEFAULT_NOISE => f.write_str("sine-lstm"),
            TaskSpec::Sine { layers: 2, noise_sigma } if noise_sigma == DEFAULT_NOISE => f.write_str("sine-lstm:2layer"),
            TaskSpec::Sine { layers: 1, noise_sigma } if noise_sigma == SMALL_NOISE => f.write_str("sine-lstm:smallnoise"),
            TaskSpec::Sine { layers, noise_sigma } => write!(f, "sine-lstm:{layers}x{noise_sigma}"),
            TaskSpec::Quadratic { .. } => f.write_str("quadratic"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| BenchError::config("task", reason);
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("base-mlp", None) => Ok(Self::base_mlp()),
            ("mlp-act", Some(a)) => Ok(TaskSpec::Mlp {
                layers: 1,
                activation: a.parse().map_err(|_| bad(format!("unknown activation {a:?}")))?,
            }),
            ("mlp-depth", Some(k)) => match k.parse::<usize>() {
                Ok(layers) if layers >= 1 => Ok(TaskSpec::Mlp {
                    layers,
                    activation: Activation::Sigmoid,
                }),
                _ => Err(bad(format!("mlp depth must be a positive integer, got {k:?}"))),
            },
            ("sine-lstm", None) => Ok(TaskSpec::Sine {
                layers: 1,
                noise_sigma: DEFAULT_NOISE,
            }),
            ("sine-lstm", Some("2layer")) => Ok(TaskSpec::Sine {
                layers: 2,
                noise_sigma: DEFAULT_NOISE,
            }),
            ("sine-lstm", Some("smallnoise")) => Ok(TaskSpec::Sine {
                layers: 1,
                noise_sigma: SMALL_NOISE,
            }),
            ("quadratic", None) => Ok(TaskSpec::Quadratic { lambda: 1.0, dim: 10 }),
            _ => Err(bad(format!("unknown task {s:?}"))),
        }
    }
}

/// Where images come from: IDX files when both paths are set, otherwise
/// the synthetic stand-in.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub synthetic: bool,
    /// Examples kept (a prefix of the IDX files, or the synthetic size).
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            images_path: None,
            labels_path: None,
            synthetic: true,
            size: 1000,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        if self.synthetic {
            return Ok(synthetic_fallback(self.seed, self.size)?);
        }
        match (&self.images_path, &self.labels_path) {
            (Some(images), Some(labels)) => {
                let data = load_idx(images, labels)?;
                Ok(if data.len() > self.size { data.subset(self.size) } else { data })
            }
            _ => Err(BenchError::config(
                "data.synthetic",
                "synthetic data disabled but data.images_path/data.labels_path not both set",
            )),
        }
    }
}

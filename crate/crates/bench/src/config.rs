//! Experiment configuration from `key = value` text.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors. Lists are comma-separated.
//!
//! ```text
//! task = mlp-act:relu
//! optimizer = adam
//! lr = 0.01
//! steps = 2000
//! sweep.range = 1e-5, 10, 7
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use learnopt::classic::{ClassicKind, Hyperparams};
use learnopt::learned::ModelKind;
use learnopt::meta::LossWeights;
use learnopt::optimizee::Activation;

use crate::control::{ControlSettings, Variant};
use crate::error::{BenchError, Result};
use crate::sweep::log_grid;
use crate::task::{DataSpec, TaskSpec};
use crate::train::MetaSettings;

/// Parses `key = value` lines into a map from key to (line, value).
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(BenchError::Syntax {
                line,
                reason: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(BenchError::Syntax {
                line,
                reason: format!("invalid key {k:?}"),
            });
        }
        if map.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(BenchError::Syntax {
                line,
                reason: format!("duplicate key {k:?}"),
            });
        }
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerChoice {
    Classic(ClassicKind),
    Learned(ModelKind),
}

impl FromStr for OptimizerChoice {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnnprop" => Ok(OptimizerChoice::Learned(ModelKind::RnnProp)),
            "dm" => Ok(OptimizerChoice::Learned(ModelKind::Dm)),
            other => other
                .parse()
                .map(OptimizerChoice::Classic)
                .map_err(|_| BenchError::config("optimizer", format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Source of a learned optimizer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointSource {
    /// A checkpoint, a meta-training output directory or a directory of
    /// checkpoints.
    Path(PathBuf),
    /// Freshly initialized `φ` (`untrained` or `untrained:<seed>`).
    Untrained { seed: u64 },
}

impl FromStr for CheckpointSource {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "untrained" => Ok(CheckpointSource::Untrained { seed: 0 }),
            Some(("untrained", seed)) => seed
                .parse()
                .map(|seed| CheckpointSource::Untrained { seed })
                .map_err(|_| BenchError::config("checkpoint", format!("bad seed in {s:?}"))),
            _ => Ok(CheckpointSource::Path(PathBuf::from(s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub data: DataSpec,
    pub optimizer: OptimizerChoice,
    /// Used by classic optimizers only.
    pub hyperparams: Hyperparams,
    pub checkpoint: Option<CheckpointSource>,
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub meta: MetaSettings,
    pub sweep_grid: Vec<f64>,
    pub control: ControlSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::base_mlp(),
            data: DataSpec::default(),
            optimizer: OptimizerChoice::Classic(ClassicKind::Adam),
            hyperparams: Hyperparams::defaults(ClassicKind::Adam),
            checkpoint: None,
            steps: 100,
            repeats: 10,
            seed: 0,
            out: PathBuf::from("results"),
            meta: MetaSettings::new(ModelKind::RnnProp),
            sweep_grid: log_grid(1e-5, 10.0, 7).expect("valid default grid"),
            control: ControlSettings::default(),
        }
    }
}

/// Tracks which keys were consumed.
struct Keys {
    map: BTreeMap<String, (usize, String)>,
    used: BTreeSet<String>,
}

impl Keys {
    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).map(|(_, v)| v.clone());
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| BenchError::config(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse()
                        .map_err(|e| BenchError::config(key, format!("cannot parse {item:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().find(|(k, _)| !self.used.contains(*k)) {
            Some((k, (line, _))) => Err(BenchError::Syntax {
                line: *line,
                reason: format!("unknown key {k:?}"),
            }),
            None => Ok(()),
        }
    }
}

fn parse_bool(key: &str, v: Option<String>) -> Result<Option<bool>> {
    match v.as_deref() {
        None => Ok(None),
        Some("true") => Ok(Some(true)),
        Some("false") => Ok(Some(false)),
        Some(other) => Err(BenchError::config(key, format!("expected true or false, got {other:?}"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = Keys {
            map: parse_key_values(text)?,
            used: BTreeSet::new(),
        };
        let mut c = ExperimentConfig::default();

        keys.set("task", &mut c.task)?;
        c.apply_task_overrides(&mut keys)?;

        if let Some(p) = keys.raw("data.images_path") {
            c.data.images_path = Some(p.into());
        }
        if let Some(p) = keys.raw("data.labels_path") {
            c.data.labels_path = Some(p.into());
        }
        c.data.synthetic = c.data.images_path.is_none() || c.data.labels_path.is_none();
        if let Some(b) = parse_bool("data.synthetic", keys.raw("data.synthetic"))? {
            c.data.synthetic = b;
        }
        keys.set("data.size", &mut c.data.size)?;
        keys.set("data.seed", &mut c.data.seed)?;

        keys.set("optimizer", &mut c.optimizer)?;
        let hp_keys = ["lr", "beta1", "beta2", "gamma", "eps", "bias_correction", "delta_init"];
        match c.optimizer {
            OptimizerChoice::Classic(kind) => {
                c.hyperparams = Hyperparams::defaults(kind);
                let hp = &mut c.hyperparams;
                keys.set("lr", &mut hp.lr)?;
                keys.set("beta1", &mut hp.beta1)?;
                keys.set("beta2", &mut hp.beta2)?;
                keys.set("gamma", &mut hp.gamma)?;
                keys.set("eps", &mut hp.eps)?;
                keys.set("delta_init", &mut hp.delta_init)?;
                if let Some(b) = parse_bool("bias_correction", keys.raw("bias_correction"))? {
                    hp.bias_correction = b;
                }
            }
            OptimizerChoice::Learned(_) => {
                if let Some(k) = hp_keys.iter().find(|k| keys.map.contains_key(**k)) {
                    return Err(BenchError::config(*k, "applies to classic optimizers only"));
                }
            }
        }
        c.checkpoint = keys.get("checkpoint")?;

        keys.set("steps", &mut c.steps)?;
        keys.set("repeats", &mut c.repeats)?;
        keys.set("seed", &mut c.seed)?;
        if let Some(p) = keys.raw("out") {
            c.out = p.into();
        }

        c.apply_meta(&mut keys)?;
        c.apply_sweep(&mut keys)?;
        c.apply_control(&mut keys)?;
        keys.finish()?;
        c.validate()?;
        Ok(c)
    }

    fn apply_task_overrides(&mut self, keys: &mut Keys) -> Result<()> {
        let mlp_layers: Option<usize> = keys.get("mlp.layers")?;
        let mlp_act: Option<Activation> = keys.get("mlp.activation")?;
        let lstm_layers: Option<usize> = keys.get("lstm.layers")?;
        let sigma: Option<f64> = keys.get("lstm.noise_sigma")?;
        let lambda: Option<f64> = keys.get("quadratic.lambda")?;
        let qdim: Option<usize> = keys.get("quadratic.dim")?;
        let prefix = match self.task {
            TaskSpec::Mlp { .. } => "mlp.",
            TaskSpec::Sine { .. } => "lstm.",
            TaskSpec::Quadratic { .. } => "quadratic.",
        };
        let present = [
            ("mlp.layers", mlp_layers.is_some()),
            ("mlp.activation", mlp_act.is_some()),
            ("lstm.layers", lstm_layers.is_some()),
            ("lstm.noise_sigma", sigma.is_some()),
            ("quadratic.lambda", lambda.is_some()),
            ("quadratic.dim", qdim.is_some()),
        ];
        if let Some((k, _)) = present.iter().find(|(k, set)| *set && !k.starts_with(prefix)) {
            return Err(BenchError::config(*k, format!("does not apply to task {}", self.task)));
        }
        match &mut self.task {
            TaskSpec::Mlp { layers, activation } => {
                *layers = mlp_layers.unwrap_or(*layers);
                *activation = mlp_act.unwrap_or(*activation);
            }
            TaskSpec::Sine { layers, noise_sigma } => {
                *layers = lstm_layers.unwrap_or(*layers);
                *noise_sigma = sigma.unwrap_or(*noise_sigma);
            }
            TaskSpec::Quadratic { lambda: l, dim } => {
                *l = lambda.unwrap_or(*l);
                *dim = qdim.unwrap_or(*dim);
            }
        }
        Ok(())
    }

    fn apply_meta(&mut self, keys: &mut Keys) -> Result<()> {
        if let Some(model) = keys.raw("meta.model") {
            self.meta = match model.as_str() {
                "rnnprop" => MetaSettings::new(ModelKind::RnnProp),
                "dm" => MetaSettings::new(ModelKind::Dm),
                other => return Err(BenchError::config("meta.model", format!("expected rnnprop or dm, got {other:?}"))),
            };
        }
        let m = &mut self.meta;
        keys.set("meta.iterations", &mut m.iterations)?;
        keys.set("meta.phi_seed", &mut m.phi_seed)?;
        let cfg = &mut m.config;
        keys.set("meta.periods", &mut cfg.periods)?;
        keys.set("meta.period_len", &mut cfg.period_len)?;
        keys.set("meta.lr", &mut cfg.meta_lr)?;
        keys.set("meta.l_f", &mut cfg.l_f)?;
        keys.set("meta.l_g", &mut cfg.l_g)?;
        keys.set("meta.n_convex", &mut cfg.n_convex)?;
        keys.set("meta.checkpoint_every", &mut cfg.checkpoint_every)?;
        keys.set("meta.ema_decay", &mut cfg.ema_decay)?;
        keys.set("meta.divergence_threshold", &mut cfg.divergence_threshold)?;
        keys.set("meta.max_resamples", &mut cfg.max_resamples)?;
        if let Some(b) = parse_bool("meta.random_scaling", keys.raw("meta.random_scaling"))? {
            cfg.random_scaling = b;
        }
        if let Some(b) = parse_bool("meta.convex", keys.raw("meta.convex"))? {
            cfg.convex_combination = b;
        }
        if let Some(w) = keys.raw("meta.weights") {
            cfg.weights = match w.as_str() {
                "final" => LossWeights::FinalOnly,
                "uniform" => LossWeights::Uniform,
                other => return Err(BenchError::config("meta.weights", format!("expected final or uniform, got {other:?}"))),
            };
        }
        Ok(())
    }

    fn apply_sweep(&mut self, keys: &mut Keys) -> Result<()> {
        let grid: Option<Vec<f64>> = keys.list("sweep.grid")?;
        let range: Option<Vec<f64>> = keys.list("sweep.range")?;
        match (grid, range) {
            (Some(_), Some(_)) => Err(BenchError::config("sweep.range", "set either sweep.grid or sweep.range")),
            (Some(g), None) => {
                self.sweep_grid = g;
                Ok(())
            }
            (None, Some(r)) => match r[..] {
                [lo, hi, n] if n.fract() == 0.0 && n >= 0.0 => {
                    self.sweep_grid = log_grid(lo, hi, n as usize)?;
                    Ok(())
                }
                _ => Err(BenchError::config("sweep.range", "expected `lo, hi, n`")),
            },
            (None, None) => Ok(()),
        }
    }

    fn apply_control(&mut self, keys: &mut Keys) -> Result<()> {
        let c = &mut self.control;
        c.base = MetaSettings::new(ModelKind::RnnProp).config;
        let base = &self.meta.config;
        c.base.periods = base.periods;
        c.base.period_len = base.period_len;
        c.base.meta_lr = base.meta_lr;
        c.base.l_f = base.l_f;
        c.base.l_g = base.l_g;
        c.base.n_convex = base.n_convex;
        c.base.checkpoint_every = base.checkpoint_every;
        c.base.ema_decay = base.ema_decay;
        c.base.divergence_threshold = base.divergence_threshold;
        c.base.max_resamples = base.max_resamples;

        if let Some(v) = keys.list("control.variants")? {
            c.variants = v;
        }
        let budget: u64 = keys.get("control.budget")?.unwrap_or(c.budgets[0]);
        c.budgets = vec![budget; c.variants.len()];
        for key in keys.with_prefix("control.budget.") {
            let name = &key["control.budget.".len()..];
            let variant: Variant = name.parse()?;
            let b: u64 = keys.get(&key)?.expect("key listed above");
            match c.variants.iter().position(|v| *v == variant) {
                Some(i) => c.budgets[i] = b,
                None => return Err(BenchError::config(key, format!("{variant} is not among control.variants"))),
            }
        }
        if let Some(f) = keys.list("control.fractions")? {
            c.fractions = f;
        }
        if let Some(t) = keys.list("control.eval_tasks")? {
            c.eval_tasks = t;
        }
        keys.set("control.eval_steps", &mut c.eval_steps)?;
        keys.set("control.eval_repeats", &mut c.eval_repeats)?;
        keys.set("control.trials", &mut c.trials)?;
        Ok(())
    }

    /// Range checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(BenchError::config("steps", "must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(BenchError::config("repeats", "must be at least 1"));
        }
        if self.data.size < 10 {
            return Err(BenchError::config("data.size", "must be at least 10"));
        }
        self.meta.config.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let c = ExperimentConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn full_example() {
        let text = "
            task = mlp-act:relu   # ReLU variant
            optimizer = momentum
            lr = 0.05
            gamma = 0.8
            steps = 2000
            repeats = 3
            seed = 42
            out = /tmp/x
            data.size = 500
            meta.iterations = 10
            meta.lr = 0.005
            meta.convex = false
            sweep.range = 1e-4, 1, 5
            control.variants = rnnprop, rnnprop-cc, dm
            control.budget = 40
            control.fractions = 0.25, 1
        ";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.task.to_string(), "mlp-act:relu");
        assert_eq!(c.optimizer, OptimizerChoice::Classic(ClassicKind::Momentum));
        assert_eq!(c.hyperparams.lr, 0.05);
        assert_eq!(c.hyperparams.gamma, 0.8);
        assert_eq!((c.steps, c.repeats, c.seed), (2000, 3, 42));
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert!(c.data.synthetic);
        assert_eq!(c.meta.iterations, 10);
        assert!(!c.meta.config.convex_combination);
        assert_eq!(c.sweep_grid.len(), 5);
        assert_eq!(c.control.budgets, vec![40; 3]);
        assert_eq!(c.control.base.meta_lr, 0.005);
        assert_eq!(c.control.checkpoints().unwrap(), vec![10, 40]);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(ExperimentConfig::parse("steps 3"), Err(BenchError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("a = 1\na = 2"), Err(BenchError::Syntax { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("\nbogus = 1"), Err(BenchError::Syntax { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("steps = -1"), Err(BenchError::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("steps = 0"), Err(BenchError::Config { .. })));
        assert!(ExperimentConfig::parse("optimizer = rnnprop\nlr = 0.1").is_err());
        assert!(ExperimentConfig::parse("task = quadratic\nmlp.layers = 2").is_err());
        assert!(ExperimentConfig::parse("sweep.range = 1, 2").is_err());
        assert!(ExperimentConfig::parse("control.budget.adam = 3").is_err());
        assert!(ExperimentConfig::parse("data.synthetic = maybe").is_err());
    }

    #[test]
    fn per_variant_budgets() {
        let c = ExperimentConfig::parse("control.budget = 100\ncontrol.budget.rnnprop-cc = 120").unwrap();
        assert_eq!(c.control.budgets, vec![100, 120]);
        assert!(matches!(c.control.budget(), Err(BenchError::BudgetMismatch(_))));
    }

    #[test]
    fn learned_optimizer_sources() {
        let c = ExperimentConfig::parse("optimizer = rnnprop\ncheckpoint = untrained:5").unwrap();
        assert_eq!(c.optimizer, OptimizerChoice::Learned(ModelKind::RnnProp));
        assert_eq!(c.checkpoint, Some(CheckpointSource::Untrained { seed: 5 }));
        let c = ExperimentConfig::parse("optimizer = dm\ncheckpoint = out/meta").unwrap();
        assert_eq!(c.checkpoint, Some(CheckpointSource::Path("out/meta".into())));
    }

    #[test]
    fn task_overrides() {
        let c = ExperimentConfig::parse("task = sine-lstm\nlstm.layers = 2").unwrap();
        assert_eq!(c.task.to_string(), "sine-lstm:2layer");
        let c = ExperimentConfig::parse("mlp.layers = 3\nmlp.activation = tanh").unwrap();
        assert_eq!(c.task.to_string(), "mlp:3xtanh");
        let c = ExperimentConfig::parse("data.images_path = a\ndata.labels_path = b").unwrap();
        assert!(!c.data.synthetic);
    }
}

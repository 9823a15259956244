//! Hand-crafted first-order optimizers.
//!
//! Every rule is coordinatewise and returns the increment `Δθ`; callers apply
//! `θ ← θ + Δθ`. Stabilizing `ε` terms sit outside the square root,
//! `g / (sqrt(v) + ε)`, except for Adadelta's numerator (see
//! [`ClassicKind::Adadelta`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that turns gradients into parameter increments.
pub trait Optimizer {
    /// `Δθ` for each parameter tensor, in the order of `grads`.
    fn step(&mut self, grads: &[Tensor]) -> Result<Vec<Tensor>>;

    fn name(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicKind {
    /// `Δθ = -α g`
    Sgd,
    /// `m = γ m + (1-γ) g`, `Δθ = -α m` (exponential-average form).
    Momentum,
    /// `G = G + g²`, `Δθ = -α g / (sqrt(G) + ε)`
    Adagrad,
    /// `v = β₂ v + (1-β₂) g²`, `Δθ = -α g sqrt(D + ε) / (sqrt(v) + ε)`,
    /// `D = β₁ D + (1-β₁) (Δθ/α)²` where `D` on the right is the previous value.
    Adadelta,
    /// `v = β₂ v + (1-β₂) g²`, `Δθ = -α g / (sqrt(v) + ε)`
    RmsProp,
    /// Bias-corrected moments, `Δθ = -α m̂ / (sqrt(v̂) + ε)`.
    Adam,
}

/// Whether a rule's step size follows the raw gradient magnitude (first
/// class) or only its size relative to the running second moment (second
/// class).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleClass {
    First,
    Second,
}

impl ClassicKind {
    pub const ALL: [ClassicKind; 6] = [
        ClassicKind::Sgd,
        ClassicKind::Momentum,
        ClassicKind::Adagrad,
        ClassicKind::Adadelta,
        ClassicKind::RmsProp,
        ClassicKind::Adam,
    ];

    pub fn scale_class(self) -> ScaleClass {
        match self {
            ClassicKind::Sgd | ClassicKind::Momentum => ScaleClass::First,
            ClassicKind::Adagrad
            | ClassicKind::Adadelta
            | ClassicKind::RmsProp
            | ClassicKind::Adam => ScaleClass::Second,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassicKind::Sgd => "sgd",
            ClassicKind::Momentum => "momentum",
            ClassicKind::Adagrad => "adagrad",
            ClassicKind::Adadelta => "adadelta",
            ClassicKind::RmsProp => "rmsprop",
            ClassicKind::Adam => "adam",
        }
    }
}

impl fmt::Display for ClassicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassicKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::arg("optimizer", format!("unknown classic optimizer {s:?}")))
    }
}

/// Hyperparameters shared by all rules; each rule reads only the ones it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Adam only.
    pub bias_correction: bool,
    /// Adadelta's `D₀`.
    pub delta_init: f64,
}

impl Hyperparams {
    /// TensorFlow's defaults for each rule. SGD, Momentum and Adagrad have
    /// no default learning rate there; 0.01 is used.
    pub fn defaults(kind: ClassicKind) -> Self {
        let base = Hyperparams {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 0.9,
            eps: 1e-8,
            bias_correction: true,
            delta_init: 0.0,
        };
        match kind {
            ClassicKind::Sgd | ClassicKind::Momentum | ClassicKind::Adagrad => base,
            ClassicKind::Adadelta => Hyperparams {
                lr: 0.001,
                beta1: 0.95,
                beta2: 0.95,
                ..base
            },
            ClassicKind::RmsProp => Hyperparams {
                lr: 0.001,
                beta2: 0.9,
                ..base
            },
            ClassicKind::Adam => Hyperparams { lr: 0.001, ..base },
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |name, value, reason| {
            Err(Error::Hyperparameter {
                name,
                value,
                reason,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr, "must be positive");
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("gamma", self.gamma)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, v, "must lie in [0, 1)");
            }
        }
        if !(self.eps >= 0.0) {
            return bad("eps", self.eps, "must be non-negative");
        }
        if !(self.delta_init >= 0.0) {
            return bad("delta_init", self.delta_init, "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Slot {
    shape: Vec<usize>,
    /// Momentum / first moment / Adadelta's `D`.
    first: Vec<f64>,
    /// Second moment or Adagrad's running sum.
    second: Vec<f64>,
}

/// One of the six classic rules together with its accumulators.
#[derive(Clone, Debug)]
pub struct ClassicOptimizer {
    kind: ClassicKind,
    hp: Hyperparams,
    slots: Vec<Slot>,
    t: u64,
}

impl ClassicOptimizer {
    pub fn new(kind: ClassicKind, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        Ok(ClassicOptimizer {
            kind,
            hp,
            slots: Vec::new(),
            t: 0,
        })
    }

    pub fn with_defaults(kind: ClassicKind) -> Self {
        Self::new(kind, Hyperparams::defaults(kind)).expect("defaults are valid")
    }

    pub fn kind(&self) -> ClassicKind {
        self.kind
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First accumulator of parameter `i` (momentum, `m`, or Adadelta's `D`).
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.slots.get(i).map(|s| s.first.as_slice())
    }

    /// Second accumulator of parameter `i` (`v`, or Adagrad's `G`).
    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.slots.get(i).map(|s| s.second.as_slice())
    }

    fn ensure_slots(&mut self, grads: &[Tensor]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = grads
                .iter()
                .map(|g| Slot {
                    shape: g.shape().to_vec(),
                    first: vec![
                        if self.kind == ClassicKind::Adadelta {
                            self.hp.delta_init
                        } else {
                            0.0
                        };
                        g.len()
                    ],
                    second: vec![0.0; g.len()],
                })
                .collect();
            return Ok(());
        }
        if self.slots.len() != grads.len() {
            return Err(Error::arg(
                "classic_step",
                format!("expected {} gradients, got {}", self.slots.len(), grads.len()),
            ));
        }
        for (slot, g) in self.slots.iter().zip(grads) {
            if slot.shape != g.shape() {
                return Err(Error::shape("classic_step", &slot.shape, g.shape()));
            }
        }
        Ok(())
    }
}

impl Optimizer for ClassicOptimizer {
    fn step(&mut self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        self.ensure_slots(grads)?;
        self.t += 1;
        let t = self.t as i32;
        let hp = &self.hp;
        let kind = self.kind;
        Ok(self
            .slots
            .iter_mut()
            .zip(grads)
            .map(|(slot, g)| {
                let delta = update(kind, hp, t, slot, g.data());
                Tensor::from_parts(g.shape().to_vec(), delta)
            })
            .collect())
    }

    fn name(&self) -> String {
        self.kind.to_string()
    }
}

fn update(kind: ClassicKind, hp: &Hyperparams, t: i32, slot: &mut Slot, g: &[f64]) -> Vec<f64> {
    let Hyperparams {
        lr,
        beta1,
        beta2,
        gamma,
        eps,
        ..
    } = *hp;
    let m = &mut slot.first;
    let v = &mut slot.second;
    match kind {
        ClassicKind::Sgd => g.iter().map(|g| -lr * g).collect(),
        ClassicKind::Momentum => g
            .iter()
            .zip(m.iter_mut())
            .map(|(&g, m)| {
                *m = gamma * *m + (1.0 - gamma) * g;
                -lr * *m
            })
            .collect(),
        ClassicKind::Adagrad => g
            .iter()
            .zip(v.iter_mut())
            .map(|(&g, acc)| {
                *acc += g * g;
                -lr * g / (acc.sqrt() + eps)
            })
            .collect(),
        ClassicKind::Adadelta => g
            .iter()
            .zip(v.iter_mut().zip(m.iter_mut()))
            .map(|(&g, (v, d))| {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let delta = -lr * g * (*d + eps).sqrt() / (v.sqrt() + eps);
                let unit = delta / lr;
                *d = beta1 * *d + (1.0 - beta1) * unit * unit;
                delta
            })
            .collect(),
        ClassicKind::RmsProp => g
            .iter()
            .zip(v.iter_mut())
            .map(|(&g, v)| {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                -lr * g / (v.sqrt() + eps)
            })
            .collect(),
        ClassicKind::Adam => {
            let (c1, c2) = if hp.bias_correction {
                (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
            } else {
                (1.0, 1.0)
            };
            g.iter()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|(&g, (m, v))| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    -lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(opt: &mut ClassicOptimizer, g: f64) -> f64 {
        opt.step(&[Tensor::vector(vec![g])]).unwrap()[0].data()[0]
    }

    #[test]
    fn sgd_step() {
        let mut opt = ClassicOptimizer::new(ClassicKind::Sgd, Hyperparams::defaults(ClassicKind::Sgd).with_lr(0.1)).unwrap();
        assert!((scalar_step(&mut opt, 2.0) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let mut opt = ClassicOptimizer::with_defaults(ClassicKind::Adam);
        let d = scalar_step(&mut opt, 1.0);
        assert!((opt.first_moment(0).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment(0).unwrap()[0] - 0.001).abs() < 1e-15);
        assert!((d + 0.001).abs() < 1e-10, "{d}");
    }

    #[test]
    fn momentum_first_step_uses_average_form() {
        let hp = Hyperparams {
            gamma: 0.9,
            ..Hyperparams::defaults(ClassicKind::Momentum).with_lr(1.0)
        };
        let mut opt = ClassicOptimizer::new(ClassicKind::Momentum, hp).unwrap();
        assert!((scalar_step(&mut opt, 1.0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn classes() {
        use ClassicKind::*;
        assert_eq!(Sgd.scale_class(), ScaleClass::First);
        assert_eq!(Momentum.scale_class(), ScaleClass::First);
        for k in [Adagrad, Adadelta, RmsProp, Adam] {
            assert_eq!(k.scale_class(), ScaleClass::Second);
        }
    }

    #[test]
    fn rejects_nonpositive_lr() {
        for lr in [0.0, -1.0, f64::NAN] {
            let hp = Hyperparams::defaults(ClassicKind::Sgd).with_lr(lr);
            assert!(matches!(
                ClassicOptimizer::new(ClassicKind::Sgd, hp),
                Err(Error::Hyperparameter { name: "lr", .. })
            ));
        }
    }

    #[test]
    fn rejects_shape_change() {
        let mut opt = ClassicOptimizer::with_defaults(ClassicKind::Adam);
        opt.step(&[Tensor::zeros(&[2, 2])]).unwrap();
        assert!(matches!(
            opt.step(&[Tensor::zeros(&[4])]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(opt.step(&[Tensor::zeros(&[2, 2]), Tensor::zeros(&[1])]).is_err());
    }

    #[test]
    fn counter_and_accumulator_invariants() {
        let mut rng = crate::seeded_rng(3);
        for kind in ClassicKind::ALL {
            let mut opt = ClassicOptimizer::with_defaults(kind);
            for step in 1..=20 {
                let g = Tensor::randn(&[7], 0.0, 3.0, &mut rng);
                opt.step(&[g]).unwrap();
                assert_eq!(opt.steps(), step);
                assert!(opt.second_moment(0).unwrap().iter().all(|&x| x >= 0.0));
                if kind == ClassicKind::Adadelta {
                    assert!(opt.first_moment(0).unwrap().iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn adadelta_moves_from_zero_state() {
        let mut opt = ClassicOptimizer::with_defaults(ClassicKind::Adadelta);
        let d = scalar_step(&mut opt, 1.0);
        assert!(d < 0.0);
    }

    #[test]
    fn parse_round_trip() {
        for k in ClassicKind::ALL {
            assert_eq!(k.as_str().parse::<ClassicKind>().unwrap(), k);
        }
        assert!("lbfgs".parse::<ClassicKind>().is_err());
    }
}

//! Learned and hand-crafted optimizers for neural-network training.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense tensors and a tape-based
//!   reverse-mode differentiation engine.
//! * [`classic`]: SGD, Momentum, Adagrad, Adadelta, RMSprop and Adam.
//! * [`optimizee`]: the objectives being trained (MLPs, quadratics, the
//!   convex companion and the sine-prediction LSTM).
//! * [`learned`]: the coordinatewise LSTM optimizers (RNNprop and the
//!   raw-gradient baseline) plus checkpoint IO.
//! * [`meta`]: Random Scaling, convex combination and truncated-BPTT
//!   meta-training.
//! * [`data`]: IDX loading, the synthetic fallback dataset and minibatches.

pub mod autograd;
pub mod classic;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod learned;
pub mod meta;
pub mod optimizee;
pub mod tensor;

pub use autograd::{Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic generator used for every sampled quantity.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Creates the generator for `seed`.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

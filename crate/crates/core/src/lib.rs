//! Discovery and exploitation of temporally-abstract actions inside a
//! pretrained autoregressive action model, at desk scale.
//!
//! The pipeline, in dependency order:
//!
//! 1. [`grid`] — the gridworld-pinpad environment: visit colored cells in a
//!    task-specific order, walls block movement, one sparse success reward.
//! 2. [`expert`] — shortest-path expert policies and trajectory dataset
//!    generation, with groundtruth subgoal labels recorded on the side.
//! 3. [`nn`] — dense tensors, a reverse-mode tape, layer primitives, AdamW,
//!    and a named-tensor checkpoint archive. Everything downstream trains
//!    through this.
//! 4. [`seqmodel`] — the causal transformer trained on next-action and
//!    next-observation prediction, with residual-stream read/write hooks and
//!    an incremental evaluator for closed-loop rollouts.
//! 5. [`probe`] — linear belief-state probes over residual activations.
//! 6. [`steer`] — supervised per-subgoal low-rank residual controllers and
//!    the controlled-layer depth sweep.
//! 7. [`meta`] — the unsupervised variational metacontroller: sequence
//!    embedder, latent proposals, switching unit, temporal integrator, and
//!    hypernetwork controller decoder.
//! 8. [`irl`] — internal RL: the abstract-action environment wrapper, the
//!    recurrent Gaussian policy, and the critic-free clipped-surrogate
//!    trainer, plus the raw-action RL baseline.

pub mod check;
pub mod dataset;
pub mod expert;
pub mod grid;
pub mod irl;
pub mod meta;
pub mod nn;
pub mod probe;
pub mod seqmodel;
pub mod steer;
pub mod util;

pub use grid::{GridConfig, Task};
pub use nn::{ParamStore, Tensor};

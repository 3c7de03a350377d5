//! Dense-tensor numerical core: reverse-mode tape, layer kernels, AdamW,
//! and the named-tensor checkpoint archive.
//!
//! Training builds a fresh [`tape::Tape`] per sequence; evaluation paths
//! (closed-loop rollouts, the internal-RL environment) call the same
//! [`kernels`] directly in the same accumulation order, so tape forwards and
//! incremental forwards agree bit for bit. Training runs in `f32`; gradient
//! checks instantiate the same code in `f64`.

pub mod archive;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Adam, AdamConfig, GradStore, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

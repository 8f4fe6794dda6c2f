#![forbid(unsafe_code)]

//! Continual learning on the tangent plane.
//!
//! The engine trains a sequence of `specialist` networks over a task stream
//! with replay, then linearizes each specialist around its weights and trains
//! a `generalist` entirely in the tangent space of the network function,
//! where the replay objective is convex and the anchor weights are never
//! touched. A projected distillation step folds the tangent generalist back
//! into an ordinary single-weight-set network so the next task starts from
//! consolidated weights.
//!
//! Layout:
//! * [`autodiff`]: tensors and a small expression-graph engine with
//!   reverse-mode gradients and forward-mode directional derivatives.
//! * [`models`]: MLP / small CNN definitions, init, checkpoints.
//! * [`tangent`]: first-order expansion of a model around fixed weights.
//! * [`buffer`]: replay memory with stratified and reservoir strategies.
//! * [`data`]: datasets, the synthetic blob stream, on-disk format.
//! * [`learners`]: SGD, specialist/generalist training, distillation.
//! * [`continual`]: task streams, pipeline variants, evaluation, metrics.

pub mod autodiff;
pub mod buffer;
pub mod continual;
pub mod data;
pub mod error;
pub mod learners;
pub mod models;
pub mod scalar;
pub mod tangent;

pub use autodiff::{ComputeGraph, Evaluation, NodeId, ParamSet, Tensor};
pub use buffer::{BufferEntry, MemoryBuffer, WeightedReservoir};
pub use continual::{
    evaluate, run, BufferConfig, BufferStrategy, EvalMode, Metrics, RunOutput, TaskData,
    TaskStream, Variant,
};
pub use data::{generate_blobs, split_classes, BlobSpec, Dataset};
pub use error::{Error, Result};
pub use learners::{Sgd, Stage, StageLog, TrainConfig};
pub use models::{ArchSpec, LayerSpec, LogitFn, Model};
pub use scalar::{Dtype, Scalar};
pub use tangent::{LayerMask, TangentModel};

/// Derives an independent stream seed from a run seed and a purpose tag.
/// FNV-1a over the seed's little-endian bytes followed by the tag bytes:
/// stable across platforms and element widths, so every consumer of a run
/// seed (init, shuffling, buffer draws, resets) gets its own deterministic
/// stream.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

//! Test-time adaptation of vision-language embeddings.
//!
//! Zero-shot predictions from text anchors are refined by a Gaussian
//! mixture whose class parameters are shrunk toward a text-derived
//! "statistical anchor", with Laplacian and text-supervision regularizers
//! on the assignments. Batch ([`solver`]) and streaming ([`online`])
//! variants are provided, along with task generators ([`scenario`]) and an
//! evaluation harness ([`bench`]).

pub mod bench;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod gmm;
mod kernels;
mod linalg;
pub mod online;
pub mod scenario;
pub mod solver;
pub mod zero_shot;

pub use embedding::{
    load_anchors, load_embeddings, load_labels, AnchorSet, AssignmentMatrix, Dtype, EmbeddingSet, LabelVector,
};
pub use error::{Result, StataError};
pub use gmm::{AnchorConfig, AnchorDistribution, BetaMode, GaussianBank};
pub use online::{stream_init, stream_step, ClassAccumulator, StreamConfig, StreamState};
pub use solver::{solve, AffinityMode, SolveResult, SolverConfig};
pub use zero_shot::{zero_shot_accuracy, zero_shot_predict, ZeroShotConfig};

//! Two-branch pose network: a direct branch that denoises correspondence maps
//! and regresses the object pose, and a language branch that fuses the maps
//! with the instruction to regress the assembly pose.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod predict;
pub mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use graph::{Grads, Graph, Var};
pub use model::{FusionVariant, ModelConfig, Network, PoseHeadOutput};
pub use optim::{Adam, AdamState};
pub use params::ParamSet;
pub use predict::predict;
pub use train::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {0}")]
    ShapeMismatch(String),
    #[error("degenerate 6D rotation output")]
    Degenerate6d,
    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { stage: u8, epoch: usize, step: usize, detail: String },
    #[error("invalid training config field `{0}`")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Scene(#[from] lanpose_core::scene::SceneError),
    #[error(transparent)]
    Geometry(#[from] lanpose_core::geometry::GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

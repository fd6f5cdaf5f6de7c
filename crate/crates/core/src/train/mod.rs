//! Training stages and their drivers.

pub mod adapter;
pub mod backbone;
pub mod diffusion;
pub mod pipeline;
pub mod stage;

pub use stage::{StagePlan, TrainStage};

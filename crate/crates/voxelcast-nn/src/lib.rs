//! Neural rerendering: models, losses, metrics, input conversion and
//! training.

pub mod features;
pub mod input;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use features::FeatureExtractor;
pub use loss::{render_loss, LossTerms, LossWeights};
pub use model::{NvrConfig, NvrModel};
pub use trainer::{evaluate, infer_images, train, TrainConfig, TrainOutcome, TrainSample};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Autodiff(#[from] voxelcast_autodiff::AutodiffError),
    #[error("io error: {0}")]
    Io(String),
}

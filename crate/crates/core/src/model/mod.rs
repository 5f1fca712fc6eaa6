//! Relational graph convolution over DFG+ and its ablation variants.

mod engine;
mod params;
mod train;

pub use engine::{backward, forward, loss, node_id_bucket, GraphInput, LossConfig};
pub use params::{
    check_shapes, init_params, load_checkpoint, save_checkpoint, FeatureMode, LayerParams, ModelConfig, ModelParams,
    Variant, NODE_ID_BUCKETS,
};
pub use train::{
    predict, predict_graph, train, train_from, vuln_probs, EpochStats, History, NodePrediction, OptimizerConfig,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("invalid graph input: {0}")]
    Graph(String),
    #[error("no labelled sample nodes")]
    NoLabels,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

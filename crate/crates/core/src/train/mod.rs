//! Staged fitting of a dynamic scene to multi-view video.

mod config;
mod dataset;
mod fit;
mod loss;
mod model;
mod state;

pub use config::{TrainConfig, CONFIG_KEYS, PRESETS};
pub use dataset::{is_held_out, Dataset};
pub use fit::{
    fit, load_checkpoint, resume, write_outputs, CHECKPOINT, FINAL_SCENE, METRICS, PARTITION_REPORT, PRUNE_REPORT,
    RESOLVED_CONFIG,
};
pub use loss::{recon_loss, tv_loss};
pub use model::{DeformTape, DynamicBranch, Model, NetGrads};
pub use state::{
    classify_oracle, evaluate_model, gather_evidence, loss_and_grads, metrics_csv, train_step, MetricRow, Optimizer,
    Stage, StepGrads, TrainState, METRICS_HEADER,
};

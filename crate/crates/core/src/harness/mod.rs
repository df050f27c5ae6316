//! Configuration, training, checkpointing, evaluation and visualization.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod train;
mod visualize;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{
    LossConfig, LossMode, ModelConfig, OptimConfig, OptimizerKind, RunConfig, SamplingConfig,
    SamplingPreset,
};
pub use eval::{evaluate, evaluate_model, load_model, write_metrics, Metrics, VideoOutcome};
pub use optim::{Optimizer, OptimizerMeta};
pub use train::{
    checkpoint_path, compute_step, train, EpochSummary, LogLine, StepRecord, StepResult,
    TrainReport, Trainer, FINAL_CHECKPOINT, LOG_FILE, PC_WARN_MAGNITUDE,
};
pub use visualize::{jet, overlay, visualize, Visualization, FRAME_STEP, OVERLAY_ALPHA};

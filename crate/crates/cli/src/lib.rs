//! Orchestration harness: configuration, the assembled pipeline, training,
//! evaluation, explanation reports, checkpointing, and annotation ingestion.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod run;

use thiserror::Error;

pub use annotations::{ingest_annotations, AnnotationRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Config, ModelConfig, TrainConfig};
pub use pipeline::Pipeline;
pub use run::{
    gradcheck_composed, run_eval, run_explain, run_simulate, run_train, EvalReport, ExplainReport,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("report serialize error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] mcam_core::numerics::TensorError),
    #[error(transparent)]
    Scm(#[from] mcam_core::dsdag::ScmError),
    #[error(transparent)]
    Sim(#[from] mcam_core::simulator::SimError),
    #[error(transparent)]
    Mfe(#[from] mcam_core::mfe::MfeError),
    #[error(transparent)]
    Cam(#[from] mcam_core::cam::CamError),
    #[error(transparent)]
    Vlt(#[from] mcam_core::vlt::VltError),
    #[error(transparent)]
    Metrics(#[from] mcam_core::metrics::MetricsError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint magic mismatch (expected \"MCAM\")")]
    BadMagic,
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    BadVersion { got: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    CheckpointTruncated { what: &'static str },
    #[error("checkpoint parameter {name:?} not present in the model")]
    UnknownParam { name: String },
    #[error("model parameter {name:?} missing from the checkpoint")]
    MissingParam { name: String },
    #[error("checkpoint parameter {name:?} has shape {got:?}, model expects {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("loss became non-finite at epoch {epoch}, step {step} (value {value})")]
    NanLoss { epoch: usize, step: usize, value: f64 },
    #[error("dataset split {split:?} is empty under {dir}")]
    EmptySplit { split: &'static str, dir: String },
    #[error("annotation error at line {line}: {reason}")]
    Annotation { line: usize, reason: String },
    #[error("episode {id:?} carries no rendered clip for neural attribution")]
    NoClip { id: String },
}

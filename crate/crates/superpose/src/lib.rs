//! Merging fine-tuned checkpoints by task-feature superposition.
//!
//! [`store`] reads and writes safetensors files, [`roles`] decides how each
//! tensor is merged, [`pipeline`] runs a whole-checkpoint merge, [`report`]
//! measures feature preservation and ablations, and [`synth`] generates
//! seeded test data. The per-layer mathematics lives in `superpose-core`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod roles;
pub mod store;
pub mod synth;

pub use config::{CliConfig, ConfigLayer, MergeSettings, TaskEntry};
pub use error::{Error, Result};
pub use pipeline::{
    merge_baseline, merge_checkpoints, CheckpointSet, LayerReport, MergeReport, PipelineOptions, TaskInput, TaskSource,
};
pub use report::{ablation_report, method_config, preservation_report, AblationReport, PreservationReport};
pub use roles::{classify, RoleRule, RoleRules};
pub use store::{Checkpoint, Dtype, TensorRecord};

//! Hybrid-stream vision-language model with a pluggable adaptation engine:
//! bottleneck adapters with cross-modal projection sharing, low-rank
//! adaptation, frame-aware attention for video, training objectives,
//! retrieval metrics, synthetic data and checkpointing.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frames;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod plan;
pub mod store;
pub mod train;
pub mod workflow;

pub use checkpoint::Checkpoint;
pub use config::{
    AdaptationConfig, BackboneConfig, Encoder, LayerSet, Modality, ModalitySet, RunConfig,
    Sharing, TaskKind, Variant,
};
pub use error::{Error, Result};
pub use plan::{build_parameter_plan, format_millions, CountReport, ParameterPlan};
pub use store::{Graph, Group, ParameterStore};
pub use data::{DataKind, Dataset, Sample, Split, Vocab, WorldSpec};
pub use frames::{PfaOptions, VideoFeatures};
pub use metrics::MetricsRecord;
pub use model::{FeatureSet, Model, Span};

//! Latent masked-diffusion pre-training: a latent space projector, a masked
//! autoencoder over its latent grid, mask-ratio schedules and the
//! loss-decrease efficiency metrics used to compare them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod projector;
pub mod report;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{RunConfig, RunManifest};
pub use error::{LmdError, Result};
pub use mae::{LatentMae, MaeConfig, MaeMode, PatchSequence, ReconstructedLatent};
pub use metrics::{IterationRecord, MetricsLog, MetricsSummary};
pub use numerics::{GradReport, Tensor};
pub use projector::{Codebook, LatentImage, Projector, ProjectorConfig, QuantizedLatent};
pub use schedule::{MaskPlan, ScheduleConfig, Scheme};
pub use trainer::{LatentCache, RunOptions};

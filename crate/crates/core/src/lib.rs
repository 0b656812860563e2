//! Scenario-conditioned origin–destination flow generation.
//!
//! Pipeline: trajectories are aggregated onto a multi-resolution
//! [`dynmap::DynamicMap`] into OD matrices ([`mobility`]), log-encoded into
//! fixed 64×64 images ([`codec`]), learned by a conditional GAN ([`model`])
//! built on a small autodiff layer ([`tensor`]), and scored against held-out
//! data and a gravity-law baseline ([`gravity`], [`metrics`]).

pub mod codec;
pub mod dynmap;
pub mod gravity;
pub mod metrics;
pub mod mobility;
pub mod model;
pub mod tensor;

pub use codec::{FlowImage, FlowMatrix};
pub use dynmap::{DynamicMap, MapSpecDoc};
pub use gravity::GravityParams;
pub use metrics::{Checksum, MetricReport};
pub use mobility::{ODDataset, TimeGroup, TrajectoryRecord, Trip};
pub use model::{ConditionMode, ConditionVocab, ConditionedSample, FlowGan, TrainConfig};

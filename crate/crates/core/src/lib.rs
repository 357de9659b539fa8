//! Multistage contrastive learning.
//!
//! A single contrastive stage tends to latch onto the easiest feature in the
//! data and suppress the rest. Multistage training clusters each stage's
//! embeddings, concatenates the cluster ids into per-sample pseudo labels, and
//! trains the next stage with negatives drawn only from the anchor's own
//! pseudo-label group, so features already captured stop being useful for
//! discrimination. The final representation concatenates every stage.
//!
//! Modules follow the pipeline: [`data`] produces factorized images and
//! augmented views, [`model`] is the encoder, [`objective`] the masked InfoNCE
//! loss, [`clustering`] K-means and pseudo labels, [`sampling`] batch plans,
//! [`pipeline`] the stage loop, and [`evaluation`] linear probes and AMI.

pub mod clustering;
pub mod data;
mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod sampling;

pub use clustering::{ami, kmeans, validate_capacity, Capacity, ClusterAssignment, KMeansParams, PseudoLabel};
pub use data::{AugmentationConfig, Dataset, FactorSpec, Image, LabeledImage};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{init_encoder, EncoderSpec, EncoderState, InitMode, TrainConfig};
pub use objective::{build_mask, info_nce, info_nce_unmasked, symmetric_info_nce, NegativeMask};
pub use sampling::{plan_epoch, plan_epoch_uniform, BatchPlan};

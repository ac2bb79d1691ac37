//! Herbal prescription construction from tongue images.
//!
//! The crate bundles everything needed to train and evaluate compact
//! convolutional prescription models:
//!
//! - [`tensor`]: NHWC tensors and a small reverse-mode differentiator.
//! - [`model`]: the single channel, dual channel and dual channel with
//!   therapy-topic head architectures, their losses, training and checkpoints.
//! - [`lda`]: herb vocabulary, collapsed Gibbs LDA and fold-in inference.
//! - [`augment`]: random affine image augmentation.
//! - [`metrics`]: set similarity, count, topic-KL and pair-logic metrics.
//! - [`data`]: manifests, fold splits, dataset statistics and a synthetic
//!   planted-topic world for end-to-end checks.

pub mod augment;
pub mod data;
pub mod error;
pub mod lda;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

pub use augment::{AffineTransform, AugmentConfig};
pub use data::{Dataset, DatasetSplit, Sample, SynthConfig};
pub use lda::{HerbVocabulary, LdaConfig, TopicDistribution, TopicModel};
pub use metrics::{LogicScore, MetricsReport, PairRuleTable, SampleSimilarity};
pub use model::{ArchitectureSpec, ModelOutputs, ModelParameters, TrainConfig, Variant};
pub use tensor::Tensor;

/// Stable 64-bit digest (leading bytes of SHA-256), used for seed streams
/// and vocabulary fingerprints.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

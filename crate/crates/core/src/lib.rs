//! Deep adaptive fuzzy clustering.
//!
//! A convolutional encoder/decoder is trained jointly with a fuzzy clustering
//! layer in its bottleneck space. Memberships and cluster weights follow
//! closed-form updates regularized by a weighted adaptive entropy, while the
//! network is trained by RMSprop on the sum of a reconstruction loss (with a
//! pseudo-label consistency term) and a fuzzy clustering loss.
//!
//! Modules:
//! - [`tensor`]: arrays, reverse-mode tape, RMSprop
//! - [`network`]: encoder, decoder, cluster head, checkpoints
//! - [`fuzzy`]: similarity, pseudo-label refinement, memberships, weights, losses
//! - [`metrics`]: Acc (Hungarian matching), ARI, NMI
//! - [`data`]: IDX loading, synthetic blobs, augmentation, batching
//! - [`harness`]: the training loop, evaluation, sweeps, reports

pub mod data;
pub mod error;
pub mod fuzzy;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{DafcError, Result};

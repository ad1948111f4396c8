//! Stylized image captioning trained from paired factual captions and
//! unpaired stylized sentences.
//!
//! The pipeline aligns image features with object-word features
//! contrastively, learns a conditional VAE over style phrases whose latent
//! space is partitioned by a style classifier, and at inference time
//! reject-samples latents for a target style before filtering candidate
//! captions through a style discriminator.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cvae;
pub mod embed;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod phrase;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, UnpairedMode};
pub use corpus::{ObjectVocabulary, StyleLabel, StyleSet, StyledCaption, WordVocabulary};
pub use generate::{Generation, RecheckConfig};
pub use train::{train, EpochLog, StyleCaptioner, TrainOutcome, TrainingData};

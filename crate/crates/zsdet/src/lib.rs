//! Zero-shot object detection by distilling a vision-language encoder.
//!
//! The pipeline has three stages, each of which can be run on a synthetic toy
//! dataset with a deterministic mock encoder:
//!
//! 1. **Adaptation** ([`adaptation`]): finetune only the normalization-style
//!    parameters of the encoder with a cross-entropy objective over base
//!    category instance crops, bridging the classification-to-detection
//!    domain gap.
//! 2. **Proposal generation** ([`proposals`]): score dense anchors with the
//!    encoder against a category-name dictionary, keep the top scoring
//!    regions after NMS, append enlarged base ground-truth boxes, and persist
//!    boxes plus cached encoder features to an offline store.
//! 3. **Detection head training** ([`detector`]): a two-stage head whose
//!    classification branch is distilled toward the cached encoder features
//!    with an objectness-weighted L1 loss, classifies regions by cosine
//!    similarity against text embeddings (plus a learnable background
//!    vector), and regresses boxes from features concatenated with the
//!    category embedding. At inference the classifier vocabulary is extended
//!    with novel category names that were never trained on.
//!
//! See the `book/` guide for a narrative walk-through of each stage.

pub mod adaptation;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod evalstats;
pub mod geometry;
pub mod nn;
pub mod proposals;
pub mod rngutil;

pub use error::Error;

//! Few-shot segmentation matching over dense feature maps.
//!
//! Given a query feature map and a handful of annotated support feature
//! maps, the pipeline locates the support class in the query without any
//! learned weights:
//!
//! 1. [`prior`] pools the support into foreground/background prototypes and
//!    derives FG, BG and discriminative prior masks for the query, then
//!    encodes features and priors into memories.
//! 2. [`refine`] iteratively pulls foreground content from the FG memory
//!    into the Disc memory while support similarity suppresses background
//!    leakage.
//! 3. [`attention`] fuses query features with the refined memory through a
//!    stack of self- and cross-attention layers whose scores are calibrated
//!    against the support foreground.
//! 4. [`pipeline`] orchestrates an episode end to end, applies a
//!    deterministic prediction head and aggregates mIoU / FB-IoU metrics;
//!    [`datagen`] produces seeded synthetic episodes with known ground
//!    truth; [`io`] covers the feature-file format, configuration files and
//!    reports.
//!
//! Everything is deterministic: identical inputs, configuration and seeds
//! produce identical bytes, regardless of evaluation parallelism.

pub mod attention;
pub mod datagen;
mod error;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod prior;
pub mod refine;

pub use error::{Error, Result};
pub use numerics::{AttentionMatrix, FeatureMap, Grid, Prototype, SoftMask};
pub use pipeline::{Episode, MetricsReport, PipelineConfig, PredictionHead, SupportSample};
pub use prior::{Memory, PriorSet};

//! Text-prompted segmentation with a frozen promptable segmenter, learnable
//! text context, low-rank adaptation and iterative geometric refinement.

pub mod ablate;
pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod refine;
pub mod report;
pub mod repro;
pub mod sam;
pub mod text;
pub mod train;
pub mod types;

pub use config::{ExperimentConfig, RefinementPrompts, ValidatedConfig};
pub use error::{Error, Result};
pub use types::{BinaryMask, BoundingBox, MaskRecord, MaskSource, Point, PromptKind, PromptOrigin};

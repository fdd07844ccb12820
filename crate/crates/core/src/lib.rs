//! Data pipeline and evaluation toolkit for multi-platform UI understanding.
//!
//! Stages: [`ingest`] raw annotations, [`curate`] them into the unified label
//! space, plan high-resolution encoding with [`gridding`], render set-of-mark
//! prompts with [`som`], generate referring/grounding and advanced task data
//! with [`taskgen`], and score predictions with [`eval`].

pub mod cli;
pub mod curate;
pub mod eval;
pub mod fixtures;
pub mod gridding;
pub mod ingest;
pub mod llm;
pub mod schema;
pub mod som;
pub mod taskgen;

pub use schema::{BBox, DatasetManifest, Platform, ScreenRecord, TaskKind, TaskSample, UnifiedLabel, Widget};

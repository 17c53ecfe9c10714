//! Three-stage multimodal review of ultra-high-resolution power-grid
//! drawings: region proposal on a letterboxed overview, native-resolution
//! element extraction on crops, and confidence-aware rule diagnosis.

pub mod cli;
pub mod client;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod prompts;
pub mod pyramid;
pub mod report;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod synth;

pub use client::{BackendConfig, BackendKind, ChatRequest, ChatResponse, Client, StageTag};
pub use config::Config;
pub use error::{Error, Result};
pub use geometry::BBox;
pub use pyramid::{CropSpec, RasterImage};
pub use pipeline::{Pipeline, ReviewOutcome};

//! Refinement of promptable-segmenter outputs into entity-level maps.
//!
//! The pipeline runs three stages over a [`backend::Segmenter`]:
//! [`mmg`] stratifies and filters per-prompt mask triples, [`emr`] splits
//! overlaps and merges fragments into entities, and [`usr`] re-prompts
//! regions no entity covers. [`eval`] scores entity maps with
//! class-agnostic average precision.

pub mod backend;
pub mod bench;
pub mod config;
pub mod emr;
pub mod entity;
pub mod eval;
pub mod mask;
pub mod mmg;
pub mod pipeline;
pub mod raster;
pub mod superpixel;
pub mod usr;
pub mod viz;

pub use config::PipelineConfig;
pub use entity::EntityMap;
pub use mask::{BinaryMask, Level, ScoredMask};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Mask(#[from] mask::MaskError),
    #[error(transparent)]
    Superpixel(#[from] superpixel::SuperpixelError),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Synthetic attributed scenes with opposition descriptions, and the
//! real-data path: COCO filtering, MLLM prompt emission and response
//! parsing, manifests, corpus statistics and splits.

pub mod coco;
pub mod describe;
pub mod lexicon;
pub mod manifest;
pub mod mllm;
pub mod prompt;
pub mod raster;
pub mod scene;

use thiserror::Error;

pub use coco::{filter_single_annotation, CocoFilterResult, KeptImage};
pub use describe::{
    describe, serialize_descriptions, Attribute, DescriptionKey, Descriptions, OppositionAnnotation, Polarity,
};
pub use lexicon::{tokenize, NegationLexicon};
pub use manifest::{dataset_stats, generate_manifest, split, DatasetManifest, DatasetStats, ManifestEntry, SplitTag};
pub use mllm::{parse_mllm_response, MllmError};
pub use prompt::emit_prompt;
pub use raster::{decode_png, encode_png, rasterize};
pub use scene::{generate_scene, Category, Color, ObjectState, PixelBox, SceneConfig, SceneObject, SceneSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid negation lexicon: {0}")]
    Lexicon(String),
    #[error("invalid scene {0}")]
    InvalidScene(String),
    #[error("unsatisfiable scene constraints: {0}")]
    Unsatisfiable(String),
    #[error("cannot describe scene: {0}")]
    Describe(String),
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("invalid COCO data: {0}")]
    Coco(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("image codec: {0}")]
    Image(String),
    #[error("io: {0}")]
    Io(String),
    #[error("invalid split: {0}")]
    Split(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Converts a serde_json error into a byte-offset error against `text`.
pub(crate) fn json_error(text: &str, e: &serde_json::Error) -> DataError {
    let (line, column) = (e.line(), e.column());
    let offset = if line == 0 {
        0
    } else {
        let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
        (line_start + column.saturating_sub(1)).min(text.len())
    };
    DataError::Json {
        offset,
        message: e.to_string(),
    }
}

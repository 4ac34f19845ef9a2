//! Grounding evaluation: Presence/Absence classification of descriptions,
//! COCO-style mAP pooled per description, and the intra/inter protocols.

mod map;
mod report;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gobl::GoblError;
use crate::model::ModelError;
use crate::synthdata::{tokenize, DataError, NegationLexicon};

pub use map::{average_precision, coco_thresholds, compute_map, RECALL_POINTS};
pub use report::{emit_report, read_predictions, render_report, write_predictions, ReportFormat};
pub use run::{build_eval_set, evaluate, predict, DEFAULT_TOP_K};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for unknown description {description_id:?} on {image_id:?}")]
    UnknownDescription { image_id: String, description_id: String },
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
    #[error("protocol mismatch: {0}")]
    Protocol(String),
    #[error("invalid eval input: {0}")]
    Input(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] GoblError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Intra,
    Inter,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Intra => "intra",
            Protocol::Inter => "inter",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "intra" => Ok(Protocol::Intra),
            "inter" => Ok(Protocol::Inter),
            other => Err(EvalError::Protocol(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DescriptionPolarity {
    Presence,
    Absence,
}

/// Absence iff some lexicon word occurs in `text` as a whole word.
pub fn classify_description(text: &str, lexicon: &NegationLexicon) -> DescriptionPolarity {
    if lexicon.contains_negation(text) {
        DescriptionPolarity::Absence
    } else {
        DescriptionPolarity::Presence
    }
}

/// Identifier shared by every occurrence of a description: its lowercased
/// word tokens joined by single spaces.
pub fn description_id(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub description_id: String,
    pub text: String,
    pub polarity: DescriptionPolarity,
    /// Normalized `(cx, cy, w, h)` boxes; may be empty.
    pub gt: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub protocol: Protocol,
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn query_count(&self) -> usize {
        self.items.iter().map(|i| i.candidates.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub description_id: String,
    /// Normalized `(cx, cy, w, h)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl Prediction {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.confidence.is_finite() {
            return Err(EvalError::InvalidPrediction(format!(
                "{}: non-finite confidence",
                self.description_id
            )));
        }
        if self.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::InvalidPrediction(format!(
                "{}: box {:?} outside [0, 1]",
                self.description_id, self.bbox
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionAp {
    pub description_id: String,
    pub polarity: DescriptionPolarity,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// AP per IoU threshold, in threshold order.
    pub ap_per_threshold: Vec<f64>,
    /// Mean of `ap_per_threshold`; `None` when the description has no gt anywhere.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: f64,
    pub map_presence: f64,
    pub map_absence: f64,
    pub protocol: Protocol,
    pub iou_thresholds: Vec<f64>,
    /// Scored descriptions in each pool (those with at least one gt box).
    pub scored_full: usize,
    pub scored_presence: usize,
    pub scored_absence: usize,
    pub per_description: Vec<DescriptionAp>,
}

//! Training objectives: focal classification, L1 + GIoU localization,
//! Hungarian matching, and the opposition losses (PNC, TSO).

pub mod boxes;
mod gradcheck;
mod hungarian;
mod terms;
#[cfg(test)]
mod tests;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};

pub use boxes::{giou, iou};
pub use gradcheck::{gradient_suite, TermCheck, GRADCHECK_TERMS};
pub use hungarian::{hungarian, MatchResult};
pub use terms::{
    focal_loss, giou_rows, loc_loss, matching_cost, pnc_loss, pnc_loss_per_prompt, tso_loss, LocTerms, PncTerms,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid loss input: {0}")]
    Input(String),
    #[error("zero-norm {0}")]
    ZeroNorm(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub focal_gamma: f64,
    pub focal_balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
            alpha: 0.5,
            beta: 0.3,
            sigma: 5.0,
            focal_gamma: 2.0,
            focal_balance: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_loc_l1: f64,
    pub l_loc_giou: f64,
    pub l_pnc: f64,
    pub l_tso: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Loss components of one group, as tape nodes. Absent opposition terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub pnc: Option<Var>,
    pub tso: Option<Var>,
}

/// `w_cls·cls + w_l1·l1 + w_giou·giou + α·pnc + β·tso`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown), LossError> {
    let scalar = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let mut parts = vec![(terms.cls, w.w_cls), (terms.l1, w.w_l1), (terms.giou, w.w_giou)];
    if let Some(p) = terms.pnc {
        parts.push((p, w.alpha));
    }
    if let Some(t) = terms.tso {
        parts.push((t, w.beta));
    }
    let mut total = None;
    for (v, weight) in parts {
        let s = tape.reshape(v, &[])?;
        let s = tape.scale(s, weight);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.expect("at least three terms");
    let b = LossBreakdown {
        l_cls: scalar(tape, Some(terms.cls)),
        l_loc_l1: scalar(tape, Some(terms.l1)),
        l_loc_giou: scalar(tape, Some(terms.giou)),
        l_pnc: scalar(tape, terms.pnc),
        l_tso: scalar(tape, terms.tso),
        total: tape.value(total).item(),
        weights: w.clone(),
    };
    Ok((total, b))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub image_id: String,
    pub group_key: String,
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_pnc: f64,
    pub l_tso: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, image_id: &str, group_key: &str, b: &LossBreakdown) -> Self {
        Self {
            step,
            image_id: image_id.to_string(),
            group_key: group_key.to_string(),
            l_cls: b.l_cls,
            l_l1: b.l_loc_l1,
            l_giou: b.l_loc_giou,
            l_pnc: b.l_pnc,
            l_tso: b.l_tso,
            total: b.total,
        }
    }

    pub fn write_line<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")
    }
}

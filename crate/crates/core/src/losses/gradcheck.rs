//! Finite-difference sweep over every loss term on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::to_corners;
use super::{focal_loss, loc_loss, pnc_loss, total_loss, tso_loss, LossError, LossTerms, LossWeights};
use crate::diffcore::{grad_check, sigmoid, NdArray, Tape, Var};

pub const GRADCHECK_TERMS: [&str; 6] = ["focal", "l1", "giou", "pnc", "tso", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

const R: usize = 6;
const D: usize = 5;
/// Minimum distance from any kink (abs, max/min, relu) in box space.
const KINK_MARGIN: f64 = 1e-3;

struct Instance {
    x: NdArray,
    gt: Vec<[f64; 4]>,
    pairs: Vec<(usize, usize)>,
    matched: Vec<usize>,
}

fn boxes_of(x: &[f64]) -> Vec<[f64; 4]> {
    x.chunks(4)
        .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2]), sigmoid(c[3])])
        .collect()
}

fn clear_of_kinks(pred: [f64; 4], gt: [f64; 4]) -> bool {
    let (a, b) = (to_corners(pred), to_corners(gt));
    let mut gaps: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| p - g).collect();
    gaps.extend((0..4).map(|i| a[i] - b[i]));
    gaps.extend([a[2] - b[0], b[2] - a[0], a[3] - b[1], b[3] - a[1]]);
    gaps.iter().all(|g| g.abs() > KINK_MARGIN)
}

/// Layout of `x`: scores `[R]`, box logits `[R, 4]`, f_q `[R, D]`, f_true `[D]`, f_false `[D]`.
fn sample(rng: &mut ChaCha8Rng) -> Instance {
    let n = R + 4 * R + R * D + 2 * D;
    loop {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let gt: Vec<[f64; 4]> = (0..2)
            .map(|_| {
                [
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ]
            })
            .collect();
        let mut rows: Vec<usize> = (0..R).collect();
        for i in 0..2 {
            rows.swap(i, rng.gen_range(i..R));
        }
        let pairs = vec![(rows[0], 0), (rows[1], 1)];
        let boxes = boxes_of(&x[R..5 * R]);
        if pairs.iter().all(|&(r, g)| clear_of_kinks(boxes[r], gt[g])) {
            let mut matched = vec![rows[0], rows[1]];
            matched.sort_unstable();
            return Instance {
                x: NdArray::vector(x),
                gt,
                pairs,
                matched,
            };
        }
    }
}

struct Parts {
    scores: Var,
    boxes: Var,
    f_q: Var,
    f_true: Var,
    f_false: Var,
}

fn split(t: &mut Tape, x: Var) -> Result<Parts, LossError> {
    let scores = t.slice(x, 0, 0, R)?;
    let raw = t.slice(x, 0, R, 5 * R)?;
    let raw = t.reshape(raw, &[R, 4])?;
    let boxes = t.sigmoid(raw);
    let q0 = 5 * R;
    let f_q = t.slice(x, 0, q0, q0 + R * D)?;
    let f_q = t.reshape(f_q, &[R, D])?;
    let f_true = t.slice(x, 0, q0 + R * D, q0 + R * D + D)?;
    let f_false = t.slice(x, 0, q0 + R * D + D, q0 + R * D + 2 * D)?;
    Ok(Parts {
        scores,
        boxes,
        f_q,
        f_true,
        f_false,
    })
}

fn term(t: &mut Tape, x: Var, inst: &Instance, name: &str, w: &LossWeights) -> Result<Var, LossError> {
    let p = split(t, x)?;
    match name {
        "focal" => focal_loss(t, p.scores, &inst.matched, w.focal_gamma, w.focal_balance),
        "l1" => Ok(loc_loss(t, p.boxes, &inst.gt, &inst.pairs)?.l1),
        "giou" => Ok(loc_loss(t, p.boxes, &inst.gt, &inst.pairs)?.giou),
        "pnc" => Ok(pnc_loss(t, p.f_q, p.f_true, p.f_false, &inst.matched, w.sigma)?.loss),
        "tso" => tso_loss(t, &[(p.f_true, p.f_false)]),
        "total" => {
            let cls = focal_loss(t, p.scores, &inst.matched, w.focal_gamma, w.focal_balance)?;
            let loc = loc_loss(t, p.boxes, &inst.gt, &inst.pairs)?;
            let pnc = pnc_loss(t, p.f_q, p.f_true, p.f_false, &inst.matched, w.sigma)?;
            let tso = tso_loss(t, &[(p.f_true, p.f_false)])?;
            let terms = LossTerms {
                cls,
                l1: loc.l1,
                giou: loc.giou,
                pnc: Some(pnc.loss),
                tso: Some(tso),
            };
            Ok(total_loss(t, &terms, w)?.0)
        }
        other => Err(LossError::Input(format!("unknown loss term {other:?}"))),
    }
}

/// Worst relative gradient error per term over `instances` random instances.
pub fn gradient_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<TermCheck>, LossError> {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Instance> = (0..instances).map(|_| sample(&mut rng)).collect();
    GRADCHECK_TERMS
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for inst in &pool {
                let err = grad_check(|t: &mut Tape, x| term(t, x, inst, name, &w), &inst.x, h)?;
                worst = worst.max(err);
            }
            Ok(TermCheck {
                term: name.to_string(),
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

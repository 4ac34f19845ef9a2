use crate::diffcore::{sigmoid, NdArray, Tape, Var};
use crate::model::GroundingOutput;

use super::boxes::giou;
use super::{LossError, LossWeights};

/// `cost[r][g] = -sigmoid(S[r]) + w_l1·L1 + w_giou·(1 - GIoU)`.
pub fn matching_cost(output: &GroundingOutput, gt: &[[f64; 4]], weights: &LossWeights) -> Result<NdArray, LossError> {
    if gt.is_empty() {
        return Err(LossError::Input("matching needs at least one ground-truth box".into()));
    }
    let r = output.s_cls.len();
    let mut data = Vec::with_capacity(r * gt.len());
    for i in 0..r {
        let b = output.boxes.row(i);
        let b = [b[0], b[1], b[2], b[3]];
        let p = sigmoid(output.s_cls.data()[i]);
        for g in gt {
            let l1: f64 = b.iter().zip(g).map(|(x, y)| (x - y).abs()).sum();
            data.push(-p + weights.w_l1 * l1 + weights.w_giou * (1.0 - giou(b, *g)));
        }
    }
    Ok(NdArray::new(vec![r, gt.len()], data)?)
}

fn pow(tape: &mut Tape, x: Var, gamma: f64) -> Var {
    if gamma == 0.0 {
        let ones = NdArray::ones(tape.shape(x));
        tape.constant(ones)
    } else if gamma == 1.0 {
        x
    } else if gamma == 2.0 {
        tape.square(x)
    } else {
        let l = tape.log(x);
        let s = tape.scale(l, gamma);
        tape.exp(s)
    }
}

/// Sigmoid focal loss with target 1 on `matched` regions and 0 elsewhere,
/// normalized by `max(1, |matched|)`.
pub fn focal_loss(tape: &mut Tape, scores: Var, matched: &[usize], gamma: f64, balance: f64) -> Result<Var, LossError> {
    let r = tape.shape(scores).iter().product::<usize>();
    let mut target = vec![0.0; r];
    for &m in matched {
        *target
            .get_mut(m)
            .ok_or_else(|| LossError::Input(format!("matched region {m} out of range")))? = 1.0;
    }
    let pos_w: Vec<f64> = target.iter().map(|t| t * balance).collect();
    let neg_w: Vec<f64> = target.iter().map(|t| (1.0 - t) * (1.0 - balance)).collect();
    let shape = tape.shape(scores).to_vec();

    let p = tape.sigmoid(scores);
    let neg_scores = tape.scale(scores, -1.0);
    let q = tape.sigmoid(neg_scores);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let mod_pos = pow(tape, q, gamma);
    let mod_neg = pow(tape, p, gamma);
    let pos = tape.mul(mod_pos, log_p)?;
    let neg = tape.mul(mod_neg, log_q)?;
    let wp = tape.constant(NdArray::new(shape.clone(), pos_w)?);
    let wn = tape.constant(NdArray::new(shape, neg_w)?);
    let pos = tape.mul(pos, wp)?;
    let neg = tape.mul(neg, wn)?;
    let all = tape.add(pos, neg)?;
    let s = tape.sum(all, None)?;
    Ok(tape.scale(s, -1.0 / matched.len().max(1) as f64))
}

fn column(tape: &mut Tape, x: Var, c: usize) -> Result<Var, LossError> {
    Ok(tape.slice(x, 1, c, c + 1)?)
}

fn corners(tape: &mut Tape, b: Var) -> Result<[Var; 4], LossError> {
    let (cx, cy, w, h) = (
        column(tape, b, 0)?,
        column(tape, b, 1)?,
        column(tape, b, 2)?,
        column(tape, b, 3)?,
    );
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// Per-row GIoU of two `[M, 4]` box sets, as `[M, 1]`.
pub fn giou_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var, LossError> {
    let [ax0, ay0, ax1, ay1] = corners(tape, a)?;
    let [bx0, by0, bx1, by1] = corners(tape, b)?;
    let area = |tape: &mut Tape, x0, y0, x1, y1| -> Result<Var, LossError> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        let w = tape.relu(w);
        let h = tape.relu(h);
        Ok(tape.mul(w, h)?)
    };
    let ix0 = tape.maximum(ax0, bx0)?;
    let iy0 = tape.maximum(ay0, by0)?;
    let ix1 = tape.minimum(ax1, bx1)?;
    let iy1 = tape.minimum(ay1, by1)?;
    let inter = area(tape, ix0, iy0, ix1, iy1)?;
    let area_a = area(tape, ax0, ay0, ax1, ay1)?;
    let area_b = area(tape, bx0, by0, bx1, by1)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let cx0 = tape.minimum(ax0, bx0)?;
    let cy0 = tape.minimum(ay0, by0)?;
    let cx1 = tape.maximum(ax1, bx1)?;
    let cy1 = tape.maximum(ay1, by1)?;
    let enclosing = area(tape, cx0, cy0, cx1, cy1)?;
    if tape.value(enclosing).data().iter().any(|&v| v <= 0.0) || tape.value(union).data().iter().any(|&v| v <= 0.0) {
        return Err(LossError::Input("degenerate box in GIoU".into()));
    }
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    Ok(tape.sub(iou, penalty)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LocTerms {
    pub l1: Var,
    pub giou: Var,
    /// Set when there were no matches and both terms are zero.
    pub empty: bool,
}

/// Mean over matched pairs of the summed coordinate L1 distance and of `1 - GIoU`.
pub fn loc_loss(tape: &mut Tape, boxes: Var, gt: &[[f64; 4]], pairs: &[(usize, usize)]) -> Result<LocTerms, LossError> {
    if pairs.is_empty() {
        let z = tape.constant(NdArray::scalar(0.0));
        return Ok(LocTerms {
            l1: z,
            giou: z,
            empty: true,
        });
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut targets = Vec::with_capacity(pairs.len() * 4);
    for &(_, g) in pairs {
        targets.extend_from_slice(
            gt.get(g)
                .ok_or_else(|| LossError::Input(format!("gt index {g} out of range")))?,
        );
    }
    let m = pairs.len() as f64;
    let pred = tape.index_select(boxes, &rows)?;
    let tgt = tape.constant(NdArray::new(vec![pairs.len(), 4], targets)?);
    let diff = tape.sub(pred, tgt)?;
    let abs = tape.abs(diff);
    let l1 = tape.sum(abs, None)?;
    let l1 = tape.scale(l1, 1.0 / m);
    let g = giou_rows(tape, pred, tgt)?;
    let g = tape.sum(g, None)?;
    let g = tape.scale(g, -1.0 / m);
    let giou = tape.add_scalar(g, 1.0);
    Ok(LocTerms { l1, giou, empty: false })
}

fn check_nonzero(tape: &Tape, norms: Var, what: &str) -> Result<(), LossError> {
    if tape.value(norms).data().iter().any(|&n| n < 1e-12 || !n.is_finite()) {
        return Err(LossError::ZeroNorm(what.to_string()));
    }
    Ok(())
}

/// Row-wise cosine similarity of `[M, d]` rows against one `[d]` vector.
fn cosine_rows(tape: &mut Tape, rows: Var, v: Var) -> Result<Var, LossError> {
    let d = tape.shape(v)[0];
    let m = tape.shape(rows)[0];
    let rn = tape.l2_norm(rows);
    check_nonzero(tape, rn, "region feature")?;
    let vn = tape.l2_norm(v);
    check_nonzero(tape, vn, "text feature")?;
    let col = tape.reshape(v, &[d, 1])?;
    let dots = tape.matmul(rows, col)?;
    let dots = tape.reshape(dots, &[m])?;
    let c = tape.div(dots, rn)?;
    Ok(tape.div(c, vn)?)
}

#[derive(Clone, Copy, Debug)]
pub struct PncTerms {
    pub loss: Var,
    /// `[M]` normalized similarity toward the true prompt.
    pub s_bar: Option<Var>,
    pub empty: bool,
}

/// Two-way σ-tempered softmax over cosine similarities to the true and
/// false prompt; cross-entropy toward the true prompt, mean over `matched`.
pub fn pnc_loss(
    tape: &mut Tape,
    f_q: Var,
    f_true: Var,
    f_false: Var,
    matched: &[usize],
    sigma: f64,
) -> Result<PncTerms, LossError> {
    pnc_loss_per_prompt(tape, f_q, f_q, f_true, f_false, matched, sigma)
}

/// As [`pnc_loss`], but each prompt is compared against the region features
/// of its own fused pass.
pub fn pnc_loss_per_prompt(
    tape: &mut Tape,
    f_q: Var,
    f_q_false: Var,
    f_true: Var,
    f_false: Var,
    matched: &[usize],
    sigma: f64,
) -> Result<PncTerms, LossError> {
    if !(sigma > 0.0) {
        return Err(LossError::Input(format!("sigma must be positive, got {sigma}")));
    }
    if matched.is_empty() {
        let z = tape.constant(NdArray::scalar(0.0));
        return Ok(PncTerms {
            loss: z,
            s_bar: None,
            empty: true,
        });
    }
    let m = matched.len();
    let rows = tape.index_select(f_q, matched)?;
    let s_true = cosine_rows(tape, rows, f_true)?;
    let rows_false = tape.index_select(f_q_false, matched)?;
    let s_false = cosine_rows(tape, rows_false, f_false)?;
    let st = tape.reshape(s_true, &[m, 1])?;
    let sf = tape.reshape(s_false, &[m, 1])?;
    let both = tape.concat(&[st, sf], 1)?;
    let logits = tape.scale(both, sigma);
    let soft = tape.softmax(logits);
    let s_bar = tape.slice(soft, 1, 0, 1)?;
    let s_bar = tape.reshape(s_bar, &[m])?;
    let log = tape.log(s_bar);
    let loss = tape.mean(log, None)?;
    let loss = tape.scale(loss, -1.0);
    Ok(PncTerms {
        loss,
        s_bar: Some(s_bar),
        empty: false,
    })
}

/// Mean over pairs of `2 - ‖u_p - u_n‖²` on unit-normalized features.
pub fn tso_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var, LossError> {
    if pairs.is_empty() {
        return Err(LossError::Input("TSO needs at least one pair".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(p, n) in pairs {
        let mut unit = |v: Var| -> Result<Var, LossError> {
            let norm = tape.l2_norm(v);
            check_nonzero(tape, norm, "TSO feature")?;
            Ok(tape.div(v, norm)?)
        };
        let up = unit(p)?;
        let un = unit(n)?;
        let diff = tape.sub(up, un)?;
        let sq = tape.square(diff);
        let dist = tape.sum(sq, None)?;
        let neg = tape.scale(dist, -1.0);
        let term = tape.add_scalar(neg, 2.0);
        terms.push(tape.reshape(term, &[1])?);
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.mean(all, None)?)
}

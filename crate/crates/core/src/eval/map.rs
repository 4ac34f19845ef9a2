use std::collections::{BTreeMap, HashMap};

use super::{DescriptionAp, DescriptionPolarity, EvalError, EvalReport, EvalSet, Prediction};
use crate::losses::iou;

pub const RECALL_POINTS: usize = 101;

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// 101-point interpolated AP of a ranked list of TP/FP flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at any deeper rank.
    for k in (1..precision.len()).rev() {
        precision[k - 1] = precision[k - 1].max(precision[k]);
    }
    let mut total = 0.0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            total += precision[k];
        }
    }
    total / RECALL_POINTS as f64
}

/// Greedy confidence-ordered matching: each prediction takes the unmatched gt
/// of its image with the highest IoU, if that IoU reaches `threshold`.
fn match_ranked(ranked: &[&Prediction], gts: &HashMap<&str, &[[f64; 4]]>, threshold: f64) -> Vec<bool> {
    let mut used: HashMap<&str, Vec<bool>> = HashMap::new();
    ranked
        .iter()
        .map(|p| {
            let boxes = gts.get(p.image_id.as_str()).copied().unwrap_or(&[]);
            let taken = used
                .entry(p.image_id.as_str())
                .or_insert_with(|| vec![false; boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(p.bbox, *g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn pool_mean(aps: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = aps.fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Per-description AP pooled across images, averaged over thresholds, then
/// averaged over descriptions within each pool.
pub fn compute_map(predictions: &[Prediction], set: &EvalSet, thresholds: &[f64]) -> Result<EvalReport, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::Input("no IoU thresholds".into()));
    }
    struct Desc<'a> {
        polarity: DescriptionPolarity,
        gts: HashMap<&'a str, &'a [[f64; 4]]>,
        preds: Vec<(usize, &'a Prediction)>,
    }
    let mut descs: BTreeMap<&str, Desc> = BTreeMap::new();
    for item in &set.items {
        for c in &item.candidates {
            let d = descs.entry(c.description_id.as_str()).or_insert_with(|| Desc {
                polarity: c.polarity,
                gts: HashMap::new(),
                preds: Vec::new(),
            });
            if d.polarity != c.polarity {
                return Err(EvalError::Input(format!("{}: inconsistent polarity", c.description_id)));
            }
            if d.gts.insert(item.image_id.as_str(), c.gt.as_slice()).is_some() {
                return Err(EvalError::Input(format!(
                    "{} listed twice for {}",
                    c.description_id, item.image_id
                )));
            }
        }
    }
    for (idx, p) in predictions.iter().enumerate() {
        p.validate()?;
        let unknown = || EvalError::UnknownDescription {
            image_id: p.image_id.clone(),
            description_id: p.description_id.clone(),
        };
        let d = descs.get_mut(p.description_id.as_str()).ok_or_else(unknown)?;
        if !d.gts.contains_key(p.image_id.as_str()) {
            return Err(unknown());
        }
        d.preds.push((idx, p));
    }

    let mut per_description = Vec::with_capacity(descs.len());
    for (id, mut d) in descs {
        d.preds.sort_by(|(ia, a), (ib, b)| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.image_id.cmp(&b.image_id))
                .then(ia.cmp(ib))
        });
        let ranked: Vec<&Prediction> = d.preds.iter().map(|(_, p)| *p).collect();
        let num_gt: usize = d.gts.values().map(|g| g.len()).sum();
        let ap_per_threshold: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(&match_ranked(&ranked, &d.gts, t), num_gt))
            .collect();
        let ap = (num_gt > 0).then(|| ap_per_threshold.iter().sum::<f64>() / thresholds.len() as f64);
        per_description.push(DescriptionAp {
            description_id: id.to_string(),
            polarity: d.polarity,
            num_gt,
            num_predictions: ranked.len(),
            ap_per_threshold,
            ap,
        });
    }

    let pool = |want: Option<DescriptionPolarity>| {
        pool_mean(
            per_description
                .iter()
                .filter(|d| want.is_none_or(|w| d.polarity == w))
                .filter_map(|d| d.ap),
        )
    };
    let (map_full, scored_full) = pool(None);
    let (map_presence, scored_presence) = pool(Some(DescriptionPolarity::Presence));
    let (map_absence, scored_absence) = pool(Some(DescriptionPolarity::Absence));
    Ok(EvalReport {
        map_full,
        map_presence,
        map_absence,
        protocol: set.protocol,
        iou_thresholds: thresholds.to_vec(),
        scored_full,
        scored_presence,
        scored_absence,
        per_description,
    })
}

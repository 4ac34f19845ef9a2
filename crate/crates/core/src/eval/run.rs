use std::collections::{BTreeMap, HashMap, HashSet};

use super::{
    classify_description, coco_thresholds, compute_map, description_id, Candidate, EvalError, EvalItem, EvalReport,
    EvalSet, Prediction, Protocol,
};
use crate::diffcore::{sigmoid, NdArray, Tape};
use crate::gobl::Checkpoint;
use crate::losses::boxes::normalize_pixel_box;
use crate::model::{encode_image, forward_with_regions, ModelConfig};
use crate::synthdata::{DatasetManifest, NegationLexicon};

pub const DEFAULT_TOP_K: usize = 5;

/// Queries for `manifest` under `protocol`. True descriptions (P+, N+) have
/// the annotated box as gt on their source image; everything else is empty.
pub fn build_eval_set(
    manifest: &DatasetManifest,
    protocol: Protocol,
    lexicon: &NegationLexicon,
    image_size: f64,
) -> Result<EvalSet, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::Protocol("empty manifest".into()));
    }
    let mut seen = HashSet::new();
    // Per image: description id -> (text, gt boxes).
    type Owned = BTreeMap<String, (String, Vec<[f64; 4]>)>;
    let mut own: Vec<(String, Owned)> = Vec::new();
    for e in &manifest.entries {
        if !seen.insert(e.image_id.as_str()) {
            return Err(EvalError::Protocol(format!("duplicate image id {}", e.image_id)));
        }
        let gt = normalize_pixel_box(e.bbox, image_size, image_size);
        let mut descs: BTreeMap<String, (String, Vec<[f64; 4]>, bool)> = BTreeMap::new();
        for (key, text) in &e.descriptions {
            let id = description_id(text);
            if id.is_empty() {
                return Err(EvalError::Input(format!("{}: empty description {key}", e.image_id)));
            }
            let truth = key.polarity.is_true();
            match descs.get(&id) {
                Some((_, _, t)) if *t != truth => {
                    return Err(EvalError::Protocol(format!(
                        "{}: {id:?} is both true and false",
                        e.image_id
                    )))
                }
                Some(_) => {}
                None => {
                    descs.insert(id, (text.clone(), if truth { vec![gt] } else { Vec::new() }, truth));
                }
            }
        }
        own.push((
            e.image_id.clone(),
            descs.into_iter().map(|(id, (text, gt, _))| (id, (text, gt))).collect(),
        ));
    }

    let candidate = |id: &str, text: &str, gt: Vec<[f64; 4]>| Candidate {
        description_id: id.to_string(),
        text: text.to_string(),
        polarity: classify_description(text, lexicon),
        gt,
    };
    let mut items: Vec<EvalItem> = match protocol {
        Protocol::Intra => own
            .iter()
            .map(|(image_id, descs)| EvalItem {
                image_id: image_id.clone(),
                candidates: descs
                    .iter()
                    .map(|(id, (text, gt))| candidate(id, text, gt.clone()))
                    .collect(),
            })
            .collect(),
        Protocol::Inter => {
            let mut texts: BTreeMap<&str, &str> = BTreeMap::new();
            for (_, descs) in &own {
                for (id, (text, _)) in descs {
                    texts.entry(id.as_str()).or_insert(text.as_str());
                }
            }
            own.iter()
                .map(|(image_id, descs)| EvalItem {
                    image_id: image_id.clone(),
                    candidates: texts
                        .iter()
                        .map(|(id, text)| {
                            let gt = descs.get(*id).map(|(_, g)| g.clone()).unwrap_or_default();
                            candidate(id, text, gt)
                        })
                        .collect(),
                })
                .collect()
        }
    };
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(EvalSet { protocol, items })
}

/// Top-`k` regions per query, with `sigmoid(S_cls)` as confidence, in
/// `(image_id, description_id)` order.
pub fn predict(
    ckpt: &Checkpoint,
    set: &EvalSet,
    images: &HashMap<String, NdArray>,
    k: usize,
) -> Result<Vec<Prediction>, EvalError> {
    let model: &ModelConfig = &ckpt.meta.model;
    let reg = &ckpt.registry;
    let mut out = Vec::with_capacity(set.query_count() * k);
    for item in &set.items {
        let image = images
            .get(&item.image_id)
            .ok_or_else(|| EvalError::Input(format!("no image for {}", item.image_id)))?;
        let mut t = Tape::new();
        let o = encode_image(reg, model, &mut t, image)?;
        let regions = t.value(o).clone();
        for c in &item.candidates {
            let tokens = model.tokenize(&c.text);
            if tokens.is_empty() || tokens.len() > model.max_seq_len {
                return Err(EvalError::Input(format!("{:?} has {} tokens", c.text, tokens.len())));
            }
            let mut tape = Tape::new();
            let o = tape.constant(regions.clone());
            let vars = forward_with_regions(reg, model, &mut tape, o, &tokens)?;
            let res = vars.output(&tape);
            let scores = res.s_cls.data();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for &r in order.iter().take(k) {
                let row = res.boxes.row(r);
                out.push(Prediction {
                    image_id: item.image_id.clone(),
                    description_id: c.description_id.clone(),
                    bbox: [row[0], row[1], row[2], row[3]],
                    confidence: sigmoid(scores[r]),
                });
            }
        }
    }
    Ok(out)
}

/// Runs the checkpoint on `manifest` under `protocol` and scores it.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    images: &[NdArray],
    protocol: Protocol,
    lexicon: &NegationLexicon,
    k: usize,
) -> Result<(EvalReport, Vec<Prediction>), EvalError> {
    if images.len() != manifest.len() {
        return Err(EvalError::Input(format!(
            "{} entries but {} images",
            manifest.len(),
            images.len()
        )));
    }
    let set = build_eval_set(manifest, protocol, lexicon, ckpt.meta.model.image_size as f64)?;
    let by_id: HashMap<String, NdArray> = manifest
        .entries
        .iter()
        .zip(images)
        .map(|(e, img)| (e.image_id.clone(), img.clone()))
        .collect();
    let preds = predict(ckpt, &set, &by_id, k)?;
    let report = compute_map(&preds, &set, &coco_thresholds())?;
    Ok((report, preds))
}

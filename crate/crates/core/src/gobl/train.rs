use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::config::{Phase, PncFeatures, TrainConfig};
use super::groups::{build_groups, OppositionGroup, TsoRole};
use super::GoblError;
use crate::diffcore::{ModuleTag, NdArray, OptimizerState, ParamRegistry, Tape, Var};
use crate::losses::boxes::normalize_pixel_box;
use crate::losses::{
    focal_loss, hungarian, loc_loss, matching_cost, pnc_loss_per_prompt, total_loss, tso_loss, LogRecord,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::model::{encode_image, encode_text, forward_with_regions, fuse, GroundingVars, ModelConfig};
use crate::synthdata::{Attribute, DatasetManifest, NegationLexicon, Polarity};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: u64,
    pub image_encodings: usize,
    pub groups: usize,
    /// Mean total loss over the final epoch.
    pub final_epoch_loss: f64,
}

pub(crate) fn tokens_for(model: &ModelConfig, phrase: &str) -> Result<Vec<usize>, GoblError> {
    let t = model.tokenize(phrase);
    if t.is_empty() || t.len() > model.max_seq_len {
        return Err(GoblError::Data(format!(
            "prompt {phrase:?} has {} tokens (allowed 1..={})",
            t.len(),
            model.max_seq_len
        )));
    }
    Ok(t)
}

pub(crate) fn gt_box(model: &ModelConfig, bbox: [f64; 4]) -> [f64; 4] {
    let s = model.image_size as f64;
    normalize_pixel_box(bbox, s, s)
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn meta(phase: Phase, step: u64, cfg: &TrainConfig, model: &ModelConfig, rng: &ChaCha8Rng) -> CheckpointMeta {
    CheckpointMeta {
        phase,
        step,
        config_hash: cfg.hash(),
        rng_state: rng_state(rng),
        model: model.clone(),
        train: cfg.clone(),
    }
}

fn check_inputs(manifest: &DatasetManifest, images: &[NdArray]) -> Result<(), GoblError> {
    if manifest.len() != images.len() {
        return Err(GoblError::Data(format!(
            "{} manifest entries but {} images",
            manifest.len(),
            images.len()
        )));
    }
    Ok(())
}

/// Focal + L1 + GIoU terms of one prompt against its single ground truth.
fn detection_terms(
    tape: &mut Tape,
    vars: &GroundingVars,
    gt: [f64; 4],
    w: &LossWeights,
) -> Result<(Var, Var, Var, Vec<usize>), GoblError> {
    let out = vars.output(tape);
    let cost = matching_cost(&out, &[gt], w)?;
    let m = hungarian(&cost);
    let rows = m.rows();
    let cls = focal_loss(tape, vars.scores, &rows, w.focal_gamma, w.focal_balance)?;
    let loc = loc_loss(tape, vars.boxes, &[gt], &m.pairs)?;
    Ok((cls, loc.l1, loc.giou, rows))
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: LogRecord) -> Result<(), GoblError> {
    if let Some(out) = log.as_deref_mut() {
        rec.write_line(out).map_err(|e| GoblError::Io(e.to_string()))?;
    }
    Ok(())
}

fn finite_or_abort(b: &LossBreakdown, step: u64) -> Result<(), GoblError> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(GoblError::Divergence { step })
    }
}

/// Trains the full model on P+ prompts with the detection objective only.
/// One optimizer step per image; its loss is the mean over the image's P+ prompts.
pub fn pretrain_positive(
    mut registry: ParamRegistry,
    model: &ModelConfig,
    manifest: &DatasetManifest,
    images: &[NdArray],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainStats), GoblError> {
    if cfg.phase != Phase::Pretrain {
        return Err(GoblError::Config("pretrain_positive needs phase = pretrain".into()));
    }
    check_inputs(manifest, images)?;
    registry.freeze_except(&cfg.freeze_tags)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &registry);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = TrainStats::default();
    let weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..cfg.weights.clone()
    };

    let prompts: Vec<Vec<(Attribute, Vec<usize>)>> = manifest
        .entries
        .iter()
        .map(|e| {
            let a = e.annotation();
            Attribute::ALL
                .iter()
                .filter_map(|&attr| a.get(attr, Polarity::PPos).map(|p| (attr, p.to_string())))
                .map(|(attr, p)| Ok((attr, tokens_for(model, &p)?)))
                .collect::<Result<Vec<_>, GoblError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut order: Vec<usize> = (0..manifest.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for &i in &order {
            if prompts[i].is_empty() {
                continue;
            }
            let entry = &manifest.entries[i];
            let gt = gt_box(model, entry.bbox);
            let mut tape = Tape::new();
            let o = encode_image(&registry, model, &mut tape, &images[i])?;
            stats.image_encodings += 1;
            let mut totals = Vec::with_capacity(3);
            for (attr, toks) in &prompts[i] {
                let vars = forward_with_regions(&registry, model, &mut tape, o, toks)?;
                let (cls, l1, giou, _) = detection_terms(&mut tape, &vars, gt, &weights)?;
                let terms = LossTerms {
                    cls,
                    l1,
                    giou,
                    pnc: None,
                    tso: None,
                };
                let (total, b) = total_loss(&mut tape, &terms, &weights)?;
                finite_or_abort(&b, stats.steps)?;
                write_log(
                    &mut log,
                    LogRecord::new(stats.steps, &entry.image_id, &format!("{}:P+", attr.as_str()), &b),
                )?;
                totals.push(total);
            }
            let n = totals.len() as f64;
            let stacked: Vec<Var> = totals
                .iter()
                .map(|&t| tape.reshape(t, &[1]))
                .collect::<Result<_, _>>()?;
            let all = tape.concat(&stacked, 0)?;
            let sum = tape.sum(all, None)?;
            let loss = tape.scale(sum, 1.0 / n);
            epoch_loss += tape.value(loss).item();
            epoch_n += 1;
            tape.backward(loss)?;
            registry.accumulate_grads(&tape);
            opt.step(&mut registry)?;
            stats.steps += 1;
        }
        stats.final_epoch_loss = epoch_loss / epoch_n.max(1) as f64;
    }
    let meta = meta(Phase::Pretrain, stats.steps, cfg, model, &rng);
    Ok((Checkpoint { registry, meta }, stats))
}

/// Loss of one opposition group. `regions` is the image's `O` on this tape.
pub(crate) fn group_loss(
    registry: &ParamRegistry,
    model: &ModelConfig,
    tape: &mut Tape,
    regions: Var,
    group: &OppositionGroup,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown), GoblError> {
    let w = &cfg.weights;
    let true_toks = tokens_for(model, &group.true_prompt.phrase)?;
    let vars = forward_with_regions(registry, model, tape, regions, &true_toks)?;
    let gt = gt_box(model, group.gt_box);
    let (cls, l1, giou, matched) = detection_terms(tape, &vars, gt, w)?;
    let (mut pnc, mut tso) = (None, None);
    if w.alpha != 0.0 || w.beta != 0.0 {
        let false_toks = tokens_for(model, &group.false_prompt.phrase)?;
        let text = encode_text(registry, model, tape, &false_toks)?;
        let false_fused = fuse(registry, model, tape, regions, &text)?;
        if w.alpha != 0.0 {
            let false_q = match cfg.pnc_features {
                PncFeatures::PerPrompt => false_fused.f_q,
                PncFeatures::Shared => vars.fused.f_q,
            };
            let p = pnc_loss_per_prompt(
                tape,
                vars.fused.f_q,
                false_q,
                vars.fused.f_l,
                false_fused.f_l,
                &matched,
                w.sigma,
            )?;
            pnc = Some(p.loss);
        }
        if w.beta != 0.0 {
            let pair = match group.tso_pair_role {
                TsoRole::TruePrompt => (vars.fused.f_l, false_fused.f_l),
                TsoRole::FalsePrompt => (false_fused.f_l, vars.fused.f_l),
            };
            tso = Some(tso_loss(tape, &[pair])?);
        }
    }
    let terms = LossTerms {
        cls,
        l1,
        giou,
        pnc,
        tso,
    };
    Ok(total_loss(tape, &terms, w)?)
}

/// Fine-tunes the tagged modules on opposition groups with the full objective,
/// one optimizer step per `batch_size` groups.
///
/// `O` is computed once per image. When the image encoder is trainable, the
/// gradient with respect to `O` is summed over the image's groups and pushed
/// through the encoder after its last group, so those encoder gradients land
/// in the next optimizer step.
pub fn finetune_gobl(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    images: &[NdArray],
    cfg: &TrainConfig,
    lexicon: &NegationLexicon,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainStats), GoblError> {
    if cfg.phase != Phase::Gobl {
        return Err(GoblError::Config("finetune_gobl needs phase = gobl".into()));
    }
    check_inputs(manifest, images)?;
    let model = &pretrained.meta.model;
    let mut registry = pretrained.registry.clone();
    registry.freeze_except(&cfg.freeze_tags)?;
    let before = registry.clone();
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &registry);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = TrainStats::default();
    let encoder_trainable = cfg.freeze_tags.contains(&ModuleTag::ImageEncoder);
    let inv_batch = 1.0 / cfg.batch_size as f64;

    let groups: Vec<Vec<OppositionGroup>> = manifest
        .entries
        .iter()
        .map(|e| build_groups(&e.annotation(), lexicon))
        .collect::<Result<_, _>>()?;

    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut pending = 0usize;
    let mut log_step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for &i in &order {
            let entry = &manifest.entries[i];
            let mut enc_tape = Tape::new();
            let o = encode_image(&registry, model, &mut enc_tape, &images[i])?;
            stats.image_encodings += 1;
            let o_value = enc_tape.value(o).clone();
            let mut grad_o = NdArray::zeros(o_value.shape());
            for group in &groups[i] {
                let mut tape = Tape::new();
                let regions = tape.leaf(o_value.clone(), encoder_trainable);
                let (total, b) = group_loss(&registry, model, &mut tape, regions, group, cfg)?;
                finite_or_abort(&b, log_step)?;
                write_log(&mut log, LogRecord::new(log_step, &entry.image_id, &group.key(), &b))?;
                log_step += 1;
                epoch_loss += b.total;
                epoch_n += 1;
                stats.groups += 1;
                let scaled = tape.scale(total, inv_batch);
                tape.backward(scaled)?;
                registry.accumulate_grads(&tape);
                if let Some(g) = tape.grad(regions) {
                    grad_o.add_assign(g);
                }
                pending += 1;
                if pending == cfg.batch_size {
                    opt.step(&mut registry)?;
                    stats.steps += 1;
                    pending = 0;
                }
            }
            if encoder_trainable {
                let g = enc_tape.constant(grad_o);
                let prod = enc_tape.mul(o, g)?;
                let surrogate = enc_tape.sum(prod, None)?;
                enc_tape.backward(surrogate)?;
                registry.accumulate_grads(&enc_tape);
            }
        }
        stats.final_epoch_loss = epoch_loss / epoch_n.max(1) as f64;
    }
    if pending > 0 || (encoder_trainable && stats.groups > 0) {
        opt.step(&mut registry)?;
        stats.steps += 1;
    }
    for tag in ModuleTag::ALL {
        if !cfg.freeze_tags.contains(&tag) && !registry.values_bitwise_eq(&before, Some(tag)) {
            return Err(GoblError::FrozenViolation(tag.to_string()));
        }
    }
    let meta = meta(Phase::Gobl, stats.steps, cfg, model, &rng);
    Ok((Checkpoint { registry, meta }, stats))
}

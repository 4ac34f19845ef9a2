use std::collections::BTreeSet;

use super::*;
use crate::diffcore::{ModuleTag, NdArray};
use crate::model::{init_registry, ModelConfig};
use crate::synthdata::{generate_manifest, DatasetManifest, NegationLexicon, SceneConfig};

fn data(n: usize) -> (DatasetManifest, Vec<NdArray>) {
    let m = generate_manifest(11, n, &SceneConfig::default()).unwrap();
    let imgs = m.load_images(None).unwrap();
    (m, imgs)
}

fn pretrained(m: &DatasetManifest, imgs: &[NdArray], epochs: usize) -> Checkpoint {
    let model = ModelConfig::default();
    let reg = init_registry(&model, 3).unwrap();
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::pretrain()
    };
    pretrain_positive(reg, &model, m, imgs, &cfg, None).unwrap().0
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let (m, imgs) = data(2);
    let model = ModelConfig::default();
    let init = init_registry(&model, 3).unwrap();
    let ck = pretrained(&m, &imgs, 0);
    assert!(ck.registry.values_bitwise_eq(&init, None));
    assert_eq!(ck.meta.step, 0);
}

#[test]
fn pretrain_steps_once_per_image_and_logs_each_prompt() {
    let (m, imgs) = data(3);
    let model = ModelConfig::default();
    let reg = init_registry(&model, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::pretrain()
    };
    let mut log = Vec::new();
    let (ck, stats) = pretrain_positive(reg, &model, &m, &imgs, &cfg, Some(&mut log)).unwrap();
    assert_eq!(stats.steps, 6);
    assert_eq!(ck.meta.step, 6);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 18);
    assert!(stats.final_epoch_loss.is_finite());
}

#[test]
fn finetune_is_deterministic_and_respects_freezing() {
    let (m, imgs) = data(2);
    let lex = NegationLexicon::default();
    let base = pretrained(&m, &imgs, 1);
    let cfg = TrainConfig::gobl();
    let (a, sa) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, None).unwrap();
    let (b, _) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, None).unwrap();
    assert!(a.registry.values_bitwise_eq(&b.registry, None));
    assert_eq!(sa.groups, 12);
    assert_eq!(sa.steps, 12);
    // Frozen encoder: one encoding per image per epoch.
    assert_eq!(sa.image_encodings, 2);
    for tag in [ModuleTag::ImageEncoder, ModuleTag::TextEncoder, ModuleTag::Decoder] {
        assert!(a.registry.values_bitwise_eq(&base.registry, Some(tag)), "{tag} moved");
    }
    assert!(!a.registry.values_bitwise_eq(&base.registry, Some(ModuleTag::Fusion)));
}

#[test]
fn batch_size_groups_steps() {
    let (m, imgs) = data(2);
    let lex = NegationLexicon::default();
    let base = pretrained(&m, &imgs, 0);
    let cfg = TrainConfig {
        batch_size: 5,
        ..TrainConfig::gobl()
    };
    let (_, s) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, None).unwrap();
    // 12 groups: two full batches and one partial flush.
    assert_eq!(s.steps, 3);
}

#[test]
fn data_only_ablation_and_trainable_encoder() {
    let (m, imgs) = data(1);
    let lex = NegationLexicon::default();
    let base = pretrained(&m, &imgs, 0);
    let mut cfg = TrainConfig::gobl();
    cfg.weights.alpha = 0.0;
    cfg.weights.beta = 0.0;
    let (a, _) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, None).unwrap();
    let mut log = Vec::new();
    let (_, _) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 6);
    cfg.freeze_tags = BTreeSet::from([ModuleTag::Fusion, ModuleTag::ImageEncoder]);
    let (c, s) = finetune_gobl(&base, &m, &imgs, &cfg, &lex, None).unwrap();
    assert_eq!(s.image_encodings, 1);
    assert!(!c.registry.values_bitwise_eq(&a.registry, Some(ModuleTag::ImageEncoder)));
}

#[test]
fn phase_mismatch_is_rejected() {
    let (m, imgs) = data(1);
    let lex = NegationLexicon::default();
    let base = pretrained(&m, &imgs, 0);
    assert!(matches!(
        finetune_gobl(&base, &m, &imgs, &TrainConfig::pretrain(), &lex, None),
        Err(GoblError::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let (m, imgs) = data(1);
    let ck = pretrained(&m, &imgs, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() / 2);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn split_encoder_gradient_matches_end_to_end() {
    use crate::diffcore::Tape;
    use crate::model::encode_image;
    let (m, imgs) = data(1);
    let model = ModelConfig::default();
    let mut reg = init_registry(&model, 8).unwrap();
    reg.freeze_except(&ModuleTag::ALL.into_iter().collect()).unwrap();
    let cfg = TrainConfig::gobl();
    let group = build_groups(&m.entries[0].annotation(), &NegationLexicon::default())
        .unwrap()
        .remove(0);

    let mut full = reg.clone();
    let mut t = Tape::new();
    let o = encode_image(&full, &model, &mut t, &imgs[0]).unwrap();
    let (loss, _) = group_loss(&full, &model, &mut t, o, &group, &cfg).unwrap();
    t.backward(loss).unwrap();
    full.accumulate_grads(&t);

    let mut split = reg.clone();
    let mut enc = Tape::new();
    let o = encode_image(&split, &model, &mut enc, &imgs[0]).unwrap();
    let mut t = Tape::new();
    let leaf = t.leaf(enc.value(o).clone(), true);
    let (loss, _) = group_loss(&split, &model, &mut t, leaf, &group, &cfg).unwrap();
    t.backward(loss).unwrap();
    split.accumulate_grads(&t);
    let g = enc.constant(t.grad(leaf).unwrap().clone());
    let prod = enc.mul(o, g).unwrap();
    let s = enc.sum(prod, None).unwrap();
    enc.backward(s).unwrap();
    split.accumulate_grads(&enc);

    for ((name, a), (_, b)) in full.iter().zip(split.iter()) {
        let scale = a.grad.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        assert!(a.grad.max_abs_diff(&b.grad) / scale < 1e-9, "{name}");
    }
}

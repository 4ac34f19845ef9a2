use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check, NdArray};
use crate::model::GroundingOutput;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn bce(s: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-s).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn focal_reduces_to_half_bce() {
    let scores = [0.3, -1.2, 2.0, 0.0];
    let mut t = Tape::new();
    let s = t.constant(NdArray::vector(scores.to_vec()));
    let l = focal_loss(&mut t, s, &[2], 0.0, 0.5).unwrap();
    let expected: f64 = scores
        .iter()
        .enumerate()
        .map(|(i, &x)| 0.5 * bce(x, (i == 2) as u8 as f64))
        .sum();
    assert!((scalar_of(&t, l) - expected).abs() < 1e-12);
}

#[test]
fn focal_saturation_and_monotonicity() {
    let mut t = Tape::new();
    let s = t.constant(NdArray::vector(vec![20.0]));
    let l = focal_loss(&mut t, s, &[0], 2.0, 0.25).unwrap();
    assert!(scalar_of(&t, l) < 1e-6);
    let mut prev = f64::INFINITY;
    for k in -20..20 {
        let mut t = Tape::new();
        let s = t.constant(NdArray::vector(vec![k as f64 * 0.5, 1.0]));
        let v = focal_loss(&mut t, s, &[0], 2.0, 0.25).unwrap();
        let l = scalar_of(&t, v);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn loc_basic_values() {
    let gt = [[0.5, 0.5, 0.2, 0.3]];
    let mut t = Tape::new();
    let b = t.constant(NdArray::from_rows(&[vec![0.5, 0.5, 0.2, 0.3], vec![0.6, 0.5, 0.2, 0.3]]).unwrap());
    let perfect = loc_loss(&mut t, b, &gt, &[(0, 0)]).unwrap();
    assert!(scalar_of(&t, perfect.l1).abs() < 1e-15 && scalar_of(&t, perfect.giou).abs() < 1e-15);
    let off = loc_loss(&mut t, b, &gt, &[(1, 0)]).unwrap();
    assert!((scalar_of(&t, off.l1) - 0.1).abs() < 1e-12);
    let expected = 1.0 - giou([0.6, 0.5, 0.2, 0.3], gt[0]);
    assert!((scalar_of(&t, off.giou) - expected).abs() < 1e-12);
    let none = loc_loss(&mut t, b, &gt, &[]).unwrap();
    assert!(none.empty && scalar_of(&t, none.l1) == 0.0);
}

fn pnc_value(fq: &[Vec<f64>], ft: &[f64], ff: &[f64], sigma: f64) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let q = t.constant(NdArray::from_rows(fq).unwrap());
    let a = t.constant(NdArray::vector(ft.to_vec()));
    let b = t.constant(NdArray::vector(ff.to_vec()));
    let matched: Vec<usize> = (0..fq.len()).collect();
    let r = pnc_loss(&mut t, q, a, b, &matched, sigma).unwrap();
    (scalar_of(&t, r.loss), t.value(r.s_bar.unwrap()).data().to_vec())
}

#[test]
fn pnc_closed_forms() {
    let (l, sb) = pnc_value(&[vec![1.0, 0.0]], &[0.0, 1.0], &[0.0, -1.0], 5.0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((sb[0] - 0.5).abs() < 1e-15);
    let (l, _) = pnc_value(&[vec![2.0, 0.0]], &[1.0, 0.0], &[-3.0, 0.0], 5.0);
    assert!((l - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
    assert!((l - 4.54e-5).abs() < 1e-8);
    let (_, sb) = pnc_value(&[vec![1.0, 0.3]], &[1.0, 0.0], &[-1.0, 0.2], 1e-9);
    assert!((sb[0] - 0.5).abs() < 1e-8);
}

#[test]
fn pnc_invariances() {
    let mut g = rng(3);
    let fq: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| g.gen_range(-1.0..1.0)).collect())
        .collect();
    let ft: Vec<f64> = (0..5).map(|_| g.gen_range(-1.0..1.0)).collect();
    let ff: Vec<f64> = (0..5).map(|_| g.gen_range(-1.0..1.0)).collect();
    let (l, sb) = pnc_value(&fq, &ft, &ff, 5.0);
    let scaled: Vec<Vec<f64>> = fq
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|v| v * (i as f64 + 0.5)).collect())
        .collect();
    let ft2: Vec<f64> = ft.iter().map(|v| v * 3.0).collect();
    let (l2, _) = pnc_value(&scaled, &ft2, &ff, 5.0);
    assert!((l - l2).abs() < 1e-12);
    let (_, swapped) = pnc_value(&fq, &ff, &ft, 5.0);
    for (a, b) in sb.iter().zip(swapped) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pnc_errors_and_empty() {
    let mut t = Tape::new();
    let q = t.constant(NdArray::zeros(&[2, 3]));
    let a = t.constant(NdArray::vector(vec![1.0, 0.0, 0.0]));
    assert!(matches!(
        pnc_loss(&mut t, q, a, a, &[0], 5.0),
        Err(LossError::ZeroNorm(_))
    ));
    assert!(pnc_loss(&mut t, q, a, a, &[], 5.0).unwrap().empty);
    assert!(pnc_loss(&mut t, q, a, a, &[0], 0.0).is_err());
}

fn tso_value(p: &[f64], n: &[f64]) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(NdArray::vector(p.to_vec()));
    let b = t.constant(NdArray::vector(n.to_vec()));
    let l = tso_loss(&mut t, &[(a, b)]).unwrap();
    scalar_of(&t, l)
}

#[test]
fn tso_identities() {
    assert!((tso_value(&[0.6, 0.8], &[0.6, 0.8]) - 2.0).abs() < 1e-12);
    assert!(tso_value(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
    assert!((tso_value(&[0.6, 0.8], &[-0.6, -0.8]) + 2.0).abs() < 1e-12);
    let mut g = rng(8);
    for _ in 0..50 {
        let p: Vec<f64> = (0..4).map(|_| g.gen_range(-1.0..1.0)).collect();
        let n: Vec<f64> = (0..4).map(|_| g.gen_range(-1.0..1.0)).collect();
        let v = tso_value(&p, &n);
        assert!((-2.0..=2.0).contains(&v));
        assert!((v - tso_value(&n, &p)).abs() < 1e-15);
    }
    let mut t = Tape::new();
    let z = t.constant(NdArray::zeros(&[3]));
    assert!(tso_loss(&mut t, &[(z, z)]).is_err());
    assert!(tso_loss(&mut t, &[]).is_err());
}

#[test]
fn matching_cost_matches_naive() {
    let mut g = rng(5);
    let r = 6;
    let s: Vec<f64> = (0..r).map(|_| g.gen_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..r * 4).map(|_| g.gen_range(0.1..0.9)).collect();
    let out = GroundingOutput {
        s_cls: NdArray::vector(s.clone()),
        boxes: NdArray::new(vec![r, 4], b.clone()).unwrap(),
    };
    let gt = [[0.4, 0.4, 0.2, 0.2], [0.7, 0.3, 0.1, 0.3]];
    let w = LossWeights::default();
    let c = matching_cost(&out, &gt, &w).unwrap();
    for i in 0..r {
        for (j, gb) in gt.iter().enumerate() {
            let bb = [b[i * 4], b[i * 4 + 1], b[i * 4 + 2], b[i * 4 + 3]];
            let p = 1.0 / (1.0 + (-s[i]).exp());
            let l1 = (0..4).map(|k| (bb[k] - gb[k]).abs()).sum::<f64>();
            let want = -p + 5.0 * l1 + 2.0 * (1.0 - giou(bb, *gb));
            assert!((c.at2(i, j) - want).abs() < 1e-12);
        }
    }
    assert!(matching_cost(&out, &[], &w).is_err());

    let mut boxes = b.clone();
    boxes[8..12].copy_from_slice(&gt[0]);
    let mut scores = s.clone();
    scores[2] = 10.0;
    let out = GroundingOutput {
        s_cls: NdArray::vector(scores),
        boxes: NdArray::new(vec![r, 4], boxes).unwrap(),
    };
    let c = matching_cost(&out, &gt, &w).unwrap();
    assert!((0..r).filter(|&i| i != 2).all(|i| c.at2(i, 0) > c.at2(2, 0)));
    assert_eq!(hungarian(&c).pairs.iter().find(|p| p.1 == 0).unwrap().0, 2);
}

#[test]
fn total_reduces_without_opposition_terms() {
    let mut t = Tape::new();
    let v = |t: &mut Tape, x: f64| t.constant(NdArray::scalar(x));
    let (cls, l1, gi, pnc, tso) = (
        v(&mut t, 0.7),
        v(&mut t, 0.2),
        v(&mut t, 0.4),
        v(&mut t, 0.9),
        v(&mut t, -1.0),
    );
    let terms = LossTerms {
        cls,
        l1,
        giou: gi,
        pnc: Some(pnc),
        tso: Some(tso),
    };
    let (_, b) = total_loss(&mut t, &terms, &LossWeights::default()).unwrap();
    assert!((b.total - (0.7 + 5.0 * 0.2 + 2.0 * 0.4 + 0.5 * 0.9 - 0.3)).abs() < 1e-12);
    let w0 = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..LossWeights::default()
    };
    let (_, b0) = total_loss(&mut t, &terms, &w0).unwrap();
    assert!((b0.total - (0.7 + 1.0 + 0.8)).abs() < 1e-12);
}

/// Every composite loss against central differences over 20 seeds.
#[test]
fn gradients_match_finite_differences() {
    let (r, d) = (6, 5);
    for seed in 0..20 {
        let mut g = rng(100 + seed);
        let gt = [[
            g.gen_range(0.3..0.7),
            g.gen_range(0.3..0.7),
            g.gen_range(0.1..0.3),
            g.gen_range(0.1..0.3),
        ]];
        let n = r + r * 4 + r * d + 2 * d;
        let x = NdArray::vector((0..n).map(|_| g.gen_range(-1.5..1.5)).collect());
        let pairs = [(1usize, 0usize)];
        let err = grad_check(
            |t: &mut Tape, x| {
                let scores = t.slice(x, 0, 0, r)?;
                let raw = t.slice(x, 0, r, 5 * r)?;
                let raw = t.reshape(raw, &[r, 4])?;
                let boxes = t.sigmoid(raw);
                let fq = t.slice(x, 0, 5 * r, 5 * r + r * d)?;
                let fq = t.reshape(fq, &[r, d])?;
                let ft = t.slice(x, 0, 5 * r + r * d, 5 * r + r * d + d)?;
                let ff = t.slice(x, 0, 5 * r + r * d + d, n)?;
                let cls = focal_loss(t, scores, &[1], 2.0, 0.25)?;
                let loc = loc_loss(t, boxes, &gt, &pairs)?;
                let pnc = pnc_loss(t, fq, ft, ff, &[1, 3], 5.0)?;
                let tso = tso_loss(t, &[(ft, ff)])?;
                let terms = LossTerms {
                    cls,
                    l1: loc.l1,
                    giou: loc.giou,
                    pnc: Some(pnc.loss),
                    tso: Some(tso),
                };
                Ok::<_, LossError>(total_loss(t, &terms, &LossWeights::default())?.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn gradient_suite_covers_every_term() {
    let report = gradient_suite(3, 4, 1e-5).unwrap();
    let names: Vec<&str> = report.iter().map(|r| r.term.as_str()).collect();
    assert_eq!(names, GRADCHECK_TERMS);
    for r in &report {
        assert!(r.max_rel_error < 1e-4, "{}: {}", r.term, r.max_rel_error);
    }
}

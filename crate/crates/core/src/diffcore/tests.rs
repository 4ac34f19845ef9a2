use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let a = t.constant(NdArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = t.constant(NdArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let p = t.matmul(a, i).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(t.shape(p), &[2, 2]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let z = t.constant(NdArray::vector(vec![0.0, 0.0]));
    let s = t.softmax(z);
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn sum_of_mean() {
    let mut t = Tape::new();
    let x = t.constant(NdArray::vector(vec![2.0, 4.0, 6.0]));
    let m = t.mean(x, Some(0)).unwrap();
    let s = t.sum(m, None).unwrap();
    assert_eq!(t.value(s).item(), 4.0);
}

#[test]
fn shape_mismatch_names_operands() {
    let mut t = Tape::new();
    let a = t.constant(NdArray::zeros(&[2, 3]));
    let b = t.constant(NdArray::zeros(&[4, 5]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        DiffError::Shape {
            op: "matmul",
            shapes: vec![vec![2, 3], vec![4, 5]]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
    assert!(t.add(a, b).is_err());
}

#[test]
fn log_is_clamped() {
    let mut t = Tape::new();
    let x = t.leaf(NdArray::vector(vec![0.0, -1.0, 1.0]), true);
    let l = t.log(x);
    assert_eq!(t.value(l).data()[0], LOG_CLAMP.ln());
    let s = t.sum(l, None).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn square_derivative() {
    let mut t = Tape::new();
    let x = t.leaf(NdArray::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let z = t.leaf(NdArray::randn(&[5], 2.0, &mut rng), true);
    let s = t.softmax(z);
    let total = t.sum(s, None).unwrap();
    t.backward(total).unwrap();
    assert!(t.grad(z).unwrap().data().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn non_scalar_root_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(NdArray::zeros(&[2]), true);
    assert!(matches!(t.backward(x), Err(DiffError::NonScalarRoot { .. })));
}

#[test]
fn leaf_gradient_is_one() {
    let mut t = Tape::new();
    let x = t.leaf(NdArray::scalar(1.5), true);
    t.backward(x).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0]);
}

/// Central differences computed directly, without the tape.
fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            (fp - f(&p)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, n) = (4, 3);
    let w = NdArray::randn(&[m, n], 1.0, &mut rng);
    let x = NdArray::randn(&[n, 1], 1.0, &mut rng);
    let y = NdArray::randn(&[m, 1], 1.0, &mut rng);

    let mut t = Tape::new();
    let wv = t.leaf(w.clone(), true);
    let xv = t.leaf(x.clone(), true);
    let yv = t.constant(y.clone());
    let p = t.matmul(wv, xv).unwrap();
    let d = t.sub(p, yv).unwrap();
    let sq = t.square(d);
    let loss = t.mean(sq, None).unwrap();
    t.backward(loss).unwrap();

    // Plain-loop objective over the flattened W.
    let mse = |wf: &[f64]| {
        (0..m)
            .map(|i| {
                let r: f64 = (0..n).map(|j| wf[i * n + j] * x.data()[j]).sum::<f64>() - y.data()[i];
                r * r
            })
            .sum::<f64>()
            / m as f64
    };
    let numeric = central_diff(mse, w.data(), 1e-5);
    let analytic = t.grad(wv).unwrap().data();
    for (a, b) in analytic.iter().zip(&numeric) {
        assert!(
            (a - b).abs() / b.abs().max(1e-8) <= 1e-6 || (a - b).abs() < 1e-10,
            "{a} vs {b}"
        );
    }
}

#[test]
fn grad_check_quadratic() {
    let err = grad_check(
        |t: &mut Tape, x| {
            let sq = t.square(x);
            t.sum(sq, None)
        },
        &NdArray::vector(vec![1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite() {
    let f = |t: &mut Tape, x: Var| t.sum(x, None);
    assert!(matches!(
        grad_check(f, &NdArray::vector(vec![1.0]), 1e-2),
        Err(DiffError::StepSize(_))
    ));
    let g = |t: &mut Tape, x: Var| {
        let e = t.exp(x);
        t.sum(e, None)
    };
    assert!(grad_check(g, &NdArray::vector(vec![1000.0]), 1e-5).is_err());
}

/// Exercises every primitive's reverse rule through one composite objective.
#[test]
fn composite_primitives_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = NdArray::randn(&[24], 0.7, &mut rng);
        let err = grad_check(
            |t: &mut Tape, x| -> Result<Var, DiffError> {
                let a = t.slice(x, 0, 0, 12)?;
                let a = t.reshape(a, &[3, 4])?;
                let b = t.slice(x, 0, 12, 24)?;
                let b = t.reshape(b, &[4, 3])?;
                let bt = t.transpose(b)?;
                let p = t.matmul(a, b)?; // 3x3
                let th = t.tanh(p);
                let sm = t.softmax(th);
                let row = t.slice(a, 0, 1, 2)?; // [1,4] broadcast against [3,4]
                let bc = t.add(a, row)?;
                let m = t.mul(bc, bt)?;
                let r = t.relu(m);
                let n = t.l2_norm(bc); // [3]
                let sig = t.sigmoid(n);
                let e = t.exp(sig);
                let lg = t.log(e);
                let g = t.index_select(sm, &[2, 0, 2])?;
                let mx = t.maximum(a, bt)?;
                let mn = t.minimum(a, bt)?;
                let ab = t.abs(mx);
                let ev = t.reshape(e, &[3, 1])?;
                let dv = t.div(mn, ev)?;
                let cat = t.concat(&[r, ab, dv], 1)?; // [3,12]
                let s1 = t.sum(cat, Some(1))?;
                let s2 = t.mean(g, Some(0))?;
                let bb = t.broadcast_to(s2, &[2, 3])?;
                let s3 = t.sum(bb, None)?;
                let sc = t.scale(s3, 0.5);
                let tot = t.sum(s1, None)?;
                let tot = t.add(tot, sc)?;
                let lsum = t.sum(lg, None)?;
                let tot = t.add(tot, lsum)?;
                Ok(t.add_scalar(tot, 1.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn conv2d_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c, h, w, o, k) = (2, 6, 6, 3, 3);
    let n_in = c * h * w;
    let n_w = o * c * k * k;
    for stride in [1, 2] {
        let x = NdArray::randn(&[n_in + n_w], 1.0, &mut rng);
        let err = grad_check(
            |t: &mut Tape, x| -> Result<Var, DiffError> {
                let img = t.slice(x, 0, 0, n_in)?;
                let img = t.reshape(img, &[c, h, w])?;
                let wt = t.slice(x, 0, n_in, n_in + n_w)?;
                let wt = t.reshape(wt, &[o, c, k, k])?;
                let y = t.conv2d(img, wt, stride, 1)?;
                let y2 = t.square(y);
                t.sum(y2, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "stride {stride}: {err}");
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w, o, k, s, p) = (2, 7, 7, 2, 3, 2, 1);
    let x = NdArray::randn(&[c, h, w], 1.0, &mut rng);
    let wt = NdArray::randn(&[o, c, k, k], 1.0, &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(wt.clone());
    let y = t.conv2d(xv, wv, s, p).unwrap();
    let (ho, wo) = (t.shape(y)[1], t.shape(y)[2]);
    assert_eq!((ho, wo), (4, 4));
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * s + ki) as isize - p as isize;
                            let ix = (ox * s + kj) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * wt.data()[((oc * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                }
                let got = t.value(y).data()[(oc * ho + oy) * wo + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn broadcast_rules() {
    let mut t = Tape::new();
    let a = t.constant(NdArray::zeros(&[2, 1, 3]));
    let b = t.constant(NdArray::ones(&[4, 1]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 4, 3]);
    assert!(close(t.value(c).data(), &[1.0; 24], 0.0));
}

#[test]
fn frozen_subgraph_gets_no_gradient() {
    let mut r = ParamRegistry::new();
    r.register("a", NdArray::vector(vec![2.0]), ModuleTag::ImageEncoder)
        .unwrap();
    r.register("b", NdArray::vector(vec![3.0]), ModuleTag::Fusion).unwrap();
    r.freeze_except(&[ModuleTag::Fusion].into_iter().collect()).unwrap();
    let mut t = Tape::new();
    let a = r.bind(&mut t, "a").unwrap();
    let b = r.bind(&mut t, "b").unwrap();
    assert_eq!(r.bind(&mut t, "a").unwrap(), a);
    let p = t.mul(a, b).unwrap();
    let s = t.sum(p, None).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(a).is_none());
    r.accumulate_grads(&t);
    assert_eq!(r.get("b").unwrap().grad.data(), &[2.0]);
    assert_eq!(r.get("a").unwrap().grad.data(), &[0.0]);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::{Error, Real};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_array(r: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let data = (0..numel(shape)).map(|_| r.gen_range(-1.0..1.0)).collect();
    Array { shape: shape.to_vec(), data }
}

/// Fixed non-uniform weighting so reductions in grad checks are not all-ones
/// (uniform upstream gradients hide transposition mistakes).
fn ramp_weight(g: &mut Graph, t: &Tensor) -> Tensor {
    let n = t.numel();
    let w = Array::from_vec(&t.shape, (0..n).map(|i| 0.3 + 0.01 * i as Real).collect()).unwrap();
    let wc = g.constant(&w);
    let prod = g.mul(t, &wc).unwrap();
    g.sum_all(&prod).unwrap()
}

fn assert_close(a: Real, b: Real, tol: Real, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

fn check_passes(report: &GradCheckReport) {
    assert!(
        report.pass,
        "gradient check failed: max rel err {} at {:?} (checked {})",
        report.max_rel_err, report.worst, report.checked
    );
}

// ── forward oracles ─────────────────────────────────────────────────────

#[test]
fn matmul_hand_oracle() {
    let mut g = Graph::new();
    let a = g.leaf(&Array::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let b = g.leaf(&Array::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap(), false);
    let c = g.matmul(&a, &b).unwrap();
    assert_eq!(c.shape, vec![2, 1]);
    assert_eq!(g.data(&c), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_independent_contraction() {
    let mut r = rng(11);
    for _ in 0..20 {
        let m = r.gen_range(1..5);
        let k = r.gen_range(1..6);
        let n = r.gen_range(1..5);
        let a = rand_array(&mut r, &[m, k]);
        let b = rand_array(&mut r, &[k, n]);
        let mut g = Graph::new();
        let (ta, tb) = (g.leaf(&a, false), g.leaf(&b, false));
        let c = g.matmul(&ta, &tb).unwrap();
        let cd = g.data(&c);
        // oracle: explicit index arithmetic, j-major loop order
        for j in 0..n {
            for i in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data[i * k + p] * b.data[p * n + j];
                }
                assert_close(cd[i * n + j], s, 1e-12, "matmul entry");
            }
        }
    }
}

#[test]
fn matmul_batched_and_shared() {
    let mut r = rng(12);
    let a = rand_array(&mut r, &[3, 2, 4]);
    let b = rand_array(&mut r, &[4, 5]);
    let mut g = Graph::new();
    let (ta, tb) = (g.leaf(&a, false), g.leaf(&b, false));
    let c = g.matmul(&ta, &tb).unwrap();
    assert_eq!(c.shape, vec![3, 2, 5]);
    // batch 2 must equal an unbatched product of its slice
    let a2 = Array::from_vec(&[2, 4], a.data[2 * 8..3 * 8].to_vec()).unwrap();
    let mut g2 = Graph::new();
    let (t2, tb2) = (g2.leaf(&a2, false), g2.leaf(&b, false));
    let c2 = g2.matmul(&t2, &tb2).unwrap();
    assert_eq!(&g.data(&c)[2 * 10..3 * 10], g2.data(&c2));
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Array::zeros(&[2, 3]), false);
    let b = g.leaf(&Array::zeros(&[4, 2]), false);
    match g.matmul(&a, &b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {:?}", other.map(|t| t.shape)),
    }
}

#[test]
fn broadcast_add_row_bias() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), false);
    let b = g.leaf(&Array::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap(), false);
    let y = g.add(&x, &b).unwrap();
    assert_eq!(g.data(&y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
}

#[test]
fn broadcast_mid_axis() {
    // [2,1] * [1,3] -> [2,3] outer product
    let mut g = Graph::new();
    let a = g.leaf(&Array::from_vec(&[2, 1], vec![2.0, 3.0]).unwrap(), false);
    let b = g.leaf(&Array::from_vec(&[1, 3], vec![1.0, 10.0, 100.0]).unwrap(), false);
    let y = g.mul(&a, &b).unwrap();
    assert_eq!(g.data(&y), &[2.0, 20.0, 200.0, 3.0, 30.0, 300.0]);
}

#[test]
fn softmax_frozen_example() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::from_vec(&[2], vec![0.0, (3.0 as Real).ln()]).unwrap(), false);
    let y = g.softmax(&x, 0).unwrap();
    assert_close(g.data(&y)[0], 0.25, 1e-12, "softmax[0]");
    assert_close(g.data(&y)[1], 0.75, 1e-12, "softmax[1]");
}

#[test]
fn softmax_large_magnitude_rows_sum_to_one() {
    let mut r = rng(13);
    let mut g = Graph::new();
    let data: Vec<Real> = (0..40).map(|_| r.gen_range(-1e4..1e4)).collect();
    let x = g.leaf(&Array::from_vec(&[5, 8], data).unwrap(), false);
    let y = g.softmax(&x, 1).unwrap();
    let yd = g.data(&y);
    for row in 0..5 {
        let s: Real = yd[row * 8..(row + 1) * 8].iter().sum();
        assert_close(s, 1.0, 1e-6, "softmax row sum");
        assert!(yd[row * 8..(row + 1) * 8].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn softmax_axis_zero() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::from_vec(&[2, 2], vec![0.0, 5.0, 0.0, 5.0]).unwrap(), false);
    let y = g.softmax(&x, 0).unwrap();
    let yd = g.data(&y);
    assert_close(yd[0] + yd[2], 1.0, 1e-12, "col 0 sum");
    assert_close(yd[1] + yd[3], 1.0, 1e-12, "col 1 sum");
    assert_close(yd[0], 0.5, 1e-12, "equal entries split evenly");
}

#[test]
fn reductions_match_naive() {
    let mut r = rng(14);
    let x = rand_array(&mut r, &[3, 4, 2]);
    let mut g = Graph::new();
    let t = g.leaf(&x, false);
    let s1 = g.sum_axis(&t, 1).unwrap();
    assert_eq!(s1.shape, vec![3, 2]);
    for o in 0..3 {
        for i in 0..2 {
            let want: Real = (0..4).map(|a| x.data[(o * 4 + a) * 2 + i]).sum();
            assert_close(g.data(&s1)[o * 2 + i], want, 1e-12, "sum_axis");
        }
    }
    let m1 = g.mean_axis(&t, 0).unwrap();
    assert_eq!(m1.shape, vec![4, 2]);
    let want: Real = (0..3).map(|o| x.data[o * 8]).sum::<Real>() / 3.0;
    assert_close(g.data(&m1)[0], want, 1e-12, "mean_axis");
    let mx = g.max_axis(&t, 2).unwrap();
    assert_eq!(mx.shape, vec![3, 4]);
    let want = x.data[0].max(x.data[1]);
    assert_close(g.data(&mx)[0], want, 1e-12, "max_axis");
}

#[test]
fn max_ties_take_lowest_index() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::from_vec(&[4], vec![1.0, 7.0, 7.0, 3.0]).unwrap(), true);
    let m = g.max_axis(&x, 0).unwrap();
    let loss = g.sum_all(&m).unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(g.grad(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn shape_roundtrips_are_exact() {
    let mut r = rng(15);
    let x = rand_array(&mut r, &[2, 3, 4]);
    let mut g = Graph::new();
    let t = g.leaf(&x, false);

    let tr = g.transpose(&t, &[2, 0, 1]).unwrap();
    let back = g.transpose(&tr, &[1, 2, 0]).unwrap();
    assert_eq!(g.data(&back), x.data.as_slice());

    let rs = g.reshape(&t, &[4, 6]).unwrap();
    let back = g.reshape(&rs, &[2, 3, 4]).unwrap();
    assert_eq!(g.data(&back), x.data.as_slice());

    let s0 = g.slice(&t, 1, 0, 1).unwrap();
    let s1 = g.slice(&t, 1, 1, 2).unwrap();
    let cat = g.concat(&[&s0, &s1], 1).unwrap();
    assert_eq!(g.data(&cat), x.data.as_slice());
}

#[test]
fn layer_norm_frozen_examples() {
    let mut g = Graph::new();
    let gain = g.leaf(&Array::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap(), false);
    let bias = g.leaf(&Array::zeros(&[3]), false);
    let x = g.leaf(&Array::from_vec(&[1, 3], vec![5.0, 5.0, 5.0]).unwrap(), false);
    let y = g.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    for v in g.data(&y) {
        assert_close(*v, 0.0, 1e-9, "constant row normalizes to zero");
    }

    let gain2 = g.leaf(&Array::from_vec(&[2], vec![1.0, 1.0]).unwrap(), false);
    let bias2 = g.leaf(&Array::zeros(&[2]), false);
    let x2 = g.leaf(&Array::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(), false);
    let y2 = g.layer_norm(&x2, &gain2, &bias2, 1e-12).unwrap();
    assert_close(g.data(&y2)[0], 1.0, 1e-6, "already normalized row");
    assert_close(g.data(&y2)[1], -1.0, 1e-6, "already normalized row");
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let mut g = Graph::new();
    let logits = g.leaf(&Array::zeros(&[7, 19]), false);
    let loss = g.cross_entropy(&logits, &[3, 0, 18, 5, 5, 2, 1]).unwrap();
    assert_close(g.scalar(&loss).unwrap(), (19.0 as Real).ln(), 1e-12, "uniform CE");
}

#[test]
fn bce_logits_frozen_values_and_stability() {
    let mut g = Graph::new();
    let z = g.leaf(&Array::zeros(&[2, 2]), true);
    let t = Array::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let l = g.bce_logits(&z, &t).unwrap();
    for v in g.data(&l) {
        assert_close(*v, (2.0 as Real).ln(), 1e-12, "bce at logit 0");
    }

    let mut g2 = Graph::new();
    let z2 = g2.leaf(&Array::from_vec(&[2], vec![50.0, -50.0]).unwrap(), true);
    let t2 = Array::from_vec(&[2], vec![0.0, 1.0]).unwrap();
    let l2 = g2.bce_logits(&z2, &t2).unwrap();
    let m = g2.mean_all(&l2).unwrap();
    assert!(g2.scalar(&m).unwrap().is_finite());
    g2.backward(&m).unwrap();
    assert!(g2.grad(&z2).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn embed_looks_up_rows() {
    let mut g = Graph::new();
    let table = g.leaf(&Array::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), false);
    let e = g.embed(&table, &[2, 0, 2]).unwrap();
    assert_eq!(g.data(&e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
}

#[test]
fn conv3x3_identity_kernel_reproduces_input() {
    let mut r = rng(16);
    let c = 3;
    let x = rand_array(&mut r, &[4, 5, c]);
    // identity: center tap (ky=1,kx=1) is the identity over channels
    let mut w = Array::zeros(&[3, 3, c, c]);
    for ch in 0..c {
        w.data[((1 * 3 + 1) * c + ch) * c + ch] = 1.0;
    }
    let mut g = Graph::new();
    let (tx, tw) = (g.leaf(&x, false), g.leaf(&w, false));
    let tb = g.leaf(&Array::zeros(&[c]), false);
    let y = g.conv3x3(&tx, &tw, &tb).unwrap();
    assert_eq!(g.data(&y), x.data.as_slice());
}

#[test]
fn conv3x3_constant_input_stays_constant() {
    // clamp padding means a constant field convolves to a constant field
    let c = 2;
    let x = Array::full(&[5, 6, c], 0.7);
    let mut r = rng(17);
    let w = rand_array(&mut r, &[3, 3, c, c]);
    let mut g = Graph::new();
    let (tx, tw) = (g.leaf(&x, false), g.leaf(&w, false));
    let tb = g.leaf(&Array::zeros(&[c]), false);
    let y = g.conv3x3(&tx, &tw, &tb).unwrap();
    let yd = g.data(&y);
    for px in 1..5 * 6 {
        for ch in 0..c {
            assert_close(yd[px * c + ch], yd[ch], 1e-12, "constant field");
        }
    }
}

#[test]
fn upsample_constant_and_ramp() {
    let x = Array::full(&[3, 3, 1], 2.5);
    let mut g = Graph::new();
    let t = g.leaf(&x, false);
    let y = g.upsample2x(&t).unwrap();
    assert_eq!(y.shape, vec![6, 6, 1]);
    for v in g.data(&y) {
        assert_close(*v, 2.5, 1e-12, "constant upsample");
    }

    // 1-D ramp along x: interior outputs interpolate with weights 0.25/0.75
    let x2 = Array::from_vec(&[1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut g2 = Graph::new();
    let t2 = g2.leaf(&x2, false);
    let y2 = g2.upsample2x(&t2).unwrap();
    let yd = g2.data(&y2);
    let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
    for (i, w) in want.iter().enumerate() {
        assert_close(yd[i], *w, 1e-12, "ramp upsample row 0");
        assert_close(yd[8 + i], *w, 1e-12, "ramp upsample row 1");
    }
}

// ── backward contracts ──────────────────────────────────────────────────

#[test]
fn sum_loss_gradient_is_ones() {
    let mut r = rng(18);
    let x = rand_array(&mut r, &[3, 4]);
    let mut g = Graph::new();
    let t = g.leaf(&x, true);
    let loss = g.sum_all(&t).unwrap();
    g.backward(&loss).unwrap();
    assert!(g.grad(&t).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn diamond_fanout_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::scalar(3.0), true);
    let y = g.add(&x, &x).unwrap();
    g.backward(&y).unwrap();
    assert_eq!(g.grad(&x).unwrap(), &[2.0]);
}

#[test]
fn backward_twice_errors() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::scalar(1.0), true);
    let y = g.scale(&x, 2.0).unwrap();
    g.backward(&y).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::BackwardTwice)));
}

#[test]
fn non_scalar_loss_errors() {
    let mut g = Graph::new();
    let x = g.leaf(&Array::zeros(&[2, 2]), true);
    let y = g.scale(&x, 1.0).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn mixing_graphs_errors() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let a = g1.leaf(&Array::scalar(1.0), false);
    let b = g2.leaf(&Array::scalar(1.0), false);
    assert!(g1.add(&a, &b).is_err());
}

#[test]
fn frozen_subgraph_gets_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(&Array::scalar(2.0), false);
    let b = g.leaf(&Array::scalar(5.0), true);
    let p = g.mul(&a, &b).unwrap();
    g.backward(&p).unwrap();
    assert!(g.grad(&a).is_none());
    assert_eq!(g.grad(&b).unwrap(), &[2.0]);
}

// ── gradient checks per op ──────────────────────────────────────────────

#[test]
fn gradient_check_quadratic_and_negative_control() {
    let f = |g: &mut Graph, p: &[Tensor]| {
        let sq = g.mul(&p[0], &p[0])?;
        g.sum_all(&sq)
    };
    let params = [Array::scalar(2.0)];
    let report = gradient_check(f, &params, 1e-5, 1e-4, Sample::All).unwrap();
    check_passes(&report);

    // corrupted analytic rule must fail the same comparison
    let numeric = central_diff(&f, &params, 0, 0, 1e-5).unwrap();
    assert_close(numeric, 4.0, 1e-6, "central difference of x^2 at 2");
    let corrupted: Real = 4.05;
    let rel = (corrupted - numeric).abs() / corrupted.abs().max(1.0);
    assert!(rel > 1e-4, "corrupted gradient must exceed tolerance");
}

#[test]
fn gradient_check_rejects_bad_h() {
    let f = |g: &mut Graph, p: &[Tensor]| g.sum_all(&p[0]);
    assert!(gradient_check(f, &[Array::scalar(1.0)], 1e-2, 1e-4, Sample::All).is_err());
}

#[test]
fn gradient_check_reports_non_finite() {
    let f = |g: &mut Graph, p: &[Tensor]| {
        let l = g.log(&p[0])?; // log of a negative leaf -> NaN
        g.sum_all(&l)
    };
    let report = gradient_check(f, &[Array::scalar(-1.0)], 1e-5, 1e-4, Sample::All).unwrap();
    assert!(!report.pass);
    assert!(report.non_finite.is_some());
}

/// Every op with custom backward logic, checked on random small shapes.
#[test]
fn per_op_gradients_on_random_shapes() {
    let mut r = rng(77);
    for round in 0..20u64 {
        let m = r.gen_range(2..4);
        let k = r.gen_range(2..5);
        let n = r.gen_range(2..4);

        // matmul + add bias + gelu
        let params = [rand_array(&mut r, &[m, k]), rand_array(&mut r, &[k, n]), rand_array(&mut r, &[n])];
        let rep = gradient_check(
            |g, p| {
                let mm = g.matmul(&p[0], &p[1])?;
                let biased = g.add(&mm, &p[2])?;
                let act = g.gelu(&biased)?;
                Ok(ramp_weight(g, &act))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // elementwise chain: sigmoid(exp(a) * b) / (b^2 + 1)
        let params = [rand_array(&mut r, &[m, n]), rand_array(&mut r, &[m, n])];
        let rep = gradient_check(
            |g, p| {
                let e = g.exp(&p[0])?;
                let prod = g.mul(&e, &p[1])?;
                let s = g.sigmoid(&prod)?;
                let sq = g.mul(&p[1], &p[1])?;
                let denom = g.add_scalar(&sq, 1.0)?;
                let q = g.div(&s, &denom)?;
                Ok(ramp_weight(g, &q))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // softmax over each axis of a 3-D tensor
        let x = rand_array(&mut r, &[2, m, n]);
        for axis in 0..3 {
            let rep = gradient_check(
                |g, p| {
                    let s = g.softmax(&p[0], axis)?;
                    Ok(ramp_weight(g, &s))
                },
                std::slice::from_ref(&x),
                1e-5,
                1e-4,
                Sample::All,
            )
            .unwrap();
            check_passes(&rep);
        }

        // layer norm
        let params = [rand_array(&mut r, &[m, k]), rand_array(&mut r, &[k]), rand_array(&mut r, &[k])];
        let rep = gradient_check(
            |g, p| {
                let y = g.layer_norm(&p[0], &p[1], &p[2], 1e-5)?;
                Ok(ramp_weight(g, &y))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // shape ops: transpose/reshape/slice/concat composition
        let params = [rand_array(&mut r, &[m, k, n]), rand_array(&mut r, &[m, k, n])];
        let rep = gradient_check(
            |g, p| {
                let t = g.transpose(&p[0], &[1, 0, 2])?;
                let rs = g.reshape(&t, &[k, m * n])?;
                let sl = g.slice(&rs, 1, 0, m * n - 1)?;
                let t2 = g.transpose(&p[1], &[1, 0, 2])?;
                let rs2 = g.reshape(&t2, &[k, m * n])?;
                let sl2 = g.slice(&rs2, 1, 1, m * n - 1)?;
                let cat = g.concat(&[&sl, &sl2], 1)?;
                Ok(ramp_weight(g, &cat))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // reductions (shift max inputs so ties cannot form within h)
        let mut x = rand_array(&mut r, &[m, k]);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v += i as Real * 1e-3;
        }
        let rep = gradient_check(
            |g, p| {
                let s = g.sum_axis(&p[0], 0)?;
                let mn = g.mean_axis(&p[0], 1)?;
                let mx = g.max_axis(&p[0], 1)?;
                let a = ramp_weight(g, &s);
                let b = ramp_weight(g, &mn);
                let c = ramp_weight(g, &mx);
                let ab = g.add(&a, &b)?;
                g.add(&ab, &c)
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // broadcast binary grads against reduced operands
        let params = [rand_array(&mut r, &[m, 1, n]), rand_array(&mut r, &[k, n])];
        let rep = gradient_check(
            |g, p| {
                let s = g.sub(&p[0], &p[1])?;
                let sq = g.mul(&s, &s)?;
                g.mean_all(&sq)
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // relu / neg / scale / log away from kinks and poles
        let mut x = rand_array(&mut r, &[m, n]);
        for v in x.data.iter_mut() {
            if v.abs() < 0.1 {
                *v += 0.3;
            }
        }
        let rep = gradient_check(
            |g, p| {
                let rl = g.relu(&p[0])?;
                let ng = g.neg(&p[0])?;
                let sc = g.scale(&ng, 0.7)?;
                let sq = g.mul(&p[0], &p[0])?;
                let shifted = g.add_scalar(&sq, 0.5)?;
                let lg = g.log(&shifted)?;
                let a = ramp_weight(g, &rl);
                let b = ramp_weight(g, &sc);
                let c = ramp_weight(g, &lg);
                let ab = g.add(&a, &b)?;
                g.add(&ab, &c)
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // embed + cross entropy
        let table = rand_array(&mut r, &[5, k]);
        let proj = rand_array(&mut r, &[k, 4]);
        let ids: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
        let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
        let rep = gradient_check(
            |g, p| {
                let e = g.embed(&p[0], &ids)?;
                let logits = g.matmul(&e, &p[1])?;
                g.cross_entropy(&logits, &targets)
            },
            &[table, proj],
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // bce with logits
        let z = rand_array(&mut r, &[m, n]);
        let t = Array::from_vec(&[m, n], (0..m * n).map(|i| ((i + round as usize) % 2) as Real).collect()).unwrap();
        let rep = gradient_check(
            |g, p| {
                let l = g.bce_logits(&p[0], &t)?;
                g.mean_all(&l)
            },
            std::slice::from_ref(&z),
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // conv3x3 + upsample2x
        let params = [
            rand_array(&mut r, &[3, 4, 2]),
            rand_array(&mut r, &[3, 3, 2, 2]),
            rand_array(&mut r, &[2]),
        ];
        let rep = gradient_check(
            |g, p| {
                let up = g.upsample2x(&p[0])?;
                let y = g.conv3x3(&up, &p[1], &p[2])?;
                let shifted = g.add_scalar(&y, 0.05)?;
                let act = g.relu(&shifted)?;
                Ok(ramp_weight(g, &act))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);
    }
}

#[test]
fn batched_matmul_gradients() {
    let mut r = rng(78);
    for _ in 0..5 {
        // equal batch dims
        let params = [rand_array(&mut r, &[2, 3, 2]), rand_array(&mut r, &[2, 2, 3])];
        let rep = gradient_check(
            |g, p| {
                let c = g.matmul(&p[0], &p[1])?;
                Ok(ramp_weight(g, &c))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // shared right operand
        let params = [rand_array(&mut r, &[3, 2, 4]), rand_array(&mut r, &[4, 2])];
        let rep = gradient_check(
            |g, p| {
                let c = g.matmul(&p[0], &p[1])?;
                Ok(ramp_weight(g, &c))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);

        // shared left operand
        let params = [rand_array(&mut r, &[2, 4]), rand_array(&mut r, &[3, 4, 2])];
        let rep = gradient_check(
            |g, p| {
                let c = g.matmul(&p[0], &p[1])?;
                Ok(ramp_weight(g, &c))
            },
            &params,
            1e-5,
            1e-4,
            Sample::All,
        )
        .unwrap();
        check_passes(&rep);
    }
}

#[test]
fn eight_parameter_pipeline_matches_central_differences() {
    // two 2x2 weight matrices: matmul -> sigmoid -> matmul -> mean of squares
    let mut r = rng(79);
    let params = [rand_array(&mut r, &[2, 2]), rand_array(&mut r, &[2, 2])];
    let x = Array::from_vec(&[1, 2], vec![0.6, -0.4]).unwrap();
    let rep = gradient_check(
        |g, p| {
            let xc = g.constant(&x);
            let h1 = g.matmul(&xc, &p[0])?;
            let a1 = g.sigmoid(&h1)?;
            let h2 = g.matmul(&a1, &p[1])?;
            let sq = g.mul(&h2, &h2)?;
            g.mean_all(&sq)
        },
        &params,
        1e-5,
        1e-4,
        Sample::All,
    )
    .unwrap();
    assert_eq!(rep.checked, 8);
    check_passes(&rep);
}

//! Training objective: autoregressive text loss plus classification and
//! mask losses over Hungarian-assigned proposal/target pairs,
//! L = L_t + w_cls*L_cls + w_mask*(w_b*L_b + w_d*L_d).
//!
//! Assignment costs are computed on detached values; no gradient flows
//! through the matching itself.

use crate::decoder::MaskSet;
use crate::metrics::Mask;
use crate::tensor::{Array, Graph, Tensor};
use crate::{Error, Real, Result};

pub const DICE_EPS: Real = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub cls: Real,
    pub mask: Real,
    pub b: Real,
    pub d: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, mask: 1.0, b: 1.0, d: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// (proposal index, target index), sorted by proposal index.
    pub pairs: Vec<(usize, usize)>,
}

fn mask_to_array(m: &Mask) -> Array {
    Array {
        shape: vec![m.h, m.w],
        data: m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

/// 1 - (2*sum(pred*gt) + eps) / (sum(pred) + sum(gt) + eps) with eps = 1.
pub fn dice_loss(g: &mut Graph, pred: &Tensor, gt: &Mask) -> Result<Tensor> {
    if pred.shape != [gt.h, gt.w] {
        return Err(Error::invalid("dice_loss", "pred and gt shapes differ"));
    }
    let gt_t = g.constant(&mask_to_array(gt));
    let inter = g.mul(pred, &gt_t)?;
    let inter = g.sum_all(&inter)?;
    let num = g.scale(&inter, 2.0)?;
    let num = g.add_scalar(&num, DICE_EPS)?;
    let psum = g.sum_all(pred)?;
    let den = g.add_scalar(&psum, gt.data.iter().filter(|&&b| b).count() as Real + DICE_EPS)?;
    let ratio = g.div(&num, &den)?;
    let neg = g.scale(&ratio, -1.0)?;
    g.add_scalar(&neg, 1.0)
}

/// Mean binary cross-entropy from logits (numerically stable form).
pub fn bce_loss(g: &mut Graph, logits: &Tensor, gt: &Mask) -> Result<Tensor> {
    if logits.shape != [gt.h, gt.w] {
        return Err(Error::invalid("bce_loss", "logits and gt shapes differ"));
    }
    let per_pixel = g.bce_logits(logits, &mask_to_array(gt))?;
    g.mean_all(&per_pixel)
}

/// Per-proposal binary cross-entropy: label 1 for assigned proposals, 0
/// otherwise, averaged over all N proposals.
pub fn class_loss(g: &mut Graph, score_logits: &Tensor, asg: &Assignment) -> Result<Tensor> {
    let n = score_logits.shape[0];
    let mut labels = Array::zeros(&[n]);
    for &(j, _) in &asg.pairs {
        labels.data[j] = 1.0;
    }
    let per = g.bce_logits(score_logits, &labels)?;
    g.mean_all(&per)
}

/// Minimum-total-cost one-to-one assignment of min(N, G) pairs, O(n^3)
/// shortest-augmenting-path Hungarian with potentials. Rectangular inputs
/// are padded to square with a constant, which cannot change the relative
/// cost of real pairings. Ties resolve deterministically by the fixed
/// ascending scan order over (proposal, target) indices.
pub fn hungarian_assign(cost: &Array) -> Result<Assignment> {
    if cost.shape.len() != 2 {
        return Err(Error::invalid("hungarian_assign", "cost must be [N, G]"));
    }
    let (rows, cols) = (cost.shape[0], cost.shape[1]);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("hungarian_assign", "empty cost matrix"));
    }
    if cost.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hungarian_assign: non-finite cost".into()));
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> Real {
        if i < rows && j < cols { cost.data[i * cols + j] } else { 0.0 }
    };

    const INF: Real = Real::INFINITY;
    let mut u = vec![0.0 as Real; n + 1];
    let mut v = vec![0.0 as Real; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row (1-based) matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    debug_assert_eq!(pairs.len(), rows.min(cols));
    Ok(Assignment { pairs })
}

/// Exhaustive-search reference: same contract as hungarian_assign, feasible
/// for min(N, G) <= ~6. Used by tests as the assignment oracle.
pub fn brute_force_assign(cost: &Array) -> Assignment {
    let (rows, cols) = (cost.shape[0], cost.shape[1]);
    let k = rows.min(cols);
    let mut best: Option<(Real, Vec<(usize, usize)>)> = None;
    // Choose k rows (in order) out of rows, k cols as a permutation.
    let row_sets = combinations(rows, k);
    let col_perms = permutations(cols, k);
    for rs in &row_sets {
        for cp in &col_perms {
            let mut total = 0.0;
            let mut pairs: Vec<(usize, usize)> =
                rs.iter().zip(cp).map(|(&r, &c)| (r, c)).collect();
            pairs.sort_unstable();
            for &(r, c) in &pairs {
                total += cost.data[r * cols + c];
            }
            let better = match &best {
                None => true,
                Some((t, bp)) => total < *t || (total == *t && pairs < *bp),
            };
            if better {
                best = Some((total, pairs));
            }
        }
    }
    Assignment { pairs: best.expect("nonempty cost").1 }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(
        n: usize,
        k: usize,
        cur: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, k, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    rec(n, k, &mut cur, &mut used, &mut out);
    out
}

pub fn assignment_total(cost: &Array, asg: &Assignment) -> Real {
    let cols = cost.shape[1];
    asg.pairs.iter().map(|&(r, c)| cost.data[r * cols + c]).sum()
}

/// Detached per-pair matching cost:
/// w_cls*(-score) + w_mask*(w_b*BCE + w_d*DICE).
pub fn matching_cost(
    mask_logits: &Array,
    scores: &Array,
    gt_masks: &[Mask],
    w: &LossWeights,
) -> Array {
    let (n, h, wd) = (mask_logits.shape[0], mask_logits.shape[1], mask_logits.shape[2]);
    let g_n = gt_masks.len();
    let mut cost = Array::zeros(&[n, g_n]);
    for j in 0..n {
        let ml = &mask_logits.data[j * h * wd..(j + 1) * h * wd];
        for (gi, gt) in gt_masks.iter().enumerate() {
            let mut bce = 0.0;
            let mut inter = 0.0;
            let mut psum = 0.0;
            for p in 0..h * wd {
                let z = ml[p];
                let t = if gt.data[p] { 1.0 } else { 0.0 };
                // max(z,0) - z*t + ln(1 + exp(-|z|))
                bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                let prob = 1.0 / (1.0 + (-z).exp());
                psum += prob;
                if gt.data[p] {
                    inter += prob;
                }
            }
            bce /= (h * wd) as Real;
            let gsum = gt.data.iter().filter(|&&b| b).count() as Real;
            let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
            cost.data[j * g_n + gi] = w.cls * (-scores.data[j]) + w.mask * (w.b * bce + w.d * dice);
        }
    }
    cost
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: Real,
    pub l_t: Real,
    pub l_cls: Real,
    pub l_b: Real,
    pub l_d: Real,
    pub assignment: Assignment,
}

/// Full objective for one sample. `text_logits` may be absent when text
/// supervision is disabled; `text_targets` length must then be zero too.
pub fn total_loss(
    g: &mut Graph,
    text_logits: Option<&Tensor>,
    text_targets: &[usize],
    mask_set: &MaskSet,
    gt_masks: &[Mask],
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    if gt_masks.is_empty() {
        return Err(Error::invalid("total_loss", "every sample needs at least one target"));
    }

    let l_t = match (text_logits, text_targets.is_empty()) {
        (Some(logits), false) => g.cross_entropy(logits, text_targets)?,
        _ => g.constant(&Array::scalar(0.0)),
    };

    // Detached assignment.
    let ml_detached = g.to_array(&mask_set.mask_logits);
    let sc_detached = g.to_array(&mask_set.scores);
    let cost = matching_cost(&ml_detached, &sc_detached, gt_masks, w);
    let asg = hungarian_assign(&cost)?;

    let cls = class_loss(g, &mask_set.score_logits, &asg)?;

    let (h, wd) = (gt_masks[0].h, gt_masks[0].w);
    let mut b_terms: Vec<Tensor> = Vec::new();
    let mut d_terms: Vec<Tensor> = Vec::new();
    for &(j, t) in &asg.pairs {
        let logit_row = g.slice(&mask_set.mask_logits, 0, j, 1)?;
        let logit_row = g.reshape(&logit_row, &[h, wd])?;
        b_terms.push(bce_loss(g, &logit_row, &gt_masks[t])?);
        let prob_row = g.slice(&mask_set.masks, 0, j, 1)?;
        let prob_row = g.reshape(&prob_row, &[h, wd])?;
        d_terms.push(dice_loss(g, &prob_row, &gt_masks[t])?);
    }
    let mean_of = |g: &mut Graph, terms: &[Tensor]| -> Result<Tensor> {
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = g.add(&acc, t)?;
        }
        g.scale(&acc, 1.0 / terms.len() as Real)
    };
    let l_b = mean_of(g, &b_terms)?;
    let l_d = mean_of(g, &d_terms)?;

    let cls_w = g.scale(&cls, w.cls)?;
    let b_w = g.scale(&l_b, w.b)?;
    let d_w = g.scale(&l_d, w.d)?;
    let mask_sum = g.add(&b_w, &d_w)?;
    let mask_w = g.scale(&mask_sum, w.mask)?;
    let partial = g.add(&l_t, &cls_w)?;
    let total = g.add(&partial, &mask_w)?;

    let report = LossReport {
        total: g.data(&total)[0],
        l_t: g.data(&l_t)[0],
        l_cls: g.data(&cls)[0],
        l_b: g.data(&l_b)[0],
        l_d: g.data(&l_d)[0],
        assignment: asg,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(bits: &[u8], h: usize, w: usize) -> Mask {
        Mask { h, w, data: bits.iter().map(|&b| b != 0).collect() }
    }

    #[test]
    fn dice_hand_oracle() {
        let mut g = Graph::new();
        // pred = 0.5 everywhere on 2x2, gt = single pixel:
        // 1 - (2*0.5 + 1) / (2 + 1 + 1) = 0.5
        let pred = g.constant(&Array::full(&[2, 2], 0.5));
        let gt = mask_from(&[1, 0, 0, 0], 2, 2);
        let loss = dice_loss(&mut g, &pred, &gt).unwrap();
        assert!((g.data(&loss)[0] - 0.5).abs() < 1e-12);

        // pred == gt exactly: 1 - (2*k+1)/(2k+1) = 0.
        let mut g = Graph::new();
        let pred = g.constant(&Array { shape: vec![2, 2], data: vec![1.0, 0.0, 1.0, 0.0] });
        let gt = mask_from(&[1, 0, 1, 0], 2, 2);
        let loss = dice_loss(&mut g, &pred, &gt).unwrap();
        assert!(g.data(&loss)[0].abs() < 1e-12);

        // Disjoint masses approach 1 as they grow.
        let mut g = Graph::new();
        let n = 64;
        let mut data = vec![0.0; n * n];
        let mut gt = vec![0u8; n * n];
        for i in 0..n * n / 2 {
            data[i] = 1.0;
            gt[n * n / 2 + i] = 1;
        }
        let pred = g.constant(&Array { shape: vec![n, n], data });
        let loss = dice_loss(&mut g, &pred, &mask_from(&gt, n, n)).unwrap();
        assert!(g.data(&loss)[0] > 0.999);
    }

    #[test]
    fn bce_matches_analytic_and_stays_finite_at_extremes() {
        let mut g = Graph::new();
        let logits = g.leaf(&Array::zeros(&[2, 2]), true);
        let gt = mask_from(&[1, 0, 1, 0], 2, 2);
        let loss = bce_loss(&mut g, &logits, &gt).unwrap();
        assert!((g.data(&loss)[0] - (2.0 as Real).ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let logits = g.leaf(&Array { shape: vec![1, 2], data: vec![50.0, -50.0] }, true);
        let gt = mask_from(&[0, 1], 1, 2);
        let loss = bce_loss(&mut g, &logits, &gt).unwrap();
        let v = g.data(&loss)[0];
        assert!(v.is_finite() && v > 49.0); // both pixels maximally wrong
        g.backward(&loss).unwrap();
        assert!(g.grad(&logits).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn class_loss_labels_assigned_proposals() {
        let mut g = Graph::new();
        let logits = g.constant(&Array::zeros(&[4]));
        let asg = Assignment { pairs: vec![(1, 0), (3, 1)] };
        let loss = class_loss(&mut g, &logits, &asg).unwrap();
        assert!((g.data(&loss)[0] - (2.0 as Real).ln()).abs() < 1e-12);

        // Confident correct predictions drive the loss toward zero.
        let mut g = Graph::new();
        let logits =
            g.constant(&Array { shape: vec![4], data: vec![-30.0, 30.0, -30.0, 30.0] });
        let loss = class_loss(&mut g, &logits, &asg).unwrap();
        assert!(g.data(&loss)[0] < 1e-9);
    }

    #[test]
    fn hungarian_frozen_examples() {
        let c = Array { shape: vec![2, 2], data: vec![1.0, 2.0, 2.0, 1.0] };
        let asg = hungarian_assign(&c).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_total(&c, &asg), 2.0);

        // Identity plus large off-diagonal: diagonal assignment.
        let n = 4;
        let mut d = Array::full(&[n, n], 100.0);
        for i in 0..n {
            d.data[i * n + i] = i as Real + 1.0;
        }
        let asg = hungarian_assign(&d).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);

        // Single target: arg-min over the column.
        let c = Array { shape: vec![3, 1], data: vec![5.0, 2.0, 7.0] };
        let asg = hungarian_assign(&c).unwrap();
        assert_eq!(asg.pairs, vec![(1, 0)]);

        let bad = Array { shape: vec![1, 2], data: vec![1.0, Real::NAN] };
        assert!(hungarian_assign(&bad).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..60 {
            let n = rng.gen_range(1..=6);
            let g_n = rng.gen_range(1..=6);
            let data: Vec<Real> = (0..n * g_n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cost = Array { shape: vec![n, g_n], data };
            let fast = hungarian_assign(&cost).unwrap();
            let slow = brute_force_assign(&cost);
            assert_eq!(
                assignment_total(&cost, &fast),
                assignment_total(&cost, &slow),
                "trial {trial}: {fast:?} vs {slow:?}"
            );
            assert_eq!(fast.pairs.len(), n.min(g_n));
        }
    }

    #[test]
    fn total_loss_reduces_to_mean_assigned_bce() {
        use crate::decoder::MaskSet;
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let (h, w) = (4, 4);
        let ml_data: Vec<Real> = (0..n * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ml = g.leaf(&Array { shape: vec![n, h, w], data: ml_data }, true);
        let masks = g.sigmoid(&ml).unwrap();
        let sl = g.constant(&Array { shape: vec![n], data: vec![0.3, -0.2, 0.8] });
        let scores = g.sigmoid(&sl).unwrap();
        let ms = MaskSet {
            mask_logits: ml.clone(),
            masks,
            score_logits: sl,
            scores,
        };
        let gt = vec![mask_from(&[1u8; 16], 4, 4)];
        let w_only_b = LossWeights { cls: 0.0, mask: 1.0, b: 1.0, d: 0.0 };
        let (_, report) = total_loss(&mut g, None, &[], &ms, &gt, &w_only_b).unwrap();
        // One target: the assigned pair minimizes BCE+0 cost; total = L_b.
        assert_eq!(report.assignment.pairs.len(), 1);
        assert!((report.total - report.l_b).abs() < 1e-12);
        assert_eq!(report.l_t, 0.0);

        // Zero targets rejected.
        let mut g2 = Graph::new();
        let ml = g2.leaf(&Array::zeros(&[1, 2, 2]), true);
        let masks = g2.sigmoid(&ml).unwrap();
        let sl = g2.constant(&Array::zeros(&[1]));
        let scores = g2.sigmoid(&sl).unwrap();
        let ms = MaskSet { mask_logits: ml, masks, score_logits: sl, scores };
        assert!(total_loss(&mut g2, None, &[], &ms, &[], &LossWeights::default()).is_err());
    }

    #[test]
    fn total_loss_gradient_checks_on_a_toy_instance() {
        // N = 4 proposals, single target, 8x8: perturb the raw logits leaf.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let (h, w) = (8, 8);
        let base: Vec<Real> = (0..n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let score_base: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gt_bits: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        let gt = vec![mask_from(&gt_bits, h, w)];

        let eval = |ml_data: &[Real], sl_data: &[Real], want_grad: bool| {
            let mut g = Graph::new();
            let ml = g.leaf(&Array { shape: vec![n, h, w], data: ml_data.to_vec() }, true);
            let sl = g.leaf(&Array { shape: vec![n], data: sl_data.to_vec() }, true);
            let masks = g.sigmoid(&ml).unwrap();
            let scores = g.sigmoid(&sl).unwrap();
            let ms = crate::decoder::MaskSet {
                mask_logits: ml.clone(),
                masks,
                score_logits: sl.clone(),
                scores,
            };
            let (total, _) =
                total_loss(&mut g, None, &[], &ms, &gt, &LossWeights::default()).unwrap();
            let v = g.data(&total)[0];
            if !want_grad {
                return (v, Vec::new(), Vec::new());
            }
            g.backward(&total).unwrap();
            (
                v,
                g.grad(&ml).unwrap().to_vec(),
                g.grad(&sl).unwrap().to_vec(),
            )
        };

        let (_, gml, gsl) = eval(&base, &score_base, true);
        let hstep = 1e-5;
        let mut worst: Real = 0.0;
        for k in 0..24 {
            let e = (k * 13) % (n * h * w);
            let mut up = base.clone();
            up[e] += hstep;
            let mut dn = base.clone();
            dn[e] -= hstep;
            let fd = (eval(&up, &score_base, false).0 - eval(&dn, &score_base, false).0)
                / (2.0 * hstep);
            worst = worst.max((fd - gml[e]).abs() / gml[e].abs().max(1.0));
        }
        for e in 0..n {
            let mut up = score_base.to_vec();
            up[e] += hstep;
            let mut dn = score_base.to_vec();
            dn[e] -= hstep;
            let fd = (eval(&base, &up, false).0 - eval(&base, &dn, false).0) / (2.0 * hstep);
            worst = worst.max((fd - gsl[e]).abs() / gsl[e].abs().max(1.0));
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }
}

//! Segmentation metrics: IoU variants for images, region similarity J and
//! contour accuracy F for videos. All functions are pure and exact: the
//! efficient paths must agree bitwise with naive pixel-loop oracles.

use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Mask { h, w, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn same_shape(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![self.h, self.w],
                rhs: vec![other.h, other.w],
            });
        }
        Ok(())
    }
}

/// Per-sample pixel counts from which both cIoU and gIoU reduce.
#[derive(Debug, Clone, Copy)]
pub struct IouRecord {
    pub intersection: usize,
    pub union: usize,
}

pub fn intersection_union(pred: &Mask, gt: &Mask) -> Result<IouRecord> {
    pred.same_shape(gt, "intersection_union")?;
    let mut i = 0;
    let mut u = 0;
    for (a, b) in pred.data.iter().zip(gt.data.iter()) {
        if *a && *b {
            i += 1;
        }
        if *a || *b {
            u += 1;
        }
    }
    Ok(IouRecord { intersection: i, union: u })
}

/// Intersection over union; two empty masks score 1 (vacuous truth).
pub fn iou(pred: &Mask, gt: &Mask) -> Result<Real> {
    let r = intersection_union(pred, gt)?;
    Ok(record_iou(&r))
}

fn record_iou(r: &IouRecord) -> Real {
    if r.union == 0 {
        1.0
    } else {
        r.intersection as Real / r.union as Real
    }
}

/// Cumulative IoU: sum of intersections over sum of unions.
pub fn ciou(records: &[IouRecord]) -> Result<Real> {
    if records.is_empty() {
        return Err(Error::invalid("ciou", "empty record set"));
    }
    let i: usize = records.iter().map(|r| r.intersection).sum();
    let u: usize = records.iter().map(|r| r.union).sum();
    Ok(if u == 0 { 1.0 } else { i as Real / u as Real })
}

/// Generalized IoU: mean of per-sample IoU values.
pub fn giou(records: &[IouRecord]) -> Result<Real> {
    if records.is_empty() {
        return Err(Error::invalid("giou", "empty record set"));
    }
    Ok(records.iter().map(record_iou).sum::<Real>() / records.len() as Real)
}

/// Boundary pixels: mask pixels with at least one 4-neighbor outside the
/// mask; the frame border counts as outside.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.h, mask.w);
    Mask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        y == 0
            || x == 0
            || y == h - 1
            || x == w - 1
            || !mask.get(y - 1, x)
            || !mask.get(y + 1, x)
            || !mask.get(y, x - 1)
            || !mask.get(y, x + 1)
    })
}

/// Contour accuracy F: precision/recall of boundary pixels matched within
/// Chebyshev distance <= tolerance_px, F = 2PR/(P+R).
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance_px: usize) -> Result<Real> {
    pred.same_shape(gt, "boundary_f")?;
    let pb = boundary(pred);
    let gb = boundary(gt);
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    // a box dilation by `tol` is exactly the Chebyshev-ball membership test
    let gd = dilate_chebyshev(&gb, tolerance_px);
    let pd = dilate_chebyshev(&pb, tolerance_px);
    let matched_p = pb.data.iter().zip(gd.data.iter()).filter(|(a, b)| **a && **b).count();
    let matched_g = gb.data.iter().zip(pd.data.iter()).filter(|(a, b)| **a && **b).count();
    let precision = matched_p as Real / np as Real;
    let recall = matched_g as Real / ng as Real;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn dilate_chebyshev(mask: &Mask, tol: usize) -> Mask {
    if tol == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.h, mask.w);
    // two separable passes: horizontal then vertical running window
    let mut horiz = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(tol);
            let hi = (x + tol).min(w - 1);
            horiz.data[y * w + x] = (lo..=hi).any(|xx| mask.get(y, xx));
        }
    }
    Mask::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(tol);
        let hi = (y + tol).min(h - 1);
        (lo..=hi).any(|yy| horiz.get(yy, x))
    })
}

/// Default contour tolerance from the image diagonal.
pub fn default_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as Real).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy)]
pub struct JF {
    pub j: Real,
    pub f: Real,
    pub jf: Real,
}

/// Video metrics over a clip: J = mean per-frame IoU, F = mean per-frame
/// boundary F at the default tolerance, J&F = their mean.
pub fn j_and_f(frames: &[(Mask, Mask)]) -> Result<JF> {
    if frames.is_empty() {
        return Err(Error::invalid("j_and_f", "empty frame sequence"));
    }
    let mut j = 0.0;
    let mut f = 0.0;
    for (pred, gt) in frames {
        j += iou(pred, gt)?;
        f += boundary_f(pred, gt, default_tolerance(gt.h, gt.w))?;
    }
    j /= frames.len() as Real;
    f /= frames.len() as Real;
    Ok(JF { j, f, jf: 0.5 * (j + f) })
}

use std::sync::atomic::{AtomicU64, Ordering};

use super::{numel, strides, Array};
use crate::{Error, Real, Result};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle into a graph. Cheap to clone; carries its shape so callers can
/// size follow-up ops without a graph lookup.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) gid: u64,
    pub(crate) id: usize,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<Real>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Scale(usize, Real),
    AddScalar(usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_shared: bool,
        b_shared: bool,
    },
    Reshape(usize),
    Transpose {
        x: usize,
        perm: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        arg: Vec<usize>,
    },
    SumAll(usize),
    MeanAll(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<Real>,
        rstd: Vec<Real>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
    BceLogits {
        logits: usize,
        targets: Vec<Real>,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        cols: Vec<Real>,
    },
    Upsample2x {
        x: usize,
        h: usize,
        w: usize,
        c: usize,
    },
}

/// Append-only tape. One training step = one graph; `backward` may run once.
pub struct Graph {
    gid: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    spent: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            gid: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Real>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape: shape.clone(), data, needs_grad, op });
        Tensor { gid: self.gid, id, shape }
    }

    fn check(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.gid != self.gid {
            return Err(Error::invalid(op, "tensor belongs to a different graph"));
        }
        debug_assert!(t.id < self.nodes.len());
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn data(&self, t: &Tensor) -> &[Real] {
        assert_eq!(t.gid, self.gid, "tensor belongs to a different graph");
        &self.nodes[t.id].data
    }

    pub fn to_array(&self, t: &Tensor) -> Array {
        Array { shape: t.shape.clone(), data: self.data(t).to_vec() }
    }

    pub fn scalar(&self, t: &Tensor) -> Result<Real> {
        if t.numel() != 1 {
            return Err(Error::invalid("scalar", format!("shape {:?} is not scalar", t.shape)));
        }
        Ok(self.data(t)[0])
    }

    /// Gradient of the loss w.r.t. `t`, available after `backward`.
    pub fn grad(&self, t: &Tensor) -> Option<&[Real]> {
        assert_eq!(t.gid, self.gid, "tensor belongs to a different graph");
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, a: &Array, needs_grad: bool) -> Tensor {
        self.push(a.shape.clone(), a.data.clone(), needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, a: &Array) -> Tensor {
        self.leaf(a, false)
    }

    // ── elementwise binary with broadcasting ────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a2, b2| Op::Add(a2, b2))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a2, b2| Op::Sub(a2, b2))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a2, b2| Op::Mul(a2, b2))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, |a2, b2| Op::Div(a2, b2))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(Real, Real) -> Real,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check(name, a)?;
        self.check(name, b)?;
        let out_shape = broadcast_shape(&a.shape, &b.shape).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })?;
        let (ad, bd) = (&self.nodes[a.id].data, &self.nodes[b.id].data);
        let mut out = vec![0.0; numel(&out_shape)];
        if a.shape == b.shape {
            for (o, (x, y)) in out.iter_mut().zip(ad.iter().zip(bd.iter())) {
                *o = f(*x, *y);
            }
        } else {
            bcast_walk(&out_shape, &a.shape, &b.shape, |io, ia, ib| {
                out[io] = f(ad[ia], bd[ib]);
            });
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out_shape, out, needs, op(a.id, b.id)))
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("neg", x, |v| -v, Op::Neg)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("exp", x, |v| v.exp(), Op::Exp)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("log", x, |v| v.ln(), Op::Log)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("gelu", x, gelu_fwd, Op::Gelu)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn scale(&mut self, x: &Tensor, c: Real) -> Result<Tensor> {
        self.unary("scale", x, |v| c * v, |id| Op::Scale(id, c))
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: Real) -> Result<Tensor> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: &Tensor,
        f: impl Fn(Real) -> Real,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        self.check(name, x)?;
        let data = self.nodes[x.id].data.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x.id);
        Ok(self.push(x.shape.clone(), data, needs, op(x.id)))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product. Ranks >= 2; leading (batch) extents must be
    /// equal, or one operand may be rank 2 and is shared across the batch.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (k2, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ab = &a.shape[..a.rank() - 2];
        let bb = &b.shape[..b.rank() - 2];
        let (batch_shape, a_shared, b_shared) = if ab == bb {
            (ab.to_vec(), false, false)
        } else if ab.is_empty() {
            (bb.to_vec(), true, false)
        } else if bb.is_empty() {
            (ab.to_vec(), false, true)
        } else {
            return Err(mismatch());
        };
        let batch = numel(&batch_shape);
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = &self.nodes[a.id].data;
            let bd = &self.nodes[b.id].data;
            for bi in 0..batch {
                let ao = if a_shared { 0 } else { bi * m * k };
                let bo = if b_shared { 0 } else { bi * k * n };
                mm_nn(&ad[ao..ao + m * k], &bd[bo..bo + k * n], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out_shape, out, needs, Op::Matmul { a: a.id, b: b.id, batch, m, k, n, a_shared, b_shared }))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check("reshape", x)?;
        if numel(shape) != x.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: x.shape.clone(), rhs: shape.to_vec() });
        }
        let data = self.nodes[x.id].data.clone();
        let needs = self.needs(x.id);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape(x.id)))
    }

    pub fn transpose(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.check("transpose", x)?;
        let r = x.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("transpose", format!("bad permutation {:?} for rank {}", perm, r)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
        let data = permute(&self.nodes[x.id].data, &x.shape, perm);
        let needs = self.needs(x.id);
        Ok(self.push(out_shape, data, needs, Op::Transpose { x: x.id, perm: perm.to_vec() }))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check("slice", x)?;
        if axis >= x.rank() || start + len > x.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("axis {} range {}..{} out of bounds for {:?}", axis, start, start + len, x.shape),
            ));
        }
        let mut out_shape = x.shape.clone();
        out_shape[axis] = len;
        let st = strides(&x.shape);
        let outer: usize = x.shape[..axis].iter().product();
        let inner = st[axis];
        let xd = &self.nodes[x.id].data;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * x.shape[axis] * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let needs = self.needs(x.id);
        Ok(self.push(out_shape, out, needs, Op::Slice { x: x.id, axis, start, len }))
    }

    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        for x in xs {
            self.check("concat", x)?;
        }
        let r = xs[0].rank();
        if axis >= r {
            return Err(Error::invalid("concat", format!("axis {} out of range for rank {}", axis, r)));
        }
        for x in &xs[1..] {
            let same = x.rank() == r
                && x.shape.iter().enumerate().all(|(d, &e)| d == axis || e == xs[0].shape[d]);
            if !same {
                return Err(Error::ShapeMismatch { op: "concat", lhs: xs[0].shape.clone(), rhs: x.shape.clone() });
            }
        }
        let mut out_shape = xs[0].shape.clone();
        out_shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for x in xs {
                let len = x.shape[axis] * inner;
                let xd = &self.nodes[x.id].data;
                out.extend_from_slice(&xd[o * len..(o + 1) * len]);
            }
        }
        let needs = xs.iter().any(|x| self.needs(x.id));
        let ids = xs.iter().map(|x| x.id).collect();
        Ok(self.push(out_shape, out, needs, Op::Concat { xs: ids, axis }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce("sum_axis", x, axis, Reduce::Sum)
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce("mean_axis", x, axis, Reduce::Mean)
    }

    /// Max along an axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce("max_axis", x, axis, Reduce::Max)
    }

    fn reduce(&mut self, name: &'static str, x: &Tensor, axis: usize, kind: Reduce) -> Result<Tensor> {
        self.check(name, x)?;
        if axis >= x.rank() {
            return Err(Error::invalid(name, format!("axis {} out of range for {:?}", axis, x.shape)));
        }
        let alen = x.shape[axis];
        if alen == 0 {
            return Err(Error::invalid(name, "cannot reduce an empty axis"));
        }
        let mut out_shape = x.shape.clone();
        out_shape.remove(axis);
        let outer: usize = x.shape[..axis].iter().product();
        let inner: usize = x.shape[axis + 1..].iter().product();
        let xd = &self.nodes[x.id].data;
        let mut out = vec![0.0; outer * inner];
        let mut arg = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut s = 0.0;
                        for a in 0..alen {
                            s += xd[(o * alen + a) * inner + i];
                        }
                        if matches!(kind, Reduce::Mean) {
                            s /= alen as Real;
                        }
                        out[o * inner + i] = s;
                    }
                }
            }
            Reduce::Max => {
                arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xd[o * alen * inner + i];
                        let mut bi = 0;
                        for a in 1..alen {
                            let v = xd[(o * alen + a) * inner + i];
                            if v > best {
                                best = v;
                                bi = a;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = bi;
                    }
                }
            }
        }
        let needs = self.needs(x.id);
        let op = match kind {
            Reduce::Sum => Op::SumAxis { x: x.id, axis },
            Reduce::Mean => Op::MeanAxis { x: x.id, axis },
            Reduce::Max => Op::MaxAxis { x: x.id, axis, arg },
        };
        Ok(self.push(out_shape, out, needs, op))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check("sum_all", x)?;
        let s: Real = self.nodes[x.id].data.iter().sum();
        let needs = self.needs(x.id);
        Ok(self.push(vec![], vec![s], needs, Op::SumAll(x.id)))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check("mean_all", x)?;
        let n = x.numel();
        if n == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let s: Real = self.nodes[x.id].data.iter().sum();
        let needs = self.needs(x.id);
        Ok(self.push(vec![], vec![s / n as Real], needs, Op::MeanAll(x.id)))
    }

    // ── fused neural ops ────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.check("softmax", x)?;
        if axis >= x.rank() {
            return Err(Error::invalid("softmax", format!("axis {} out of range for {:?}", axis, x.shape)));
        }
        let alen = x.shape[axis];
        let outer: usize = x.shape[..axis].iter().product();
        let inner: usize = x.shape[axis + 1..].iter().product();
        let xd = &self.nodes[x.id].data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * alen + a) * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for a in 0..alen {
                    mx = mx.max(xd[idx(a)]);
                }
                let mut z = 0.0;
                for a in 0..alen {
                    let e = (xd[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..alen {
                    out[idx(a)] /= z;
                }
            }
        }
        let needs = self.needs(x.id);
        Ok(self.push(x.shape.clone(), out, needs, Op::Softmax { x: x.id, axis }))
    }

    /// Layer norm over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: Real) -> Result<Tensor> {
        self.check("layer_norm", x)?;
        self.check("layer_norm", gain)?;
        self.check("layer_norm", bias)?;
        let d = *x.shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank 0 input"))?;
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: x.shape.clone(), rhs: gain.shape.clone() });
        }
        let rows = x.numel() / d;
        let (xd, gd, bd) = (&self.nodes[x.id].data, &self.nodes[gain.id].data, &self.nodes[bias.id].data);
        let mut out = vec![0.0; xd.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu: Real = row.iter().sum::<Real>() / d as Real;
            let var: Real = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = gd[j] * (row[j] - mu) * rs + bd[j];
            }
        }
        let needs = self.needs(x.id) || self.needs(gain.id) || self.needs(bias.id);
        Ok(self.push(
            x.shape.clone(),
            out,
            needs,
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, mean, rstd },
        ))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.check("embed", table)?;
        if table.rank() != 2 {
            return Err(Error::invalid("embed", format!("table must be rank 2, got {:?}", table.shape)));
        }
        let (rows, d) = (table.shape[0], table.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("embed", format!("id {} out of range {}", bad, rows)));
        }
        let td = &self.nodes[table.id].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table.id);
        Ok(self.push(vec![ids.len(), d], out, needs, Op::Embed { table: table.id, ids: ids.to_vec() }))
    }

    /// Mean cross-entropy of rows of `logits` against target ids,
    /// computed through a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        self.check("cross_entropy", logits)?;
        if logits.rank() != 2 {
            return Err(Error::invalid("cross_entropy", format!("logits must be rank 2, got {:?}", logits.shape)));
        }
        let (n, v) = (logits.shape[0], logits.shape[1]);
        if targets.len() != n {
            return Err(Error::invalid("cross_entropy", format!("{} rows vs {} targets", n, targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid("cross_entropy", format!("target {} out of range {}", bad, v)));
        }
        let ld = &self.nodes[logits.id].data;
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[r * v + j] /= z;
            }
            loss += z.ln() + mx - row[targets[r]];
        }
        loss /= n as Real;
        let needs = self.needs(logits.id);
        Ok(self.push(vec![], vec![loss], needs, Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), probs }))
    }

    /// Elementwise binary cross-entropy from logits, in the stable form
    /// max(z,0) - z*t + ln(1 + exp(-|z|)). Finite for any logit magnitude.
    pub fn bce_logits(&mut self, logits: &Tensor, targets: &Array) -> Result<Tensor> {
        self.check("bce_logits", logits)?;
        if logits.shape != targets.shape {
            return Err(Error::ShapeMismatch {
                op: "bce_logits",
                lhs: logits.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let ld = &self.nodes[logits.id].data;
        let out: Vec<Real> = ld
            .iter()
            .zip(targets.data.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let needs = self.needs(logits.id);
        Ok(self.push(
            logits.shape.clone(),
            out,
            needs,
            Op::BceLogits { logits: logits.id, targets: targets.data.clone() },
        ))
    }

    /// 3x3 convolution, stride 1, clamp-to-edge padding, channels-last.
    /// x: [h, w, cin], weight: [3, 3, cin, cout], bias: [cout].
    pub fn conv3x3(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check("conv3x3", x)?;
        self.check("conv3x3", w)?;
        self.check("conv3x3", b)?;
        if x.rank() != 3 {
            return Err(Error::invalid("conv3x3", format!("input must be [h,w,c], got {:?}", x.shape)));
        }
        let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
        if w.shape != [3, 3, cin, w.shape[3]] || w.rank() != 4 {
            return Err(Error::ShapeMismatch { op: "conv3x3", lhs: x.shape.clone(), rhs: w.shape.clone() });
        }
        let cout = w.shape[3];
        if b.shape != [cout] {
            return Err(Error::ShapeMismatch { op: "conv3x3", lhs: w.shape.clone(), rhs: b.shape.clone() });
        }
        let xd = &self.nodes[x.id].data;
        let cols = im2col3x3(xd, h, wd, cin);
        let mut out = vec![0.0; h * wd * cout];
        mm_nn(&cols, &self.nodes[w.id].data, &mut out, h * wd, 9 * cin, cout);
        let bd = &self.nodes[b.id].data;
        for px in 0..h * wd {
            for co in 0..cout {
                out[px * cout + co] += bd[co];
            }
        }
        let needs = self.needs(x.id) || self.needs(w.id) || self.needs(b.id);
        Ok(self.push(
            vec![h, wd, cout],
            out,
            needs,
            Op::Conv3x3 { x: x.id, w: w.id, b: b.id, h, wd, cin, cout, cols },
        ))
    }

    /// x2 bilinear upsampling (half-pixel centers, edges clamped), channels-last.
    pub fn upsample2x(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check("upsample2x", x)?;
        if x.rank() != 3 {
            return Err(Error::invalid("upsample2x", format!("input must be [h,w,c], got {:?}", x.shape)));
        }
        let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = &self.nodes[x.id].data;
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            let (y0, y1, wy) = lerp_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx) = lerp_taps(ox, w);
                let o = (oy * ow + ox) * c;
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    out[o + ch] = (1.0 - wy) * ((1.0 - wx) * xd[p00 + ch] + wx * xd[p01 + ch])
                        + wy * ((1.0 - wx) * xd[p10 + ch] + wx * xd[p11 + ch]);
                }
            }
        }
        let needs = self.needs(x.id);
        Ok(self.push(vec![oh, ow, c], out, needs, Op::Upsample2x { x: x.id, h, w, c }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// errors. Gradients accumulate additively where a node fans out.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        self.check("backward", loss)?;
        if self.spent {
            return Err(Error::BackwardTwice);
        }
        self.spent = true;
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        let n = self.nodes.len();
        self.grads = Vec::new();
        self.grads.resize_with(n, || None);
        self.grads[loss.id] = Some(vec![1.0]);

        let Graph { nodes, grads, .. } = self;
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, grads, id, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

enum Reduce {
    Sum,
    Mean,
    Max,
}

// ── backward dispatch ───────────────────────────────────────────────────

fn acc<'a>(grads: &'a mut [Option<Vec<Real>>], nodes: &[Node], id: usize) -> &'a mut [Real] {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()])
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<Real>>], id: usize, g: &[Real]) {
    let needs = |i: usize| nodes[i].needs_grad;
    let out_shape = &nodes[id].shape;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            if needs(a) {
                let xs = nodes[a].shape.clone();
                acc_reduce(acc(grads, nodes, a), &xs, g, out_shape, 1.0);
            }
            if needs(b) {
                let xs = nodes[b].shape.clone();
                acc_reduce(acc(grads, nodes, b), &xs, g, out_shape, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                let xs = nodes[*a].shape.clone();
                acc_reduce(acc(grads, nodes, *a), &xs, g, out_shape, 1.0);
            }
            if needs(*b) {
                let xs = nodes[*b].shape.clone();
                acc_reduce(acc(grads, nodes, *b), &xs, g, out_shape, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if needs(a) {
                let (ash, bsh) = (nodes[a].shape.clone(), nodes[b].shape.clone());
                let bd = &nodes[b].data;
                let da = acc(grads, nodes, a);
                bcast_walk(out_shape, &ash, &bsh, |io, ia, ib| da[ia] += g[io] * bd[ib]);
            }
            if needs(b) {
                let (ash, bsh) = (nodes[a].shape.clone(), nodes[b].shape.clone());
                let ad = &nodes[a].data;
                let db = acc(grads, nodes, b);
                bcast_walk(out_shape, &ash, &bsh, |io, ia, ib| db[ib] += g[io] * ad[ia]);
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            if needs(a) {
                let (ash, bsh) = (nodes[a].shape.clone(), nodes[b].shape.clone());
                let bd = &nodes[b].data;
                let da = acc(grads, nodes, a);
                bcast_walk(out_shape, &ash, &bsh, |io, ia, ib| da[ia] += g[io] / bd[ib]);
            }
            if needs(b) {
                let (ash, bsh) = (nodes[a].shape.clone(), nodes[b].shape.clone());
                let out = &nodes[id].data;
                let bd = &nodes[b].data;
                let db = acc(grads, nodes, b);
                bcast_walk(out_shape, &ash, &bsh, |io, _ia, ib| db[ib] -= g[io] * out[io] / bd[ib]);
            }
        }
        Op::Neg(x) => {
            if needs(*x) {
                let dx = acc(grads, nodes, *x);
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Exp(x) => {
            if needs(*x) {
                let y = &nodes[id].data;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(x) => {
            if needs(*x) {
                let xd = &nodes[*x].data;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] / xd[i];
                }
            }
        }
        Op::Relu(x) => {
            if needs(*x) {
                let xd = &nodes[*x].data;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if needs(*x) {
                let xd = &nodes[*x].data;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_grad(xd[i]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if needs(*x) {
                let y = &nodes[id].data;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Scale(x, c) => {
            if needs(*x) {
                let c = *c;
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += c * g[i];
                }
            }
        }
        Op::AddScalar(x) => {
            if needs(*x) {
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }
        }
        Op::Matmul { a, b, batch, m, k, n, a_shared, b_shared } => {
            let (a, b) = (*a, *b);
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if needs(a) {
                let bd = &nodes[b].data;
                let da = acc(grads, nodes, a);
                for bi in 0..batch {
                    let ao = if *a_shared { 0 } else { bi * m * k };
                    let bo = if *b_shared { 0 } else { bi * k * n };
                    mm_nt(&g[bi * m * n..(bi + 1) * m * n], &bd[bo..bo + k * n], &mut da[ao..ao + m * k], m, n, k);
                }
            }
            if needs(b) {
                let ad = &nodes[a].data;
                let db = acc(grads, nodes, b);
                for bi in 0..batch {
                    let ao = if *a_shared { 0 } else { bi * m * k };
                    let bo = if *b_shared { 0 } else { bi * k * n };
                    mm_tn(&ad[ao..ao + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut db[bo..bo + k * n], m, k, n);
                }
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                let dx = acc(grads, nodes, *x);
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }
        }
        Op::Transpose { x, perm } => {
            if needs(*x) {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute(g, out_shape, &inv);
                let dx = acc(grads, nodes, *x);
                for i in 0..back.len() {
                    dx[i] += back[i];
                }
            }
        }
        Op::Slice { x, axis, start, len } => {
            if needs(*x) {
                let xs = nodes[*x].shape.clone();
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let dx = acc(grads, nodes, *x);
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * xs[*axis] * inner + start * inner;
                    for i in 0..len * inner {
                        dx[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &x in xs {
                let alen = nodes[x].shape[*axis];
                if needs(x) {
                    let dx = acc(grads, nodes, x);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * alen * inner;
                        for i in 0..alen * inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                }
                offset += alen;
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            if needs(*x) {
                let xs = nodes[*x].shape.clone();
                let alen = xs[*axis];
                let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) { 1.0 / alen as Real } else { 1.0 };
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let dx = acc(grads, nodes, *x);
                for o in 0..outer {
                    for a in 0..alen {
                        for i in 0..inner {
                            dx[(o * alen + a) * inner + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::MaxAxis { x, axis, arg } => {
            if needs(*x) {
                let xs = nodes[*x].shape.clone();
                let alen = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let dx = acc(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let a = arg[o * inner + i];
                        dx[(o * alen + a) * inner + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if needs(*x) {
                let gv = g[0];
                let dx = acc(grads, nodes, *x);
                for d in dx.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::MeanAll(x) => {
            if needs(*x) {
                let gv = g[0] / nodes[*x].data.len() as Real;
                let dx = acc(grads, nodes, *x);
                for d in dx.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::Softmax { x, axis } => {
            if needs(*x) {
                let y = &nodes[id].data;
                let alen = out_shape[*axis];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let dx = acc(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * alen + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..alen {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        for a in 0..alen {
                            dx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let d = nodes[gain].data.len();
            let rows = nodes[x].data.len() / d;
            if needs(x) {
                let xd = &nodes[x].data;
                let gd = &nodes[gain].data;
                let dx = acc(grads, nodes, x);
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        let dxh = grow[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xhat;
                    }
                    m1 /= d as Real;
                    m2 /= d as Real;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        let dxh = grow[j] * gd[j];
                        dx[r * d + j] += rs * (dxh - m1 - xhat * m2);
                    }
                }
            }
            if needs(gain) {
                let xd = &nodes[x].data;
                let dg = acc(grads, nodes, gain);
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..d {
                        dg[j] += g[r * d + j] * (xd[r * d + j] - mu) * rs;
                    }
                }
            }
            if needs(bias) {
                let db = acc(grads, nodes, bias);
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            if needs(*table) {
                let d = nodes[*table].shape[1];
                let dt = acc(grads, nodes, *table);
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if needs(*logits) {
                let n = targets.len();
                let v = nodes[*logits].shape[1];
                let scale = g[0] / n as Real;
                let dl = acc(grads, nodes, *logits);
                for r in 0..n {
                    for j in 0..v {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Op::BceLogits { logits, targets } => {
            if needs(*logits) {
                let zd = &nodes[*logits].data;
                let dl = acc(grads, nodes, *logits);
                for i in 0..g.len() {
                    dl[i] += g[i] * (sigmoid(zd[i]) - targets[i]);
                }
            }
        }
        Op::Conv3x3 { x, w, b, h, wd, cin, cout, cols } => {
            let (x, w, b) = (*x, *w, *b);
            let (h, wd, cin, cout) = (*h, *wd, *cin, *cout);
            let px = h * wd;
            if needs(w) {
                let dw = acc(grads, nodes, w);
                mm_tn(cols, g, dw, px, 9 * cin, cout);
            }
            if needs(b) {
                let db = acc(grads, nodes, b);
                for p in 0..px {
                    for co in 0..cout {
                        db[co] += g[p * cout + co];
                    }
                }
            }
            if needs(x) {
                let wd_data = &nodes[w].data;
                let mut dcols = vec![0.0; px * 9 * cin];
                mm_nt(g, wd_data, &mut dcols, px, cout, 9 * cin);
                let dx = acc(grads, nodes, x);
                col2im3x3(&dcols, dx, h, wd, cin);
            }
        }
        Op::Upsample2x { x, h, w, c } => {
            if needs(*x) {
                let (h, w, c) = (*h, *w, *c);
                let (oh, ow) = (2 * h, 2 * w);
                let dx = acc(grads, nodes, *x);
                for oy in 0..oh {
                    let (y0, y1, wy) = lerp_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = lerp_taps(ox, w);
                        let o = (oy * ow + ox) * c;
                        for ch in 0..c {
                            let gv = g[o + ch];
                            dx[(y0 * w + x0) * c + ch] += (1.0 - wy) * (1.0 - wx) * gv;
                            dx[(y0 * w + x1) * c + ch] += (1.0 - wy) * wx * gv;
                            dx[(y1 * w + x0) * c + ch] += wy * (1.0 - wx) * gv;
                            dx[(y1 * w + x1) * c + ch] += wy * wx * gv;
                        }
                    }
                }
            }
        }
    }
}

// ── scalar math ─────────────────────────────────────────────────────────

pub(crate) fn sigmoid(z: Real) -> Real {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

fn gelu_fwd(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── dense kernels ───────────────────────────────────────────────────────
// All kernels accumulate into `out` so backward reuses them directly.

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (dot products of rows)
fn mm_nt(a: &[Real], b: &[Real], out: &mut [Real], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            out[i * k + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ── broadcasting ────────────────────────────────────────────────────────

/// Right-aligned broadcast: each extent pair must match or one side is 1
/// (missing leading extents count as 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for d in 0..r {
        let ae = if d < r - a.len() { 1 } else { a[d - (r - a.len())] };
        let be = if d < r - b.len() { 1 } else { b[d - (r - b.len())] };
        out[d] = if ae == be {
            ae
        } else if ae == 1 {
            be
        } else if be == 1 {
            ae
        } else {
            return None;
        };
    }
    Some(out)
}

/// Walk every element of the broadcast output, yielding flat offsets into
/// the output and both (possibly broadcast) inputs. Row-major order.
fn bcast_walk(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out_shape.len();
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let pad_strides = |shape: &[usize]| -> Vec<usize> {
        let own = strides(shape);
        let mut s = vec![0; r];
        let off = r - shape.len();
        for d in 0..shape.len() {
            s[off + d] = if shape[d] == 1 && out_shape[off + d] != 1 { 0 } else { own[d] };
        }
        s
    };
    let sa = pad_strides(a_shape);
    let sb = pad_strides(b_shape);
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..total {
        f(io, ia, ib);
        // odometer increment from the innermost axis
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// dst (shape `dst_shape`) += scale * reduce(g over broadcast axes).
fn acc_reduce(dst: &mut [Real], dst_shape: &[usize], g: &[Real], out_shape: &[usize], scale: Real) {
    if dst_shape == out_shape {
        for i in 0..g.len() {
            dst[i] += scale * g[i];
        }
        return;
    }
    bcast_walk(out_shape, dst_shape, &[], |io, ia, _| dst[ia] += scale * g[io]);
}

fn permute(data: &[Real], shape: &[usize], perm: &[usize]) -> Vec<Real> {
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    // walk the output in row-major order; src offset follows the permuted strides
    let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..r).rev() {
            idx[d] += 1;
            src += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= perm_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

// ── conv helpers ────────────────────────────────────────────────────────

/// Patch extraction for a 3x3 window with clamp-to-edge padding.
/// Output layout: [h*w, 9*cin], column order (ky, kx, c).
fn im2col3x3(x: &[Real], h: usize, w: usize, cin: usize) -> Vec<Real> {
    let mut cols = vec![0.0; h * w * 9 * cin];
    let mut o = 0;
    for y in 0..h {
        for xpix in 0..w {
            for ky in 0..3usize {
                let sy = (y + ky).saturating_sub(1).min(h - 1);
                for kx in 0..3usize {
                    let sx = (xpix + kx).saturating_sub(1).min(w - 1);
                    let src = (sy * w + sx) * cin;
                    cols[o..o + cin].copy_from_slice(&x[src..src + cin]);
                    o += cin;
                }
            }
        }
    }
    cols
}

/// Transpose of im2col3x3: scatter-add column gradients back to pixels.
fn col2im3x3(dcols: &[Real], dx: &mut [Real], h: usize, w: usize, cin: usize) {
    let mut o = 0;
    for y in 0..h {
        for xpix in 0..w {
            for ky in 0..3usize {
                let sy = (y + ky).saturating_sub(1).min(h - 1);
                for kx in 0..3usize {
                    let sx = (xpix + kx).saturating_sub(1).min(w - 1);
                    let dst = (sy * w + sx) * cin;
                    for c in 0..cin {
                        dx[dst + c] += dcols[o + c];
                    }
                    o += cin;
                }
            }
        }
    }
}

/// Source taps and weight for x2 bilinear upsampling with half-pixel
/// centers: src = (dst + 0.5)/2 - 0.5, clamped to the edge.
fn lerp_taps(o: usize, len: usize) -> (usize, usize, Real) {
    let s = (o as Real + 0.5) * 0.5 - 0.5;
    let f = s.floor();
    let t = s - f;
    let i0 = if f < 0.0 { 0 } else { (f as usize).min(len - 1) };
    let i1 = (i0 + 1).min(len - 1);
    if f < 0.0 {
        (0, 0, 0.0) // clamped below: both taps at 0, weight irrelevant
    } else {
        (i0, i1, t)
    }
}

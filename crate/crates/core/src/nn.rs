//! Parameter store and reusable neural blocks: linear maps, layer norm,
//! multi-head attention (self and cross, optional LoRA on query/value),
//! feed-forward layers, frozen patch encoders, and sinusoidal positional
//! encodings.
//!
//! Parameters live in a [`ParamStore`] keyed by insertion order; a [`Fwd`]
//! context binds each one into the step's graph at most once, so fan-out
//! gradients accumulate correctly. Frozen entries become no-grad leaves and
//! are skipped by the optimizer.

use crate::tensor::{Array, Graph, Tensor};
use crate::{Error, Real, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// One forward pass: owns the step graph and binds store parameters as
/// leaves on first use.
pub struct Fwd<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Tensor>>,
}

/// Gradients of one backward pass, aligned with ParamStore ids. Frozen or
/// unused parameters hold None.
pub struct Grads {
    pub by_id: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.by_id.get(id).and_then(|g| g.as_ref())
    }
}

impl<'s> Fwd<'s> {
    pub fn new(store: &'s ParamStore) -> Fwd<'s> {
        Fwd { g: Graph::new(), store, bound: vec![None; store.len()] }
    }

    /// Binds parameter `id` into the graph (cached across calls).
    pub fn p(&mut self, id: ParamId) -> Tensor {
        if let Some(t) = &self.bound[id] {
            return t.clone();
        }
        let e = self.store.entry(id);
        let t = self.g.leaf(&e.value, e.trainable);
        self.bound[id] = Some(t.clone());
        t
    }

    pub fn constant(&mut self, a: &Array) -> Tensor {
        self.g.constant(a)
    }

    /// Runs backward from `loss` and collects per-parameter gradients.
    pub fn backward(mut self, loss: &Tensor) -> Result<Grads> {
        self.g.backward(loss)?;
        let mut by_id = vec![None; self.store.len()];
        for (id, slot) in self.bound.iter().enumerate() {
            if let Some(t) = slot {
                if self.store.entry(id).trainable {
                    by_id[id] = self
                        .g
                        .grad(t)
                        .map(|g| Array { shape: t.shape.clone(), data: g.to_vec() });
                }
            }
        }
        Ok(Grads { by_id })
    }
}

pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array { shape: shape.to_vec(), data }
}

/// Uniform Xavier/Glorot for a [fan_in, fan_out] matrix.
pub fn xavier_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as Real).sqrt();
    uniform_init(rng, &[fan_in, fan_out], -limit, limit)
}

/// Affine map x[.., d_in] -> x·W + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = store.add(format!("{prefix}.w"), xavier_init(rng, d_in, d_out), true);
        let b = bias.then(|| store.add(format!("{prefix}.b"), Array::zeros(&[d_out]), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply(&self, f: &mut Fwd, x: &Tensor) -> Result<Tensor> {
        let w = self.p_w(f);
        let y = f.g.matmul(x, &w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                f.g.add(&y, &b)
            }
            None => Ok(y),
        }
    }

    fn p_w(&self, f: &mut Fwd) -> Tensor {
        f.p(self.w)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: store.add(format!("{prefix}.gain"), Array::full(&[d], 1.0), true),
            bias: store.add(format!("{prefix}.bias"), Array::zeros(&[d]), true),
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: &Tensor) -> Result<Tensor> {
        let gain = f.p(self.gain);
        let bias = f.p(self.bias);
        f.g.layer_norm(x, &gain, &bias, 1e-5)
    }
}

/// Low-rank adapter on a base projection: y = base(x) + (x·down)·up · scaling.
/// `up` starts at zero so the adapted map equals the base map exactly.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scaling: Real,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<LoraAdapter> {
        if rank >= d_in.min(d_out) {
            return Err(Error::invalid("lora", "rank must be smaller than the base dims"));
        }
        Ok(LoraAdapter {
            down: store.add(format!("{prefix}.down"), xavier_init(rng, d_in, rank), true),
            up: store.add(format!("{prefix}.up"), Array::zeros(&[rank, d_out]), true),
            rank,
            scaling: 1.0,
        })
    }

    pub fn apply(&self, f: &mut Fwd, base_out: &Tensor, x: &Tensor) -> Result<Tensor> {
        let down = f.p(self.down);
        let up = f.p(self.up);
        let low = f.g.matmul(x, &down)?;
        let delta = f.g.matmul(&low, &up)?;
        let scaled = f.g.scale(&delta, self.scaling)?;
        f.g.add(base_out, &scaled)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub d: usize,
    pub kv_dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Multi-head attention. Queries come from a [nq, d] stream, keys/values
/// from a [nk, kv_dim] stream; an optional additive mask of shape [nq, nk]
/// (0 = visible, large negative = hidden) is added to the logits.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MultiHeadAttention> {
        if cfg.heads == 0 || cfg.d % cfg.heads != 0 {
            return Err(Error::invalid("attention", "heads must divide model dim"));
        }
        Ok(MultiHeadAttention {
            cfg,
            wq: Linear::new(store, &format!("{prefix}.wq"), cfg.d, cfg.d, true, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), cfg.kv_dim, cfg.d, true, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), cfg.kv_dim, cfg.d, true, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), cfg.d, cfg.d, true, rng),
            lora_q: None,
            lora_v: None,
        })
    }

    /// Attaches rank-r adapters to the query and value projections.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.lora_q = Some(LoraAdapter::new(
            store,
            &format!("{prefix}.lora_q"),
            self.cfg.d,
            self.cfg.d,
            rank,
            rng,
        )?);
        self.lora_v = Some(LoraAdapter::new(
            store,
            &format!("{prefix}.lora_v"),
            self.cfg.kv_dim,
            self.cfg.d,
            rank,
            rng,
        )?);
        Ok(())
    }

    pub fn apply(
        &self,
        f: &mut Fwd,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Array>,
    ) -> Result<Tensor> {
        let (h, hd, d) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.d);
        let nq = q_in.shape[0];
        let nk = kv_in.shape[0];

        let mut q = self.wq.apply(f, q_in)?;
        if let Some(l) = &self.lora_q {
            q = l.apply(f, &q, q_in)?;
        }
        let k = self.wk.apply(f, kv_in)?;
        let mut v = self.wv.apply(f, kv_in)?;
        if let Some(l) = &self.lora_v {
            v = l.apply(f, &v, kv_in)?;
        }

        // [n, d] -> [heads, n, head_dim]
        let split = |f: &mut Fwd, t: &Tensor, n: usize| -> Result<Tensor> {
            let r = f.g.reshape(t, &[n, h, hd])?;
            f.g.transpose(&r, &[1, 0, 2])
        };
        let qh = split(f, &q, nq)?;
        let kh = split(f, &k, nk)?;
        let vh = split(f, &v, nk)?;

        let kt = f.g.transpose(&kh, &[0, 2, 1])?;
        let logits = f.g.matmul(&qh, &kt)?;
        let mut logits = f.g.scale(&logits, 1.0 / (hd as Real).sqrt())?;
        if let Some(m) = mask {
            if m.shape != [nq, nk] {
                return Err(Error::invalid("attention", "mask shape must be [nq, nk]"));
            }
            let m = f.constant(m);
            logits = f.g.add(&logits, &m)?;
        }
        let attn = f.g.softmax(&logits, 2)?;
        let ctx = f.g.matmul(&attn, &vh)?;
        let ctx = f.g.transpose(&ctx, &[1, 0, 2])?;
        let ctx = f.g.reshape(&ctx, &[nq, d])?;
        self.wo.apply(f, &ctx)
    }
}

/// Position-wise two-layer MLP with GELU, expansion factor 4.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), d, 4 * d, true, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), 4 * d, d, true, rng),
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: &Tensor) -> Result<Tensor> {
        let hmid = self.fc1.apply(f, x)?;
        let act = f.g.gelu(&hmid)?;
        self.fc2.apply(f, &act)
    }
}

/// Pre-norm residual self-attention + FFN layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d),
            attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.attn"),
                AttentionConfig { d, kv_dim: d, heads },
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, rng),
        })
    }

    pub fn apply(&self, f: &mut Fwd, x: &Tensor, mask: Option<&Array>) -> Result<Tensor> {
        let n = self.ln1.apply(f, x)?;
        let a = self.attn.apply(f, &n, &n, mask)?;
        let x = f.g.add(x, &a)?;
        let n = self.ln2.apply(f, &x)?;
        let m = self.ffn.apply(f, &n)?;
        f.g.add(&x, &m)
    }
}

/// Pre-norm residual cross-attention + FFN layer: queries read a fixed
/// key/value stream.
#[derive(Clone, Debug)]
pub struct CrossAttnLayer {
    pub ln_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttnLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CrossAttnLayer {
            ln_q: LayerNorm::new(store, &format!("{prefix}.ln_q"), d),
            attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.attn"),
                AttentionConfig { d, kv_dim, heads },
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, rng),
        })
    }

    pub fn apply(&self, f: &mut Fwd, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let n = self.ln_q.apply(f, q)?;
        let a = self.attn.apply(f, &n, kv, None)?;
        let q = f.g.add(q, &a)?;
        let n = self.ln2.apply(f, &q)?;
        let m = self.ffn.apply(f, &n)?;
        f.g.add(&q, &m)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PatchEncoderConfig {
    pub patch: usize,
    pub in_ch: usize,
    pub out_dim: usize,
    pub frozen: bool,
}

/// Linear patch embedding with fixed 2-D sinusoidal positions. Stands in for
/// a pretrained visual backbone; frozen after random init by default.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub cfg: PatchEncoderConfig,
    pub w: ParamId,
    pub b: ParamId,
}

impl PatchEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: PatchEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> PatchEncoder {
        let d_in = cfg.patch * cfg.patch * cfg.in_ch;
        let trainable = !cfg.frozen;
        let w = store.add(format!("{prefix}.w"), xavier_init(rng, d_in, cfg.out_dim), trainable);
        let b = store.add(format!("{prefix}.b"), Array::zeros(&[cfg.out_dim]), trainable);
        PatchEncoder { cfg, w, b }
    }

    pub fn tokens_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(Error::invalid("patch_encode", "patch size must divide frame dims"));
        }
        Ok((h / self.cfg.patch, w / self.cfg.patch))
    }

    /// frame: [H, W, C] pixel data (no gradient flows into pixels).
    pub fn apply(&self, f: &mut Fwd, frame: &Array) -> Result<Tensor> {
        if frame.shape.len() != 3 || frame.shape[2] != self.cfg.in_ch {
            return Err(Error::invalid("patch_encode", "frame must be [H, W, C]"));
        }
        let (h, w) = (frame.shape[0], frame.shape[1]);
        let (gh, gw) = self.tokens_for(h, w)?;
        let p = self.cfg.patch;
        let d_in = p * p * self.cfg.in_ch;
        let mut patches = Array::zeros(&[gh * gw, d_in]);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..self.cfg.in_ch {
                            let src = ((gy * p + py) * w + gx * p + px) * self.cfg.in_ch + c;
                            patches.data[row * d_in + (py * p + px) * self.cfg.in_ch + c] =
                                frame.data[src];
                        }
                    }
                }
            }
        }
        let x = f.constant(&patches);
        let wt = f.p(self.w);
        let bt = f.p(self.b);
        let emb = f.g.matmul(&x, &wt)?;
        let emb = f.g.add(&emb, &bt)?;
        let pe_arr = sin_pe_2d(gh, gw, self.cfg.out_dim);
        let pe = f.constant(&pe_arr);
        f.g.add(&emb, &pe)
    }
}

/// Token embedding lookup.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub d: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Embedding {
        let scale = (1.0 / d as Real).sqrt();
        let table =
            store.add(format!("{prefix}.table"), uniform_init(rng, &[vocab, d], -scale, scale), true);
        Embedding { table, d }
    }

    pub fn apply(&self, f: &mut Fwd, ids: &[usize]) -> Result<Tensor> {
        let t = f.p(self.table);
        f.g.embed(&t, ids)
    }
}

/// Standard 1-D sinusoidal encoding, [n, d].
pub fn sin_pe_1d(n: usize, d: usize) -> Array {
    let mut pe = Array::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = (10_000.0 as Real).powf(-((2 * i) as Real) / d as Real);
            let angle = pos as Real * freq;
            pe.data[pos * d + 2 * i] = angle.sin();
            pe.data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

/// 2-D sinusoidal encoding over a gh x gw grid: first half encodes row,
/// second half column. Output [gh*gw, d]; d must be divisible by 4.
pub fn sin_pe_2d(gh: usize, gw: usize, d: usize) -> Array {
    assert!(d % 4 == 0, "2-D positional encoding needs d divisible by 4");
    let half = d / 2;
    let row = sin_pe_1d(gh, half);
    let col = sin_pe_1d(gw, half);
    let mut pe = Array::zeros(&[gh * gw, d]);
    for gy in 0..gh {
        for gx in 0..gw {
            let out = (gy * gw + gx) * d;
            pe.data[out..out + half].copy_from_slice(&row.data[gy * half..(gy + 1) * half]);
            pe.data[out + half..out + d].copy_from_slice(&col.data[gx * half..(gx + 1) * half]);
        }
    }
    pe
}

/// Central-difference gradient check for store-backed blocks: compares the
/// analytic gradient of `f`'s scalar output against (f(p+h)-f(p-h))/2h on
/// every element of every trainable parameter.
pub fn grad_check_store(
    store: &mut ParamStore,
    f: impl Fn(&mut Fwd) -> Result<Tensor>,
    h: Real,
    tol: Real,
) -> Result<crate::tensor::GradCheckReport> {
    let mut fwd = Fwd::new(store);
    let loss = f(&mut fwd)?;
    let grads = fwd.backward(&loss)?;

    let eval = |store: &ParamStore| -> Result<Real> {
        let mut fwd = Fwd::new(store);
        let loss = f(&mut fwd)?;
        Ok(fwd.g.to_array(&loss).data[0])
    };

    let mut report = crate::tensor::GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
        pass: true,
        non_finite: None,
    };
    let ids: Vec<ParamId> =
        store.iter().filter(|(_, e)| e.trainable).map(|(i, _)| i).collect();
    for pid in ids {
        let n = store.entry(pid).value.numel();
        for e in 0..n {
            let orig = store.entry(pid).value.data[e];
            store.value_mut(pid).data[e] = orig + h;
            let fp = eval(store)?;
            store.value_mut(pid).data[e] = orig - h;
            let fm = eval(store)?;
            store.value_mut(pid).data[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(pid).map_or(0.0, |g| g.data[e]);
            if !numeric.is_finite() || !analytic.is_finite() {
                report.non_finite =
                    Some(format!("param {} element {e}", store.entry(pid).name));
                report.pass = false;
                return Ok(report);
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pid, e));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

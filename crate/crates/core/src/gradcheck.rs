//! Central-difference gradient verification for every differentiable
//! block, shared by the CLI `grad-check` subcommand and the test suite.
//! Each block gets many small randomized instances; every trainable scalar
//! is perturbed by +-h and compared against the tape's gradient.

use crate::decoder::{DecoderConfig, MaskSet, SegDecoder};
use crate::fusion::{FusionMode, Vmtf, VmtfConfig};
use crate::llm::{Llm, LlmConfig};
use crate::loss::{bce_loss, class_loss, dice_loss, total_loss, Assignment, LossWeights};
use crate::metrics::Mask;
use crate::nn::{
    grad_check_store, AttentionConfig, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, PatchEncoder, PatchEncoderConfig,
};
use crate::perceiver::{OvpConfig, Perceiver, ReferenceTokens};
use crate::tensor::{Array, Tensor};
use crate::{Real, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const H: Real = 1e-5;
pub const TOL: Real = 1e-4;

pub const BLOCKS: &[&str] = &[
    "attention",
    "ffn",
    "layer_norm",
    "ovp",
    "co_decode",
    "vmtf",
    "decoder",
    "dice",
    "bce",
    "class",
    "total_loss",
];

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub name: String,
    pub instances: usize,
    /// Total scalar parameters swept across all instances.
    pub checked: usize,
    pub max_rel_err: Real,
    pub pass: bool,
    pub detail: Option<String>,
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Array {
    let n: usize = shape.iter().product();
    Array { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(lo..hi)).collect() }
}

/// Scalar head: sum of the output against a fixed random weighting, so
/// every output element influences the loss with a distinct sign.
fn weighted_sum(f: &mut Fwd, out: &Tensor, w: &Array) -> Result<Tensor> {
    let wt = f.constant(w);
    let prod = f.g.mul(out, &wt)?;
    f.g.sum_all(&prod)
}

fn check_instance(
    store: &mut ParamStore,
    f: impl Fn(&mut Fwd) -> Result<Tensor>,
) -> Result<(usize, Real, Option<String>)> {
    let rep = grad_check_store(store, f, H, TOL)?;
    let detail = rep.non_finite.clone().or_else(|| {
        rep.worst.and_then(|(pid, e)| {
            if rep.pass {
                None
            } else {
                Some(format!("worst at {} element {e}", store.entry(pid).name))
            }
        })
    });
    Ok((rep.checked, rep.max_rel_err, detail))
}

fn attention_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = if i % 2 == 0 { 4 } else { 8 };
    let heads = if i % 3 == 0 { 1 } else { 2 };
    let kv_dim = if i % 4 == 0 { d + 2 } else { d };
    let (nq, nk) = (2 + i % 2, 2 + i % 3);
    let mut store = ParamStore::new();
    let mut attn =
        MultiHeadAttention::new(&mut store, "attn", AttentionConfig { d, kv_dim, heads }, rng)?;
    if i % 5 == 0 {
        attn.attach_lora(&mut store, "attn", 2, rng)?;
        // Push the up matrices off zero so their gradients are generic.
        for name in ["attn.lora_q.up", "attn.lora_v.up"] {
            let id = store.find(name).unwrap();
            let shape = store.entry(id).value.shape.clone();
            *store.value_mut(id) = rand_array(rng, &shape, -0.3, 0.3);
        }
    }
    let q = rand_array(rng, &[nq, d], -1.0, 1.0);
    let kv = rand_array(rng, &[nk, kv_dim], -1.0, 1.0);
    let mask = if i % 3 == 1 {
        // Random visibility with at least the diagonal-ish entry open.
        let mut m = Array::zeros(&[nq, nk]);
        for r in 0..nq {
            for c in 0..nk {
                if rng.gen_bool(0.4) {
                    m.data[r * nk + c] = crate::llm::MASK_OFF;
                }
            }
            m.data[r * nk + r.min(nk - 1)] = 0.0;
        }
        Some(m)
    } else {
        None
    };
    let w = rand_array(rng, &[nq, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let qt = f.constant(&q);
        let kt = f.constant(&kv);
        let out = attn.apply(f, &qt, &kt, mask.as_ref())?;
        weighted_sum(f, &out, &w)
    })
}

fn ffn_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = if i % 2 == 0 { 4 } else { 6 };
    let n = 2 + i % 3;
    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", d, rng);
    let x = rand_array(rng, &[n, d], -1.0, 1.0);
    let w = rand_array(rng, &[n, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let xt = f.constant(&x);
        let out = ffn.apply(f, &xt)?;
        weighted_sum(f, &out, &w)
    })
}

fn layer_norm_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = 3 + i % 5;
    let n = 2 + i % 2;
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d);
    // Generic gain/bias rather than the identity init.
    for name in ["ln.gain", "ln.bias"] {
        let id = store.find(name).unwrap();
        *store.value_mut(id) = rand_array(rng, &[d], -1.0, 1.0);
    }
    let x = rand_array(rng, &[n, d], -2.0, 2.0);
    let w = rand_array(rng, &[n, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let xt = f.constant(&x);
        let out = ln.apply(f, &xt)?;
        weighted_sum(f, &out, &w)
    })
}

fn ovp_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = if i % 4 == 0 { 8 } else { 4 };
    let mut store = ParamStore::new();
    let enc = PatchEncoder::new(
        &mut store,
        "enc",
        PatchEncoderConfig { patch: 2, in_ch: 3, out_dim: 4, frozen: true },
        rng,
    );
    let fp = Linear::new(&mut store, "fp", 4, d, true, rng);
    let ovp = Perceiver::new(
        &mut store,
        "ovp",
        OvpConfig { n_queries: 2, layers: 1, d },
        rng,
    )?;
    let text = store.add("text", rand_array(rng, &[2, d], -1.0, 1.0), true);
    let frames: Vec<Array> =
        (0..1 + i % 2).map(|_| rand_array(rng, &[4, 4, 3], 0.0, 1.0)).collect();
    let n_frames = frames.len();
    let w = rand_array(rng, &[n_frames * 2, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let t = f.p(text);
        let refs: Vec<&Array> = frames.iter().collect();
        let out = ovp.encode_reference(f, &refs, &t, &enc, &fp)?;
        weighted_sum(f, out.tokens.as_ref().unwrap(), &w)
    })
}

fn co_decode_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = 4;
    let vocab = 11;
    let mut store = ParamStore::new();
    let llm = Llm::new(
        &mut store,
        "llm",
        LlmConfig { layers: 1, d, heads: 2, vocab_size: vocab, n_mask_tokens: 2 },
        rng,
    )?;
    let fp = Linear::new(&mut store, "fp", 3, d, true, rng);
    let with_reference = i % 2 == 0;
    let ref_param = if with_reference {
        Some(store.add("reference", rand_array(rng, &[2, d], -1.0, 1.0), true))
    } else {
        None
    };
    let visual = rand_array(rng, &[2, 3], -1.0, 1.0);
    let text_ids: Vec<u32> = (0..3).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let targets = Llm::lm_targets(&text_ids);
    // EOS id 2 < vocab 11, so the shifted targets stay in range.
    let w = rand_array(rng, &[2, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let text = llm.embed_text(f, &text_ids)?;
        let reference = match ref_param {
            Some(p) => {
                let tok = f.p(p);
                ReferenceTokens { tokens: Some(tok), frame_boundaries: vec![0..2] }
            }
            None => ReferenceTokens::empty(),
        };
        let vt = f.constant(&visual);
        let seq = llm.build_sequence(f, &vt, &fp, &reference, &text)?;
        let out = llm.co_decode(f, &seq)?;
        let (_, e_m) = llm.extract_functional(f, &out, &seq.layout)?;
        let logits = llm.text_logits(f, &out, &seq.layout)?;
        let ce = f.g.cross_entropy(&logits, &targets)?;
        let head = weighted_sum(f, &e_m, &w)?;
        f.g.add(&ce, &head)
    })
}

fn vmtf_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let d = 4;
    let img_dim = 5;
    let mode = [FusionMode::Global, FusionMode::Detailed, FusionMode::Both][i % 3];
    let mut store = ParamStore::new();
    let vmtf = Vmtf::new(&mut store, "vmtf", VmtfConfig { layers: 1, d, img_dim }, rng)?;
    let e_d = store.add("e_d", rand_array(rng, &[3, d], -1.0, 1.0), true);
    let f_img = rand_array(rng, &[4, img_dim], -1.0, 1.0);
    let rows = match mode {
        FusionMode::Global => 1,
        FusionMode::Detailed => 3,
        FusionMode::Both => 4,
    };
    let w = rand_array(rng, &[rows, d], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let ed = f.p(e_d);
        let img = f.constant(&f_img);
        let out = vmtf.fuse(f, &ed, &img, mode)?;
        weighted_sum(f, &out.embeds, &w)
    })
}

fn decoder_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let (d, pixel_dim, img_dim) = (4, 4, 4);
    let (gh, gw) = (2, 2 + i % 2);
    let mut store = ParamStore::new();
    let dec = SegDecoder::new(
        &mut store,
        "segdec",
        DecoderConfig { decoder_layers: 1, pixel_dim, d, img_dim, stride: 2 },
        2,
        rng,
    )?;
    let e_m = store.add("e_m", rand_array(rng, &[2, d], -1.0, 1.0), true);
    let e_v = store.add("e_v", rand_array(rng, &[2, d], -1.0, 1.0), true);
    let grid = rand_array(rng, &[gh, gw, img_dim], -1.0, 1.0);
    let wm = rand_array(rng, &[2, gh * 2, gw * 2], -1.0, 1.0);
    let ws = rand_array(rng, &[2], -1.0, 1.0);
    check_instance(&mut store, move |f| {
        let g = f.constant(&grid);
        let em = f.p(e_m);
        let ev = f.p(e_v);
        let ms = dec.predict(f, &g, &ev, &em)?;
        let a = weighted_sum(f, &ms.mask_logits, &wm)?;
        let b = weighted_sum(f, &ms.score_logits, &ws)?;
        f.g.add(&a, &b)
    })
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(0.5))
}

fn dice_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let (h, w) = (2 + i % 2, 3);
    let mut store = ParamStore::new();
    let logits = store.add("logits", rand_array(rng, &[h, w], -2.0, 2.0), true);
    let gt = rand_mask(rng, h, w);
    check_instance(&mut store, move |f| {
        let l = f.p(logits);
        let p = f.g.sigmoid(&l)?;
        dice_loss(&mut f.g, &p, &gt)
    })
}

fn bce_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let (h, w) = (2 + i % 2, 3);
    let mut store = ParamStore::new();
    let logits = store.add("logits", rand_array(rng, &[h, w], -3.0, 3.0), true);
    let gt = rand_mask(rng, h, w);
    check_instance(&mut store, move |f| {
        let l = f.p(logits);
        bce_loss(&mut f.g, &l, &gt)
    })
}

fn class_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let n = 3 + i % 3;
    let mut store = ParamStore::new();
    let logits = store.add("logits", rand_array(rng, &[n], -2.0, 2.0), true);
    let asg = Assignment { pairs: vec![(rng.gen_range(0..n), 0)] };
    check_instance(&mut store, move |f| {
        let l = f.p(logits);
        class_loss(&mut f.g, &l, &asg)
    })
}

fn total_loss_instance(i: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Real, Option<String>)> {
    let (n, h, w) = (3, 4, 4);
    let g_n = 1 + i % 2;
    let mut store = ParamStore::new();
    let ml = store.add("mask_logits", rand_array(rng, &[n, h, w], -1.5, 1.5), true);
    let sl = store.add("score_logits", rand_array(rng, &[n], -1.5, 1.5), true);
    let with_text = i % 3 == 0;
    let tl = if with_text {
        Some(store.add("text_logits", rand_array(rng, &[2, 6], -1.0, 1.0), true))
    } else {
        None
    };
    let targets: Vec<usize> = (0..2).map(|_| rng.gen_range(0..6)).collect();
    let gts: Vec<Mask> = (0..g_n).map(|_| rand_mask(rng, h, w)).collect();
    let weights = LossWeights::default();
    check_instance(&mut store, move |f| {
        let mlt = f.p(ml);
        let slt = f.p(sl);
        let masks = f.g.sigmoid(&mlt)?;
        let scores = f.g.sigmoid(&slt)?;
        let ms = MaskSet { mask_logits: mlt, masks, score_logits: slt, scores };
        let text = tl.map(|p| f.p(p));
        let (loss, _) = total_loss(
            &mut f.g,
            text.as_ref(),
            if with_text { &targets } else { &[] },
            &ms,
            &gts,
            &weights,
        )?;
        Ok(loss)
    })
}

pub fn run_block(name: &str, instances: usize, seed: u64) -> Result<BlockResult> {
    let mut result = BlockResult {
        name: name.to_string(),
        instances,
        checked: 0,
        max_rel_err: 0.0,
        pass: true,
        detail: None,
    };
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b9));
        let (checked, err, detail) = match name {
            "attention" => attention_instance(i, &mut rng)?,
            "ffn" => ffn_instance(i, &mut rng)?,
            "layer_norm" => layer_norm_instance(i, &mut rng)?,
            "ovp" => ovp_instance(i, &mut rng)?,
            "co_decode" => co_decode_instance(i, &mut rng)?,
            "vmtf" => vmtf_instance(i, &mut rng)?,
            "decoder" => decoder_instance(i, &mut rng)?,
            "dice" => dice_instance(i, &mut rng)?,
            "bce" => bce_instance(i, &mut rng)?,
            "class" => class_instance(i, &mut rng)?,
            "total_loss" => total_loss_instance(i, &mut rng)?,
            other => {
                return Err(crate::Error::Config(format!("unknown grad-check block {other:?}")))
            }
        };
        result.checked += checked;
        if err > result.max_rel_err {
            result.max_rel_err = err;
            if err > TOL {
                result.pass = false;
                result.detail = Some(detail.unwrap_or_else(|| format!("instance {i}")));
            }
        }
    }
    Ok(result)
}

/// Runs the whole suite (or one block) with `instances` randomized
/// instances per block.
pub fn run_suite(filter: Option<&str>, instances: usize, seed: u64) -> Result<Vec<BlockResult>> {
    let names: Vec<&str> = match filter {
        Some(f) => {
            if !BLOCKS.contains(&f) {
                return Err(crate::Error::Config(format!(
                    "unknown block {f:?}; known: {}",
                    BLOCKS.join(", ")
                )));
            }
            vec![f]
        }
        None => BLOCKS.to_vec(),
    };
    names.iter().map(|n| run_block(n, instances, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_runs_and_passes_with_a_few_instances() {
        for r in run_suite(None, 2, 7).unwrap() {
            assert!(r.pass, "{}: max rel err {} ({:?})", r.name, r.max_rel_err, r.detail);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn unknown_block_is_rejected() {
        assert!(run_suite(Some("nonsense"), 1, 0).is_err());
    }
}

//! Toy multi-modal LLM: assembles the four functional token groups (visual,
//! reference, text, mask) into one sequence, co-decodes them through a small
//! transformer under an explicit visibility rule, and exposes the text-span
//! logits plus the per-group output embeddings.
//!
//! Visibility: visual and reference tokens attend bidirectionally among
//! themselves only; text tokens attend to visual+reference and causally to
//! earlier text; mask tokens attend to everything. Hidden pairs get -1e30
//! added to the attention logits, which zeroes them exactly after softmax.

use crate::nn::{
    sin_pe_1d, uniform_init, Embedding, Fwd, Linear, MultiHeadAttention, ParamId, ParamStore,
    TransformerLayer,
};
use crate::perceiver::ReferenceTokens;
use crate::tensor::{Array, Tensor};
use crate::vocab;
use crate::{Error, Real, Result};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

pub const MASK_OFF: Real = -1e30;

#[derive(Clone, Copy, Debug)]
pub struct LlmConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub n_mask_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub visual: Range<usize>,
    pub reference: Range<usize>,
    pub text: Range<usize>,
    pub mask: Range<usize>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.mask.end
    }
}

pub struct FunctionalSequence {
    pub embeddings: Tensor,
    pub layout: Layout,
}

pub struct Llm {
    pub cfg: LlmConfig,
    pub embed: Embedding,
    pub mask_tokens: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub unembed: Linear,
}

impl Llm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: LlmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Llm> {
        if cfg.layers == 0 || cfg.n_mask_tokens == 0 {
            return Err(Error::invalid("llm", "layers and mask tokens must be positive"));
        }
        let embed = Embedding::new(store, &format!("{prefix}.embed"), cfg.vocab_size, cfg.d, rng);
        let scale = (1.0 / cfg.d as Real).sqrt();
        let mask_tokens = store.add(
            format!("{prefix}.mask_tokens"),
            uniform_init(rng, &[cfg.n_mask_tokens, cfg.d], -scale, scale),
            true,
        );
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("{prefix}.layer{i}"), cfg.d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let unembed =
            Linear::new(store, &format!("{prefix}.unembed"), cfg.d, cfg.vocab_size, true, rng);
        Ok(Llm { cfg, embed, mask_tokens, layers, unembed })
    }

    /// Attaches LoRA adapters to every layer's attention q/v projections.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.attn.attach_lora(store, &format!("{prefix}.layer{i}.attn"), rank, rng)?;
        }
        Ok(())
    }

    pub fn attn_handles(&self) -> Vec<&MultiHeadAttention> {
        self.layers.iter().map(|l| &l.attn).collect()
    }

    /// Embeds text ids with 1-D sinusoidal positions. Shared by the LLM text
    /// span and the perceiver's text input.
    pub fn embed_text(&self, f: &mut Fwd, text_ids: &[u32]) -> Result<Tensor> {
        if text_ids.is_empty() {
            return Err(Error::invalid("build_sequence", "text must be nonempty"));
        }
        let ids: Vec<usize> = text_ids
            .iter()
            .map(|&t| {
                let i = t as usize;
                if i >= self.cfg.vocab_size {
                    return Err(Error::invalid("build_sequence", format!("token id {i} out of range")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = self.embed.apply(f, &ids)?;
        let pe = sin_pe_1d(ids.len(), self.cfg.d);
        let pe = f.constant(&pe);
        f.g.add(&e, &pe)
    }

    /// Assembles visual -> reference -> text -> mask. Visual features arrive
    /// raw from the frozen encoder and are projected by `fp` here; reference
    /// tokens get a sinusoidal frame-index encoding so temporal order
    /// survives the order-free attention.
    pub fn build_sequence(
        &self,
        f: &mut Fwd,
        visual_feats: &Tensor,
        fp: &Linear,
        reference: &ReferenceTokens,
        text_embeds: &Tensor,
    ) -> Result<FunctionalSequence> {
        let d = self.cfg.d;
        let visual = fp.apply(f, visual_feats)?;
        let nv = visual.shape[0];
        let nr = reference.len();
        let l = text_embeds.shape[0];
        let n = self.cfg.n_mask_tokens;

        let mut parts: Vec<Tensor> = vec![visual];
        if let Some(tok) = &reference.tokens {
            let mut fpe = Array::zeros(&[nr, d]);
            let frame_pe = sin_pe_1d(reference.frame_boundaries.len(), d);
            for (t, r) in reference.frame_boundaries.iter().enumerate() {
                for i in r.clone() {
                    fpe.data[i * d..(i + 1) * d]
                        .copy_from_slice(&frame_pe.data[t * d..(t + 1) * d]);
                }
            }
            let fpe = f.constant(&fpe);
            parts.push(f.g.add(tok, &fpe)?);
        }
        parts.push(text_embeds.clone());
        parts.push(f.p(self.mask_tokens));
        let refs: Vec<&Tensor> = parts.iter().collect();
        let embeddings = f.g.concat(&refs, 0)?;
        let layout = Layout {
            visual: 0..nv,
            reference: nv..nv + nr,
            text: nv + nr..nv + nr + l,
            mask: nv + nr + l..nv + nr + l + n,
        };
        debug_assert_eq!(embeddings.shape[0], layout.total());
        Ok(FunctionalSequence { embeddings, layout })
    }

    /// The additive attention mask implementing the visibility rule.
    pub fn visibility_mask(layout: &Layout) -> Array {
        let s = layout.total();
        let mut m = Array::zeros(&[s, s]);
        let ctx_end = layout.reference.end;
        for i in 0..s {
            for j in 0..s {
                let visible = if layout.mask.contains(&i) {
                    true
                } else if layout.text.contains(&i) {
                    j < ctx_end || (layout.text.contains(&j) && j <= i)
                } else {
                    // visual or reference token
                    j < ctx_end
                };
                if !visible {
                    m.data[i * s + j] = MASK_OFF;
                }
            }
        }
        m
    }

    pub fn co_decode(&self, f: &mut Fwd, seq: &FunctionalSequence) -> Result<Tensor> {
        let mask = Self::visibility_mask(&seq.layout);
        let mut x = seq.embeddings.clone();
        for layer in &self.layers {
            x = layer.apply(f, &x, Some(&mask))?;
        }
        Ok(x)
    }

    /// (E_d, E_m): output rows of the text and mask spans.
    pub fn extract_functional(
        &self,
        f: &mut Fwd,
        outputs: &Tensor,
        layout: &Layout,
    ) -> Result<(Tensor, Tensor)> {
        if layout.total() != outputs.shape[0] {
            return Err(Error::invalid("extract_functional", "layout does not match outputs"));
        }
        let e_d = f.g.slice(outputs, 0, layout.text.start, layout.text.len())?;
        let e_m = f.g.slice(outputs, 0, layout.mask.start, layout.mask.len())?;
        Ok((e_d, e_m))
    }

    /// Next-token logits over the text span: row i predicts text token i+1,
    /// the final row predicts end-of-text.
    pub fn text_logits(&self, f: &mut Fwd, outputs: &Tensor, layout: &Layout) -> Result<Tensor> {
        if layout.text.is_empty() {
            return Err(Error::invalid("text_logits", "text span is empty"));
        }
        let rows = f.g.slice(outputs, 0, layout.text.start, layout.text.len())?;
        self.unembed.apply(f, &rows)
    }

    /// Shifted LM targets for a text span: ids[1..] followed by end-of-text.
    pub fn lm_targets(text_ids: &[u32]) -> Vec<usize> {
        let mut t: Vec<usize> = text_ids[1..].iter().map(|&x| x as usize).collect();
        t.push(vocab::EOS as usize);
        t
    }
}

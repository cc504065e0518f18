//! Video perceiver: compresses each reference frame, together with the text
//! tokens, into a fixed set of learned query outputs, then concatenates the
//! per-frame outputs along time. Frames never see each other inside the
//! perceiver; temporal order is added downstream as a frame-index encoding.

use crate::nn::{CrossAttnLayer, Fwd, Linear, ParamId, ParamStore, PatchEncoder, uniform_init};
use crate::tensor::{Array, Tensor};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct OvpConfig {
    pub n_queries: usize,
    pub layers: usize,
    pub d: usize,
}

pub struct ReferenceTokens {
    /// [T_r * n_queries, d]; empty tensor handle when T_r = 0.
    pub tokens: Option<Tensor>,
    /// One index range per frame, partitioning [0, T_r * n_queries).
    pub frame_boundaries: Vec<std::ops::Range<usize>>,
}

impl ReferenceTokens {
    pub fn empty() -> Self {
        ReferenceTokens { tokens: None, frame_boundaries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.frame_boundaries.last().map_or(0, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_none()
    }
}

pub struct Perceiver {
    pub cfg: OvpConfig,
    pub queries: ParamId,
    pub layers: Vec<CrossAttnLayer>,
}

impl Perceiver {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: OvpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Perceiver> {
        if cfg.layers == 0 || cfg.n_queries == 0 {
            return Err(Error::invalid("ovp", "layers and n_queries must be positive"));
        }
        let scale = (1.0 / cfg.d as crate::Real).sqrt();
        let queries = store.add(
            format!("{prefix}.queries"),
            uniform_init(rng, &[cfg.n_queries, cfg.d], -scale, scale),
            true,
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                CrossAttnLayer::new(store, &format!("{prefix}.layer{i}"), cfg.d, cfg.d, 4, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Perceiver { cfg, queries, layers })
    }

    /// Encodes reference frames against the instruction embeddings. Each
    /// frame is compressed independently: queries cross-attend to
    /// concat(projected patch tokens, text embeddings) for that frame only.
    pub fn encode_reference(
        &self,
        f: &mut Fwd,
        frames: &[&Array],
        text_embeds: &Tensor,
        encoder: &PatchEncoder,
        fp: &Linear,
    ) -> Result<ReferenceTokens> {
        if frames.is_empty() {
            return Ok(ReferenceTokens::empty());
        }
        let nq = self.cfg.n_queries;
        let mut blocks = Vec::with_capacity(frames.len());
        let mut boundaries = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let feats = encoder.apply(f, frame)?;
            let projected = fp.apply(f, &feats)?;
            let kv = f.g.concat(&[&projected, text_embeds], 0)?;
            let mut q = f.p(self.queries);
            for layer in &self.layers {
                q = layer.apply(f, &q, &kv)?;
            }
            blocks.push(q);
            boundaries.push(t * nq..(t + 1) * nq);
        }
        let refs: Vec<&Tensor> = blocks.iter().collect();
        let tokens = if refs.len() == 1 { blocks[0].clone() } else { f.g.concat(&refs, 0)? };
        Ok(ReferenceTokens { tokens: Some(tokens), frame_boundaries: boundaries })
    }

    /// Image tasks: the image itself is the single reference frame.
    pub fn encode_image_as_reference(
        &self,
        f: &mut Fwd,
        image: &Array,
        text_embeds: &Tensor,
        encoder: &PatchEncoder,
        fp: &Linear,
    ) -> Result<ReferenceTokens> {
        self.encode_reference(f, &[image], text_embeds, encoder, fp)
    }
}

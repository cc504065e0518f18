//! Segmentation decoder. A pixel decoder upsamples the fine-grained feature
//! grid to a full-resolution per-pixel embedding map; a transformer decoder
//! refines the mask embeddings against downsampled pixel tokens; mask logits
//! are embedding-pixel dot products and scores are similarities against the
//! fused text rows.

use crate::metrics::Mask;
use crate::nn::{
    AttentionConfig, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
    sin_pe_2d, xavier_init,
};
use crate::tensor::{Array, Tensor};
use crate::{Error, Real, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    pub decoder_layers: usize,
    pub pixel_dim: usize,
    /// LLM width; mask embeddings arrive at this width.
    pub d: usize,
    /// Channel width of the incoming feature grid.
    pub img_dim: usize,
    /// Spatial stride of the grid relative to the full frame; must be a
    /// power of two (each factor of two is one upsample stage).
    pub stride: usize,
}

pub struct PixelDecoder {
    pub cfg: DecoderConfig,
    /// (weight [3,3,cin,cout], bias [cout]) per stage.
    pub convs: Vec<(ParamId, ParamId)>,
}

impl PixelDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DecoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<PixelDecoder> {
        if !cfg.stride.is_power_of_two() || cfg.stride < 2 {
            return Err(Error::invalid("pixel_decode", "stride must be a power of two >= 2"));
        }
        let stages = cfg.stride.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(stages);
        for s in 0..stages {
            let cin = if s == 0 { cfg.img_dim } else { cfg.pixel_dim };
            let mut w = xavier_init(rng, 9 * cin, cfg.pixel_dim);
            w.shape = vec![3, 3, cin, cfg.pixel_dim];
            let wid = store.add(format!("{prefix}.conv{s}.w"), w, true);
            let bid = store.add(format!("{prefix}.conv{s}.b"), Array::zeros(&[cfg.pixel_dim]), true);
            convs.push((wid, bid));
        }
        Ok(PixelDecoder { cfg, convs })
    }

    /// grid: [gh, gw, img_dim] -> [gh*stride, gw*stride, pixel_dim].
    pub fn apply(&self, f: &mut Fwd, grid: &Tensor) -> Result<Tensor> {
        if grid.shape.len() != 3 || grid.shape[2] != self.cfg.img_dim {
            return Err(Error::invalid("pixel_decode", "grid must be [gh, gw, img_dim]"));
        }
        let mut x = grid.clone();
        for &(wid, bid) in &self.convs {
            let up = f.g.upsample2x(&x)?;
            let w = f.p(wid);
            let b = f.p(bid);
            let conv = f.g.conv3x3(&up, &w, &b)?;
            x = f.g.relu(&conv)?;
        }
        Ok(x)
    }
}

/// Cross-attention to pixel tokens, self-attention among the mask
/// embeddings, then FFN; pre-norm residuals throughout.
pub struct RefineLayer {
    pub ln_c: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_s: LayerNorm,
    pub selfattn: MultiHeadAttention,
    pub ln_f: LayerNorm,
    pub ffn: FeedForward,
}

impl RefineLayer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RefineLayer> {
        Ok(RefineLayer {
            ln_c: LayerNorm::new(store, &format!("{prefix}.ln_c"), d),
            cross: MultiHeadAttention::new(
                store,
                &format!("{prefix}.cross"),
                AttentionConfig { d, kv_dim, heads },
                rng,
            )?,
            ln_s: LayerNorm::new(store, &format!("{prefix}.ln_s"), d),
            selfattn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.self"),
                AttentionConfig { d, kv_dim: d, heads },
                rng,
            )?,
            ln_f: LayerNorm::new(store, &format!("{prefix}.ln_f"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, rng),
        })
    }

    fn apply(&self, f: &mut Fwd, q: &Tensor, pix_tokens: &Tensor) -> Result<Tensor> {
        let n = self.ln_c.apply(f, q)?;
        let a = self.cross.apply(f, &n, pix_tokens, None)?;
        let q = f.g.add(q, &a)?;
        let n = self.ln_s.apply(f, &q)?;
        let a = self.selfattn.apply(f, &n, &n, None)?;
        let q = f.g.add(&q, &a)?;
        let n = self.ln_f.apply(f, &q)?;
        let m = self.ffn.apply(f, &n)?;
        f.g.add(&q, &m)
    }
}

/// Mask proposals and scores, still attached to the graph.
pub struct MaskSet {
    pub mask_logits: Tensor,
    /// sigmoid(mask_logits): [N, H, W] in (0,1).
    pub masks: Tensor,
    pub score_logits: Tensor,
    /// sigmoid(score_logits): [N] in (0,1).
    pub scores: Tensor,
}

pub struct SegDecoder {
    pub cfg: DecoderConfig,
    pub pixel: PixelDecoder,
    pub refine: Vec<RefineLayer>,
    /// Final affine d -> pixel_dim for the refined embeddings.
    pub out_proj: Linear,
    /// Affine pixel_dim -> d used only by the score head.
    pub score_proj: Linear,
}

impl SegDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DecoderConfig,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SegDecoder> {
        if cfg.decoder_layers == 0 {
            return Err(Error::invalid("segdec", "decoder_layers must be positive"));
        }
        if cfg.pixel_dim % 4 != 0 {
            return Err(Error::invalid("segdec", "pixel_dim must be divisible by 4"));
        }
        let pixel = PixelDecoder::new(store, &format!("{prefix}.pixel"), cfg, rng)?;
        let refine = (0..cfg.decoder_layers)
            .map(|i| {
                RefineLayer::new(
                    store,
                    &format!("{prefix}.refine{i}"),
                    cfg.d,
                    cfg.pixel_dim,
                    heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out_proj =
            Linear::new(store, &format!("{prefix}.out_proj"), cfg.d, cfg.pixel_dim, true, rng);
        let score_proj =
            Linear::new(store, &format!("{prefix}.score_proj"), cfg.pixel_dim, cfg.d, true, rng);
        Ok(SegDecoder { cfg, pixel, refine, out_proj, score_proj })
    }

    /// Average-pools the full-resolution pixel map back to the feature grid
    /// resolution, flattened to [gh*gw, pixel_dim] key/value tokens. A fixed
    /// 2-D sinusoidal encoding is added so tokens with similar content at
    /// different locations stay distinguishable to the cross-attention;
    /// without it the proposals have no spatial addresses to specialize on.
    pub fn pixel_tokens(&self, f: &mut Fwd, pixel_map: &Tensor) -> Result<Tensor> {
        let (h, w, c) = (pixel_map.shape[0], pixel_map.shape[1], pixel_map.shape[2]);
        let p = self.cfg.stride;
        let (gh, gw) = (h / p, w / p);
        let r = f.g.reshape(pixel_map, &[gh, p, gw, p, c])?;
        let r = f.g.mean_axis(&r, 3)?;
        let r = f.g.mean_axis(&r, 1)?;
        let pe = f.constant(&sin_pe_2d(gh, gw, c));
        let r = f.g.add(&r, &pe)?;
        f.g.reshape(&r, &[gh * gw, c])
    }

    /// Refines mask embeddings [N, d] against the pixel map; output [N, pixel_dim].
    pub fn refine_mask_embeddings(
        &self,
        f: &mut Fwd,
        e_m: &Tensor,
        pixel_map: &Tensor,
    ) -> Result<Tensor> {
        let tokens = self.pixel_tokens(f, pixel_map)?;
        self.refine_with_tokens(f, e_m, &tokens)
    }

    pub fn refine_with_tokens(
        &self,
        f: &mut Fwd,
        e_m: &Tensor,
        tokens: &Tensor,
    ) -> Result<Tensor> {
        let mut q = e_m.clone();
        for layer in &self.refine {
            q = layer.apply(f, &q, tokens)?;
        }
        self.out_proj.apply(f, &q)
    }

    /// m_j(x,y) = sigmoid(<pixel(x,y), e_j> / sqrt(pixel_dim)).
    pub fn mask_logits_from(
        &self,
        f: &mut Fwd,
        refined: &Tensor,
        pixel_map: &Tensor,
    ) -> Result<Tensor> {
        let (h, w, c) = (pixel_map.shape[0], pixel_map.shape[1], pixel_map.shape[2]);
        let n = refined.shape[0];
        let flat = f.g.reshape(pixel_map, &[h * w, c])?;
        let flat_t = f.g.transpose(&flat, &[1, 0])?;
        let logits = f.g.matmul(refined, &flat_t)?;
        let logits = f.g.scale(&logits, 1.0 / (c as Real).sqrt())?;
        f.g.reshape(&logits, &[n, h, w])
    }

    /// s_j = sigmoid(max_k <affine(e_j), E_v[k]> / sqrt(d)).
    pub fn score_logits_from(
        &self,
        f: &mut Fwd,
        refined: &Tensor,
        e_v: &Tensor,
    ) -> Result<Tensor> {
        let back = self.score_proj.apply(f, refined)?;
        let ev_t = f.g.transpose(e_v, &[1, 0])?;
        let sims = f.g.matmul(&back, &ev_t)?;
        let sims = f.g.scale(&sims, 1.0 / (self.cfg.d as Real).sqrt())?;
        f.g.max_axis(&sims, 1)
    }

    /// Full decoding: pixel map, refinement, mask and score heads.
    pub fn predict(
        &self,
        f: &mut Fwd,
        grid: &Tensor,
        e_v: &Tensor,
        e_m: &Tensor,
    ) -> Result<MaskSet> {
        let pixel_map = self.pixel.apply(f, grid)?;
        let refined = self.refine_mask_embeddings(f, e_m, &pixel_map)?;
        let mask_logits = self.mask_logits_from(f, &refined, &pixel_map)?;
        let masks = f.g.sigmoid(&mask_logits)?;
        let score_logits = self.score_logits_from(f, &refined, e_v)?;
        let scores = f.g.sigmoid(&score_logits)?;
        Ok(MaskSet { mask_logits, masks, score_logits, scores })
    }
}

/// Thresholded union of confident proposals; falls back to the single
/// best-scoring proposal (ties to the lowest index) so the selection is
/// never empty.
pub fn select_final(masks: &Array, scores: &Array, tau: Real) -> Mask {
    assert_eq!(masks.shape.len(), 3, "masks must be [N, H, W]");
    let (n, h, w) = (masks.shape[0], masks.shape[1], masks.shape[2]);
    assert_eq!(scores.shape, vec![n]);
    let mut chosen: Vec<usize> = (0..n).filter(|&j| scores.data[j] > tau).collect();
    if chosen.is_empty() {
        let mut best = 0;
        for j in 1..n {
            if scores.data[j] > scores.data[best] {
                best = j;
            }
        }
        chosen.push(best);
    }
    let mut out = vec![false; h * w];
    for &j in &chosen {
        for p in 0..h * w {
            if masks.data[j * h * w + p] > 0.5 {
                out[p] = true;
            }
        }
    }
    Mask { h, w, data: out }
}

//! Vision-guided text fusion: pools the detailed text embeddings into one
//! global row, then refines global + detailed rows against fine-grained
//! visual features over a stack of cross-attention/FFN layers. The result
//! acts as the mask classifier downstream.

use crate::nn::{CrossAttnLayer, Fwd, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Global,
    Detailed,
    Both,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Global => "global",
            FusionMode::Detailed => "detailed",
            FusionMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "global" => Ok(FusionMode::Global),
            "detailed" => Ok(FusionMode::Detailed),
            "both" => Ok(FusionMode::Both),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VmtfConfig {
    pub layers: usize,
    pub d: usize,
    pub img_dim: usize,
}

pub struct MultiGranularityText {
    /// [rows, d]; for mode Both, row 0 is global and rows 1.. are detailed.
    pub embeds: Tensor,
}

pub struct Vmtf {
    pub cfg: VmtfConfig,
    pub img_proj: Linear,
    pub layers: Vec<CrossAttnLayer>,
}

impl Vmtf {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: VmtfConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vmtf> {
        if cfg.layers == 0 {
            return Err(Error::invalid("vmtf", "layers must be positive"));
        }
        let img_proj =
            Linear::new(store, &format!("{prefix}.img_proj"), cfg.img_dim, cfg.d, true, rng);
        let layers = (0..cfg.layers)
            .map(|i| CrossAttnLayer::new(store, &format!("{prefix}.layer{i}"), cfg.d, cfg.d, 4, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Vmtf { cfg, img_proj, layers })
    }

    /// Arithmetic mean over the detailed rows (adaptive pooling to length 1).
    pub fn global_pool(f: &mut Fwd, e_d: &Tensor) -> Result<Tensor> {
        if e_d.shape.len() != 2 || e_d.shape[0] == 0 {
            return Err(Error::invalid("global_pool", "need a nonempty [L, d] input"));
        }
        let pooled = f.g.mean_axis(e_d, 0)?; // [d]
        f.g.reshape(&pooled, &[1, e_d.shape[1]])
    }

    /// Queries: global and/or detailed rows by mode. Keys/values: projected
    /// image tokens with the global row appended.
    pub fn fuse(
        &self,
        f: &mut Fwd,
        e_d: &Tensor,
        f_img: &Tensor,
        mode: FusionMode,
    ) -> Result<MultiGranularityText> {
        if f_img.shape.len() != 2 || f_img.shape[0] == 0 {
            return Err(Error::invalid("fuse", "image features must be nonempty [P, img_dim]"));
        }
        let e_g = Self::global_pool(f, e_d)?;
        let queries = match mode {
            FusionMode::Global => e_g.clone(),
            FusionMode::Detailed => e_d.clone(),
            FusionMode::Both => f.g.concat(&[&e_g, e_d], 0)?,
        };
        let img = self.img_proj.apply(f, f_img)?;
        let kv = f.g.concat(&[&img, &e_g], 0)?;
        let mut x = queries;
        for layer in &self.layers {
            x = layer.apply(f, &x, &kv)?;
        }
        Ok(MultiGranularityText { embeds: x })
    }

    /// The ablation path with fusion disabled: classifier rows are the raw
    /// pooled/detailed embeddings, untouched by visual features.
    pub fn bypass(
        f: &mut Fwd,
        e_d: &Tensor,
        mode: FusionMode,
    ) -> Result<MultiGranularityText> {
        let e_g = Self::global_pool(f, e_d)?;
        let embeds = match mode {
            FusionMode::Global => e_g,
            FusionMode::Detailed => e_d.clone(),
            FusionMode::Both => f.g.concat(&[&e_g, e_d], 0)?,
        };
        Ok(MultiGranularityText { embeds })
    }
}

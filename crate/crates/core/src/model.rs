//! Full pipeline assembly: frozen patch encoders, the reference-frame
//! perceiver, the co-decoding LLM, text/image fusion, and the mask decoder,
//! plus the training objective and greedy answer generation for inference.
//!
//! Every forward builds one fresh graph over a shared parameter store, so
//! training steps and generation steps are independent tapes.

use crate::config::RunConfig;
use crate::decoder::{select_final, DecoderConfig, MaskSet, SegDecoder};
use crate::fusion::{Vmtf, VmtfConfig};
use crate::llm::{FunctionalSequence, Llm, LlmConfig};
use crate::loss::{total_loss, LossReport, LossWeights};
use crate::metrics::Mask;
use crate::nn::{Fwd, Linear, ParamStore, PatchEncoder, PatchEncoderConfig};
use crate::perceiver::{OvpConfig, Perceiver, ReferenceTokens};
use crate::synth::Mode;
use crate::tensor::{Array, Tensor};
use crate::vocab;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Output width of both frozen patch encoders (the pretrained-backbone
/// stand-ins).
pub const ENC_DIM: usize = 48;
/// Key-frame/reference encoder patch size (coarse tokens for the LLM).
pub const CLIP_PATCH: usize = 8;
/// Fine encoder patch size; also the pixel decoder's upsampling factor, so
/// the pixel map returns to full resolution.
pub const FINE_PATCH: usize = 4;
/// Longest answer the greedy decoder will emit before giving up on EOS.
pub const MAX_ANSWER_TOKENS: usize = 12;

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    /// Frozen coarse encoder: key frame visual span + reference frames.
    pub clip_enc: PatchEncoder,
    /// Frozen fine encoder: pixel decoder input and fusion's image side.
    pub fine_enc: PatchEncoder,
    /// Shared projector from encoder space into the LLM width.
    pub fp: Linear,
    pub perceiver: Perceiver,
    pub llm: Llm,
    pub vmtf: Vmtf,
    pub segdec: SegDecoder,
}

/// One forward pass over a single (key frame, instruction, text) triple.
pub struct ForwardPass {
    pub seq: FunctionalSequence,
    pub text_logits: Tensor,
    pub mask_set: MaskSet,
}

/// Everything `forward` needs about a sample. `text` is the full text span:
/// instruction followed by the (gold or generated-so-far) answer.
pub struct SampleView<'a> {
    pub mode: Mode,
    pub frames: &'a [Array],
    pub text: &'a [u32],
    pub key_frame: usize,
}

/// Evenly spread `t_r` indices over `total` frames, repeating when the clip
/// is shorter than the reference budget.
pub fn reference_indices(total: usize, t_r: usize) -> Vec<usize> {
    (0..t_r).map(|i| i * total / t_r).collect()
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // Stream 0 is reserved for init; the corpus uses streams >= 1 and the
        // trainer uses u64::MAX, so no draws are shared.
        rng.set_stream(0);
        let mut store = ParamStore::new();
        let clip_enc = PatchEncoder::new(
            &mut store,
            "clip_enc",
            PatchEncoderConfig { patch: CLIP_PATCH, in_ch: 3, out_dim: ENC_DIM, frozen: true },
            &mut rng,
        );
        let fine_enc = PatchEncoder::new(
            &mut store,
            "fine_enc",
            PatchEncoderConfig { patch: FINE_PATCH, in_ch: 3, out_dim: ENC_DIM, frozen: true },
            &mut rng,
        );
        let fp = Linear::new(&mut store, "fp", ENC_DIM, cfg.d, true, &mut rng);
        let perceiver = Perceiver::new(
            &mut store,
            "ovp",
            OvpConfig { n_queries: cfg.n_queries, layers: cfg.ovp_layers, d: cfg.d },
            &mut rng,
        )?;
        let mut llm = Llm::new(
            &mut store,
            "llm",
            LlmConfig {
                layers: cfg.llm_layers,
                d: cfg.d,
                heads: cfg.heads,
                vocab_size: vocab::vocab_size(),
                n_mask_tokens: cfg.n_mask_tokens,
            },
            &mut rng,
        )?;
        let vmtf = Vmtf::new(
            &mut store,
            "vmtf",
            VmtfConfig { layers: cfg.vmtf_layers, d: cfg.d, img_dim: ENC_DIM },
            &mut rng,
        )?;
        let segdec = SegDecoder::new(
            &mut store,
            "segdec",
            DecoderConfig {
                decoder_layers: cfg.decoder_layers,
                pixel_dim: cfg.pixel_dim,
                d: cfg.d,
                img_dim: ENC_DIM,
                stride: FINE_PATCH,
            },
            cfg.heads,
            &mut rng,
        )?;
        if cfg.lora_mode {
            llm.attach_lora(&mut store, "llm", cfg.lora_rank, &mut rng)?;
            // The base LLM body freezes; adapters, norms, embeddings, and
            // everything outside the LLM stay trainable.
            store.set_trainable_where(
                |name| {
                    name.starts_with("llm.layer")
                        && (name.contains(".attn.w") || name.contains(".ffn."))
                },
                false,
            );
        }
        Ok(Model { cfg: cfg.clone(), store, clip_enc, fine_enc, fp, perceiver, llm, vmtf, segdec })
    }

    fn encode_reference(
        &self,
        f: &mut Fwd,
        view: &SampleView,
        text_embeds: &Tensor,
    ) -> Result<ReferenceTokens> {
        if !self.cfg.ovp_enabled {
            return Ok(ReferenceTokens::empty());
        }
        if !view.mode.is_video() {
            return self.perceiver.encode_image_as_reference(
                f,
                &view.frames[view.key_frame],
                text_embeds,
                &self.clip_enc,
                &self.fp,
            );
        }
        if self.cfg.t_r == 0 {
            return Ok(ReferenceTokens::empty());
        }
        let idx = reference_indices(view.frames.len(), self.cfg.t_r);
        let frames: Vec<&Array> = idx.iter().map(|&i| &view.frames[i]).collect();
        self.perceiver.encode_reference(f, &frames, text_embeds, &self.clip_enc, &self.fp)
    }

    pub fn forward(&self, f: &mut Fwd, view: &SampleView) -> Result<ForwardPass> {
        if view.frames.is_empty() || view.key_frame >= view.frames.len() {
            return Err(Error::invalid("forward", "key frame out of range"));
        }
        let key = &view.frames[view.key_frame];
        let text_embeds = self.llm.embed_text(f, view.text)?;
        let reference = self.encode_reference(f, view, &text_embeds)?;
        let visual_feats = self.clip_enc.apply(f, key)?;
        let seq = self.llm.build_sequence(f, &visual_feats, &self.fp, &reference, &text_embeds)?;
        let outputs = self.llm.co_decode(f, &seq)?;
        let (e_d, e_m) = self.llm.extract_functional(f, &outputs, &seq.layout)?;
        let text_logits = self.llm.text_logits(f, &outputs, &seq.layout)?;

        let f_img = self.fine_enc.apply(f, key)?;
        let e_v = if self.cfg.vmtf_enabled {
            self.vmtf.fuse(f, &e_d, &f_img, self.cfg.fusion_mode)?
        } else {
            Vmtf::bypass(f, &e_d, self.cfg.fusion_mode)?
        };
        let (gh, gw) = self.fine_enc.tokens_for(key.shape[0], key.shape[1])?;
        let grid = f.g.reshape(&f_img, &[gh, gw, ENC_DIM])?;
        let mask_set = self.segdec.predict(f, &grid, &e_v.embeds, &e_m)?;
        Ok(ForwardPass { seq, text_logits, mask_set })
    }

    /// Training objective for one sample: teacher-forced text span
    /// (instruction then answer) and per-target key-frame masks.
    pub fn loss_on_sample(
        &self,
        f: &mut Fwd,
        mode: Mode,
        frames: &[Array],
        key_frame: usize,
        instruction: &[u32],
        answer: &[u32],
        gt_masks: &[Mask],
        weights: &LossWeights,
    ) -> Result<(Tensor, LossReport)> {
        let mut text: Vec<u32> = instruction.to_vec();
        text.extend_from_slice(answer);
        let view = SampleView { mode, frames, text: &text, key_frame };
        let pass = self.forward(f, &view)?;
        let targets = Llm::lm_targets(&text);
        total_loss(
            &mut f.g,
            Some(&pass.text_logits),
            &targets,
            &pass.mask_set,
            gt_masks,
            weights,
        )
    }

    /// Greedy answer decoding: re-runs the forward per emitted token until
    /// EOS, then returns the generated ids plus the mask set of the final
    /// forward (whose text span is instruction + full answer).
    pub fn generate(
        &self,
        mode: Mode,
        frames: &[Array],
        key_frame: usize,
        instruction: &[u32],
    ) -> Result<(Vec<u32>, Array, Array)> {
        let mut text: Vec<u32> = instruction.to_vec();
        let mut answer = Vec::new();
        loop {
            let mut f = Fwd::new(&self.store);
            let view = SampleView { mode, frames, text: &text, key_frame };
            let pass = self.forward(&mut f, &view)?;
            let logits = f.g.to_array(&pass.text_logits);
            let v = logits.shape[1];
            let last = &logits.data[(logits.shape[0] - 1) * v..];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            if next == vocab::EOS || answer.len() >= MAX_ANSWER_TOKENS {
                let masks = f.g.to_array(&pass.mask_set.masks);
                let scores = f.g.to_array(&pass.mask_set.scores);
                return Ok((answer, masks, scores));
            }
            answer.push(next);
            text.push(next);
        }
    }

    /// Decode masks for one key frame with an already-generated answer.
    pub fn masks_for_key(
        &self,
        mode: Mode,
        frames: &[Array],
        key_frame: usize,
        text: &[u32],
    ) -> Result<(Array, Array)> {
        let mut f = Fwd::new(&self.store);
        let view = SampleView { mode, frames, text, key_frame };
        let pass = self.forward(&mut f, &view)?;
        Ok((f.g.to_array(&pass.mask_set.masks), f.g.to_array(&pass.mask_set.scores)))
    }

    /// Inference for a whole sample: generate the answer once against frame
    /// 0, then decode a mask for every frame (just frame 0 for images).
    pub fn predict_sample(
        &self,
        mode: Mode,
        frames: &[Array],
        instruction: &[u32],
    ) -> Result<Prediction> {
        let (answer, masks0, scores0) = self.generate(mode, frames, 0, instruction)?;
        let tau = self.cfg.score_threshold;
        let mut per_frame = vec![select_final(&masks0, &scores0, tau)];
        if mode.is_video() {
            let mut text: Vec<u32> = instruction.to_vec();
            text.extend_from_slice(&answer);
            for t in 1..frames.len() {
                let (m, s) = self.masks_for_key(mode, frames, t, &text)?;
                per_frame.push(select_final(&m, &s, tau));
            }
        }
        Ok(Prediction { answer, per_frame })
    }
}

pub struct Prediction {
    pub answer: Vec<u32>,
    /// One selected mask per frame (a single entry for image modes).
    pub per_frame: Vec<Mask>,
}

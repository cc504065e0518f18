//! Orchestration: the training loop, held-out evaluation grouped the way
//! the tasks are reported (reasoning / referring / overall), the ablation
//! runner, and qualitative mask rendering.

use crate::checkpoint::{self, RngState};
use crate::config::RunConfig;
use crate::dataio::{self, target_union_masks, DiskSample};
use crate::fusion::FusionMode;
use crate::loss::LossWeights;
use crate::metrics::{self, IouRecord, Mask, JF};
use crate::model::Model;
use crate::nn::{Fwd, Grads};
use crate::optim::{cosine_warmup_lr, AdamW, AdamWConfig, StepOutcome};
use crate::synth::{generate_corpus, render, CorpusSpec, InstructionSample, Mode};
use crate::tensor::Array;
use crate::vocab;
use crate::{Error, Real, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// A sample ready for the model: frames split out, per-frame union gt, and
/// (for training) per-object target masks come from the rendered scene.
pub struct EvalItem {
    pub id: u64,
    pub mode: Mode,
    pub frames: Vec<Array>,
    pub instruction: Vec<u32>,
    /// Per-frame union of the target objects.
    pub gt: Vec<Mask>,
}

pub fn split_frames(clip: &Array) -> Vec<Array> {
    let (t, h, w) = (clip.shape[0], clip.shape[1], clip.shape[2]);
    (0..t)
        .map(|i| Array {
            shape: vec![h, w, 3],
            data: clip.data[i * h * w * 3..(i + 1) * h * w * 3].to_vec(),
        })
        .collect()
}

impl EvalItem {
    pub fn from_sample(s: &InstructionSample) -> EvalItem {
        let rendered = render(&s.scene);
        EvalItem {
            id: s.id,
            mode: s.mode,
            frames: split_frames(&rendered.clip),
            instruction: s.instruction.clone(),
            gt: target_union_masks(&rendered, &s.target_ids),
        }
    }

    pub fn from_disk(s: DiskSample) -> EvalItem {
        EvalItem { id: s.id, mode: s.mode, frames: s.frames, instruction: s.instruction, gt: s.gt }
    }
}

pub fn corpus_spec(cfg: &RunConfig, size: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        size,
        seed,
        h: cfg.h,
        w: cfg.w,
        clip_len: cfg.clip_len,
        difficulty_mix: [cfg.mix_easy, cfg.mix_medium, cfg.mix_hard],
        mode_mix: [cfg.mix_refer, cfg.mix_reason, cfg.mix_refer_video, cfg.mix_reason_video],
    }
}

/// The held-out split always lives one seed above the training corpus, so
/// train/eval scenes never coincide.
pub fn held_out_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GroupMetrics {
    pub image_n: usize,
    pub ciou: Real,
    pub giou: Real,
    pub video_n: usize,
    pub j: Real,
    pub f: Real,
    pub jf: Real,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalReport {
    pub reasoning: GroupMetrics,
    pub referring: GroupMetrics,
    pub overall: GroupMetrics,
    /// Mean per-sample score across the whole split: IoU for image samples,
    /// J&F for video samples. The single scalar the ablations compare.
    pub score: Real,
}

struct GroupAccum {
    records: Vec<IouRecord>,
    jfs: Vec<JF>,
}

impl GroupAccum {
    fn new() -> Self {
        GroupAccum { records: Vec::new(), jfs: Vec::new() }
    }
    fn finish(&self) -> GroupMetrics {
        let mut g = GroupMetrics {
            image_n: self.records.len(),
            video_n: self.jfs.len(),
            ..Default::default()
        };
        if !self.records.is_empty() {
            g.ciou = metrics::ciou(&self.records).unwrap();
            g.giou = metrics::giou(&self.records).unwrap();
        }
        if !self.jfs.is_empty() {
            let n = self.jfs.len() as Real;
            g.j = self.jfs.iter().map(|x| x.j).sum::<Real>() / n;
            g.f = self.jfs.iter().map(|x| x.f).sum::<Real>() / n;
            g.jf = self.jfs.iter().map(|x| x.jf).sum::<Real>() / n;
        }
        g
    }
}

/// Runs the model over a split and aggregates metrics per task family.
pub fn evaluate(model: &Model, items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let mut reasoning = GroupAccum::new();
    let mut referring = GroupAccum::new();
    let mut overall = GroupAccum::new();
    let mut score_sum = 0.0;
    for item in items {
        let pred = model.predict_sample(item.mode, &item.frames, &item.instruction)?;
        let group = if item.mode.is_reasoning() { &mut reasoning } else { &mut referring };
        if item.mode.is_video() {
            let pairs: Vec<(Mask, Mask)> =
                pred.per_frame.iter().cloned().zip(item.gt.iter().cloned()).collect();
            let jf = metrics::j_and_f(&pairs)?;
            score_sum += jf.jf;
            group.jfs.push(jf);
            overall.jfs.push(jf);
        } else {
            let rec = metrics::intersection_union(&pred.per_frame[0], &item.gt[0])?;
            score_sum += metrics::iou(&pred.per_frame[0], &item.gt[0])?;
            group.records.push(rec);
            overall.records.push(rec);
        }
    }
    Ok(EvalReport {
        reasoning: reasoning.finish(),
        referring: referring.finish(),
        overall: overall.finish(),
        score: score_sum / items.len() as Real,
    })
}

pub fn report_lines(tag: &str, r: &EvalReport) -> String {
    let mut s = String::new();
    for (name, g) in
        [("reasoning", r.reasoning), ("referring", r.referring), ("overall", r.overall)]
    {
        s.push_str(&format!(
            "eval tag={tag} group={name} image_n={} ciou={:.4} giou={:.4} video_n={} j={:.4} f={:.4} jf={:.4}\n",
            g.image_n, g.ciou, g.giou, g.video_n, g.j, g.f, g.jf
        ));
    }
    s.push_str(&format!("eval tag={tag} group=score score={:.4}\n", r.score));
    s
}

pub struct TrainResult {
    pub losses: Vec<Real>,
    pub final_eval: EvalReport,
    pub skipped_steps: usize,
}

/// Accumulates per-sample gradients into a running sum.
fn accumulate(sum: &mut Option<Grads>, g: Grads) {
    match sum {
        None => *sum = Some(g),
        Some(acc) => {
            for (slot, new) in acc.by_id.iter_mut().zip(g.by_id) {
                match (slot.as_mut(), new) {
                    (Some(a), Some(b)) => {
                        for (x, y) in a.data.iter_mut().zip(b.data) {
                            *x += y;
                        }
                    }
                    (None, Some(b)) => *slot = Some(b),
                    _ => {}
                }
            }
        }
    }
}

/// End-to-end training: mode-mixed batches, AdamW with warmup + cosine
/// decay, one structured log line per step, periodic checkpoints and
/// held-out evals, then a final checkpoint at `out`.
pub fn train(cfg: &RunConfig, out: Option<&Path>, log: &mut dyn Write) -> Result<TrainResult> {
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let train_corpus = generate_corpus(&corpus_spec(cfg, cfg.train_size, cfg.seed))?;
    let eval_corpus =
        generate_corpus(&corpus_spec(cfg, cfg.eval_size, held_out_seed(cfg.seed)))?;
    let eval_items: Vec<EvalItem> = eval_corpus.iter().map(EvalItem::from_sample).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    let weights =
        LossWeights { cls: cfg.w_cls, mask: cfg.w_mask, b: cfg.w_b, d: cfg.w_d };
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    let mut skipped_steps = 0;

    for step in 0..cfg.total_steps {
        let lr = cosine_warmup_lr(step, cfg.warmup(), cfg.total_steps, cfg.peak_lr, cfg.lr_floor);
        let mut grad_sum: Option<Grads> = None;
        let mut batch_loss = 0.0;
        let mut parts = [0.0 as Real; 4]; // l_t, l_cls, l_b, l_d
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..train_corpus.len());
            let s = &train_corpus[idx];
            let rendered = render(&s.scene);
            let frames = split_frames(&rendered.clip);
            let key = if s.mode.is_video() { rng.gen_range(0..frames.len()) } else { 0 };
            let gt: Vec<Mask> =
                s.target_ids.iter().map(|&o| rendered.masks[o][key].clone()).collect();
            let mut f = Fwd::new(&model.store);
            let (loss, report) = model.loss_on_sample(
                &mut f,
                s.mode,
                &frames,
                key,
                &s.instruction,
                &s.answer,
                &gt,
                &weights,
            )?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step} on sample id {} (corpus seed {})",
                    s.id, cfg.seed
                )));
            }
            batch_loss += report.total;
            parts[0] += report.l_t;
            parts[1] += report.l_cls;
            parts[2] += report.l_b;
            parts[3] += report.l_d;
            accumulate(&mut grad_sum, f.backward(&loss)?);
        }
        let inv = 1.0 / cfg.batch_size as Real;
        let mut grads = grad_sum.expect("batch_size >= 1");
        for g in grads.by_id.iter_mut().flatten() {
            for x in &mut g.data {
                *x *= inv;
            }
        }
        batch_loss *= inv;
        for p in &mut parts {
            *p *= inv;
        }
        let outcome = opt.step(&mut model.store, &grads, lr);
        let skipped = match &outcome {
            StepOutcome::Applied => "none".to_string(),
            StepOutcome::SkippedNonFinite(name) => {
                skipped_steps += 1;
                name.clone()
            }
        };
        losses.push(batch_loss);
        writeln!(
            log,
            "step={step} lr={lr:.6e} loss={batch_loss:.4} l_t={:.4} l_cls={:.4} l_b={:.4} l_d={:.4} skipped={skipped}",
            parts[0], parts[1], parts[2], parts[3]
        )?;

        let at = step + 1;
        if cfg.eval_every > 0 && at % cfg.eval_every == 0 && at < cfg.total_steps {
            let r = evaluate(&model, &eval_items)?;
            write!(log, "{}", report_lines(&format!("step{at}"), &r))?;
        }
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0) {
            if at % cfg.checkpoint_every == 0 && at < cfg.total_steps {
                save_checkpoint(&dir.join(format!("step{at:06}.ckpt")), cfg, at, &rng, &model, &opt)?;
            }
        }
    }

    let final_eval = evaluate(&model, &eval_items)?;
    write!(log, "{}", report_lines("final", &final_eval))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("final.ckpt"), cfg, cfg.total_steps, &rng, &model, &opt)?;
    }
    Ok(TrainResult { losses, final_eval, skipped_steps })
}

fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    step: u64,
    rng: &ChaCha8Rng,
    model: &Model,
    opt: &AdamW,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(path, cfg, step, &RngState::capture(rng), &model.store, opt)
}

/// Rebuilds the model and optimizer a checkpoint was saved from.
pub fn load_model(path: &Path) -> Result<(Model, AdamW, u64, RngState)> {
    let loaded = checkpoint::load(path)?;
    let mut model = Model::new(&loaded.config)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { weight_decay: loaded.config.weight_decay, ..Default::default() },
    );
    checkpoint::restore_into(&loaded, &mut model.store, &mut opt)?;
    Ok((model, opt, loaded.step, loaded.rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    TR,
    Fusion,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<AblationAxis> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "t_r" => Ok(AblationAxis::TR),
            "fusion" => Ok(AblationAxis::Fusion),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

pub struct AblationCell {
    pub name: String,
    pub scores: Vec<Real>,
    pub mean: Real,
    pub spread: Real,
}

fn cell_configs(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Components => [(true, true), (true, false), (false, true), (false, false)]
            .iter()
            .map(|&(ovp, vmtf)| {
                let name = match (ovp, vmtf) {
                    (true, true) => "ovp+vmtf",
                    (true, false) => "ovp",
                    (false, true) => "vmtf",
                    (false, false) => "neither",
                };
                (name.to_string(), RunConfig { ovp_enabled: ovp, vmtf_enabled: vmtf, ..base.clone() })
            })
            .collect(),
        AblationAxis::TR => [0usize, 4, 8]
            .iter()
            .map(|&t| (format!("t_r={t}"), RunConfig { t_r: t, ..base.clone() }))
            .collect(),
        AblationAxis::Fusion => [FusionMode::Global, FusionMode::Detailed, FusionMode::Both]
            .iter()
            .map(|&m| (m.name().to_string(), RunConfig { fusion_mode: m, ..base.clone() }))
            .collect(),
    }
}

/// The split each axis is judged on, mirroring what the corresponding
/// comparison measures: components on video reasoning, t_r on the video
/// modes, fusion on the full mix.
fn axis_eval_config(base: &RunConfig, axis: AblationAxis) -> RunConfig {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Components => {
            cfg.mix_refer = 0.0;
            cfg.mix_reason = 0.0;
            cfg.mix_refer_video = 0.0;
        }
        AblationAxis::TR => {
            cfg.mix_refer = 0.0;
            cfg.mix_reason = 0.0;
        }
        AblationAxis::Fusion => {}
    }
    cfg
}

/// Trains every cell on the axis with k seeds each (cell x maps to the same
/// seed set for every cell) and reports the comparison scalar per cell.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    k_seeds: usize,
    log: &mut dyn Write,
) -> Result<Vec<AblationCell>> {
    if k_seeds == 0 {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let eval_cfg = axis_eval_config(base, axis);
    let eval_corpus = generate_corpus(&corpus_spec(
        &eval_cfg,
        eval_cfg.eval_size,
        held_out_seed(base.seed),
    ))?;
    let eval_items: Vec<EvalItem> = eval_corpus.iter().map(EvalItem::from_sample).collect();
    let mut cells = Vec::new();
    for (name, cell_cfg) in cell_configs(base, axis) {
        let mut scores = Vec::with_capacity(k_seeds);
        for si in 0..k_seeds {
            let cfg = RunConfig { seed: base.seed + si as u64, ..cell_cfg.clone() };
            let mut sink = std::io::sink();
            let mut model = Model::new(&cfg)?;
            let mut opt = AdamW::new(
                &model.store,
                AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() },
            );
            train_in_place(&cfg, &mut model, &mut opt, &mut sink)?;
            let score = match axis {
                AblationAxis::Fusion => evaluate(&model, &eval_items)?.score,
                _ => evaluate(&model, &eval_items)?.overall.jf,
            };
            writeln!(log, "ablate axis={axis:?} cell={name} seed={} score={score:.4}", cfg.seed)?;
            scores.push(score);
        }
        let mean = scores.iter().sum::<Real>() / scores.len() as Real;
        let spread = scores.iter().cloned().fold(Real::MIN, Real::max)
            - scores.iter().cloned().fold(Real::MAX, Real::min);
        writeln!(log, "ablate axis={axis:?} cell={name} mean={mean:.4} spread={spread:.4}")?;
        cells.push(AblationCell { name, scores, mean, spread });
    }
    Ok(cells)
}

/// The bare training loop against an existing model/optimizer, used by the
/// ablation runner where the final eval happens on a shared split.
pub fn train_in_place(
    cfg: &RunConfig,
    model: &mut Model,
    opt: &mut AdamW,
    log: &mut dyn Write,
) -> Result<Vec<Real>> {
    let train_corpus = generate_corpus(&corpus_spec(cfg, cfg.train_size, cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let weights = LossWeights { cls: cfg.w_cls, mask: cfg.w_mask, b: cfg.w_b, d: cfg.w_d };
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    for step in 0..cfg.total_steps {
        let lr = cosine_warmup_lr(step, cfg.warmup(), cfg.total_steps, cfg.peak_lr, cfg.lr_floor);
        let mut grad_sum: Option<Grads> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..train_corpus.len());
            let s = &train_corpus[idx];
            let rendered = render(&s.scene);
            let frames = split_frames(&rendered.clip);
            let key = if s.mode.is_video() { rng.gen_range(0..frames.len()) } else { 0 };
            let gt: Vec<Mask> =
                s.target_ids.iter().map(|&o| rendered.masks[o][key].clone()).collect();
            let mut f = Fwd::new(&model.store);
            let (loss, report) = model.loss_on_sample(
                &mut f, s.mode, &frames, key, &s.instruction, &s.answer, &gt, &weights,
            )?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step} on sample id {} (corpus seed {})",
                    s.id, cfg.seed
                )));
            }
            batch_loss += report.total;
            accumulate(&mut grad_sum, f.backward(&loss)?);
        }
        let inv = 1.0 / cfg.batch_size as Real;
        let mut grads = grad_sum.expect("batch_size >= 1");
        for g in grads.by_id.iter_mut().flatten() {
            for x in &mut g.data {
                *x *= inv;
            }
        }
        batch_loss *= inv;
        opt.step(&mut model.store, &grads, lr);
        losses.push(batch_loss);
        writeln!(log, "step={step} lr={lr:.6e} loss={batch_loss:.4}")?;
    }
    Ok(losses)
}

/// Writes, per frame: a 3-panel graymap (input luminance | ground truth |
/// prediction, 1-px separators) and a color overlay with the prediction
/// burned into the red channel.
pub fn render_masks(model: &Model, items: &[EvalItem], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut answers = String::new();
    for item in items {
        let pred = model.predict_sample(item.mode, &item.frames, &item.instruction)?;
        answers.push_str(&format!(
            "{:05}\t{}\t{}\n",
            item.id,
            item.mode.name(),
            answer_text(&pred.answer)
        ));
        for (t, frame) in item.frames.iter().enumerate() {
            let (h, w) = (frame.shape[0], frame.shape[1]);
            let gt = &item.gt[t];
            let pm = &pred.per_frame[t];
            let mut panel = vec![0u8; h * (3 * w + 2)];
            let row_w = 3 * w + 2;
            for y in 0..h {
                for x in 0..w {
                    let lum = (frame.data[(y * w + x) * 3..(y * w + x) * 3 + 3]
                        .iter()
                        .sum::<Real>()
                        / 3.0)
                        .clamp(0.0, 1.0);
                    panel[y * row_w + x] = (lum * 255.0).round() as u8;
                    panel[y * row_w + w + 1 + x] = if gt.get(y, x) { 255 } else { 0 };
                    panel[y * row_w + 2 * w + 2 + x] = if pm.get(y, x) { 255 } else { 0 };
                }
                panel[y * row_w + w] = 128;
                panel[y * row_w + 2 * w + 1] = 128;
            }
            let mut buf = Vec::new();
            write!(buf, "P5\n{} {}\n255\n", row_w, h)?;
            buf.extend_from_slice(&panel);
            std::fs::write(out_dir.join(format!("{:05}_{t:02}.pgm", item.id)), buf)?;

            let mut overlay = frame.clone();
            for y in 0..h {
                for x in 0..w {
                    if pm.get(y, x) {
                        let p = (y * w + x) * 3;
                        overlay.data[p] = 1.0;
                        overlay.data[p + 1] *= 0.4;
                        overlay.data[p + 2] *= 0.4;
                    }
                }
            }
            dataio::write_ppm(
                &out_dir.join(format!("{:05}_{t:02}_overlay.ppm", item.id)),
                &overlay,
            )?;
        }
    }
    std::fs::write(out_dir.join("answers.txt"), answers)?;
    Ok(())
}

/// Answer text for logging: detokenized generated ids.
pub fn answer_text(ids: &[u32]) -> String {
    vocab::detokenize(ids)
}

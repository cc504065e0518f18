//! Procedural moving-shapes corpus: scene sampling, rasterization, and an
//! instruction grammar whose answers are decidable in closed form from the
//! scene description.
//!
//! Every sample is a pure function of (corpus seed, sample index): each index
//! gets its own ChaCha8 stream, so generation order and thread count never
//! change the data.

use crate::metrics::Mask;
use crate::tensor::Array;
use crate::vocab;
use crate::{Error, Real, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const BACKGROUND: [Real; 3] = [0.10, 0.10, 0.10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 6] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Magenta,
    Color::Cyan,
];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }
    pub fn rgb(self) -> [Real; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.20, 0.30, 0.90],
            Color::Yellow => [0.90, 0.85, 0.20],
            Color::Magenta => [0.85, 0.20, 0.80],
            Color::Cyan => [0.20, 0.80, 0.85],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// Task family. Image modes render a single frame; video modes a full clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Refer,
    Reason,
    ReferVideo,
    ReasonVideo,
}

impl Mode {
    pub fn is_video(self) -> bool {
        matches!(self, Mode::ReferVideo | Mode::ReasonVideo)
    }
    pub fn is_reasoning(self) -> bool {
        matches!(self, Mode::Reason | Mode::ReasonVideo)
    }
    pub fn name(self) -> &'static str {
        match self {
            Mode::Refer => "refer",
            Mode::Reason => "reason",
            Mode::ReferVideo => "refer_video",
            Mode::ReasonVideo => "reason_video",
        }
    }
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "refer" => Ok(Mode::Refer),
            "reason" => Ok(Mode::Reason),
            "refer_video" => Ok(Mode::ReferVideo),
            "reason_video" => Ok(Mode::ReasonVideo),
            other => Err(Error::Data(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// Circumradius for circles/triangles, half side for squares, in pixels.
    pub size: Real,
    /// Center at frame 0, in pixel coordinates (x right, y down).
    pub pos: (Real, Real),
    /// Pixels per frame.
    pub vel: (Real, Real),
}

impl Object {
    pub fn center_at(&self, t: usize) -> (Real, Real) {
        (self.pos.0 + self.vel.0 * t as Real, self.pos.1 + self.vel.1 * t as Real)
    }
    pub fn speed(&self) -> Real {
        (self.vel.0 * self.vel.0 + self.vel.1 * self.vel.1).sqrt()
    }
}

/// Complete analytic description of a clip. Rendering is a pure function of
/// this value, and instruction answers are decided from it without touching
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub objects: Vec<Object>,
    pub difficulty: Difficulty,
}

pub struct RenderedScene {
    /// [frames, h, w, 3] in [0, 1].
    pub clip: Array,
    /// masks[obj][frame]: visible pixels of each object under occlusion.
    pub masks: Vec<Vec<Mask>>,
}

#[derive(Clone, Debug)]
pub struct InstructionSample {
    pub id: u64,
    pub mode: Mode,
    pub scene: SceneSpec,
    pub instruction_text: String,
    pub instruction: Vec<u32>,
    /// Full attribute description of the targets; the text-loss target and
    /// what the model decodes at evaluation time.
    pub answer_text: String,
    pub answer: Vec<u32>,
    /// Indices into scene.objects, sorted ascending. Never empty.
    pub target_ids: Vec<usize>,
}

// Predicate margins. Scenes are resampled until the intended answer wins by
// at least these gaps, so labels stay stable under small perturbations and
// the tasks are learnable at low resolution.
const SIZE_MARGIN: Real = 0.8;
const POS_MARGIN: Real = 2.0;

/// Size margins scale with the canvas (0.8 px at the 32-px reference), so
/// four pairwise-separated radii stay samplable on small canvases.
fn size_margin(s: Real) -> Real {
    SIZE_MARGIN * (s / 32.0)
}
const VEL_MARGIN: Real = 0.5;
const DIR_MIN: Real = 0.4;
const SPEED_MARGIN: Real = 0.5;
const VISIBLE_FRACTION: Real = 0.6;
const MAX_SCENE_RETRIES: usize = 64;

pub fn object_count(d: Difficulty) -> usize {
    match d {
        Difficulty::Easy => 2,
        Difficulty::Medium => 3,
        Difficulty::Hard => 4,
    }
}

/// Fraction of the object's bounding box inside the canvas at frame t.
fn visible_fraction(obj: &Object, h: usize, w: usize, t: usize) -> Real {
    let (cx, cy) = obj.center_at(t);
    let r = obj.size;
    let x0 = (cx - r).max(0.0);
    let x1 = (cx + r).min(w as Real);
    let y0 = (cy - r).max(0.0);
    let y1 = (cy + r).min(h as Real);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    (x1 - x0) * (y1 - y0) / (4.0 * r * r)
}

/// Samples a scene: distinct (color, shape) pairs, sizes separated by a
/// margin, objects fully inside the canvas at frame 0, and velocities kept
/// small enough that every object stays mostly visible for the whole clip.
pub fn generate_scene(
    rng: &mut ChaCha8Rng,
    difficulty: Difficulty,
    h: usize,
    w: usize,
    frames: usize,
) -> Result<SceneSpec> {
    let n = object_count(difficulty);
    let s = h.min(w) as Real;
    let (r_lo, r_hi) = (0.10 * s, 0.22 * s);
    for _ in 0..MAX_SCENE_RETRIES {
        // Attribute tuples without replacement keeps "the {color} {shape}"
        // unambiguous in every scene.
        let mut pairs: Vec<(Color, Shape)> = COLORS
            .iter()
            .flat_map(|&c| SHAPES.iter().map(move |&sh| (c, sh)))
            .collect();
        let mut attrs = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.gen_range(0..pairs.len());
            attrs.push(pairs.swap_remove(k));
        }

        let mut sizes: Vec<Real> = Vec::with_capacity(n);
        let mut tries = 0;
        while sizes.len() < n {
            let r = rng.gen_range(r_lo..r_hi);
            if sizes.iter().all(|&q: &Real| (q - r).abs() >= size_margin(s)) {
                sizes.push(r);
            }
            tries += 1;
            if tries > 200 {
                break;
            }
        }
        if sizes.len() < n {
            continue;
        }

        let mut objects: Vec<Object> = Vec::with_capacity(n);
        let mut placed_ok = true;
        for i in 0..n {
            let r = sizes[i];
            let mut ok = false;
            for _ in 0..100 {
                let x = rng.gen_range(r + 0.5..w as Real - r - 0.5);
                let y = rng.gen_range(r + 0.5..h as Real - r - 0.5);
                // Easy scenes keep objects apart; harder ones allow overlap.
                let min_sep = match difficulty {
                    Difficulty::Easy => 1.0,
                    Difficulty::Medium => 0.6,
                    Difficulty::Hard => 0.0,
                };
                let sep_ok = objects.iter().all(|o| {
                    let dx = o.pos.0 - x;
                    let dy = o.pos.1 - y;
                    (dx * dx + dy * dy).sqrt() >= min_sep * (o.size + r)
                });
                if sep_ok {
                    objects.push(Object {
                        shape: attrs[i].1,
                        color: attrs[i].0,
                        size: r,
                        pos: (x, y),
                        vel: (0.0, 0.0),
                    });
                    ok = true;
                    break;
                }
            }
            if !ok {
                placed_ok = false;
                break;
            }
        }
        if !placed_ok {
            continue;
        }

        if difficulty != Difficulty::Easy {
            for obj in &mut objects {
                let mut v = (0.0, 0.0);
                for attempt in 0..40 {
                    let shrink = 1.0 / (1.0 + attempt as Real / 10.0);
                    let cand = (
                        rng.gen_range(-1.2..1.2) * shrink,
                        rng.gen_range(-1.2..1.2) * shrink,
                    );
                    let speed = (cand.0 * cand.0 + cand.1 * cand.1).sqrt();
                    if speed < 0.35 {
                        continue;
                    }
                    let probe = Object { vel: cand, ..obj.clone() };
                    if (0..frames).all(|t| visible_fraction(&probe, h, w, t) >= VISIBLE_FRACTION) {
                        v = cand;
                        break;
                    }
                }
                obj.vel = v;
            }
            // A clip where everything ended up static is not a motion scene.
            if objects.iter().all(|o| o.speed() == 0.0) {
                continue;
            }
        }

        return Ok(SceneSpec { h, w, frames, objects, difficulty });
    }
    Err(Error::Data("scene sampling exhausted retries".into()))
}

fn inside(shape: Shape, cx: Real, cy: Real, r: Real, px: Real, py: Real) -> bool {
    let dx = px - cx;
    let dy = py - cy;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // Equilateral, apex up, circumradius r.
            let s3 = 0.866_025_403_784_438_6; // sin 60°
            let v = [(cx, cy - r), (cx - s3 * r, cy + 0.5 * r), (cx + s3 * r, cy + 0.5 * r)];
            let mut sign = 0.0;
            for k in 0..3 {
                let (ax, ay) = v[k];
                let (bx, by) = v[(k + 1) % 3];
                let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                if cross != 0.0 {
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
            }
            true
        }
    }
}

/// Rasterizes at pixel centers in painter's order (later objects on top).
/// Marks in the per-object masks cover only the visible region, so they are
/// pairwise disjoint within each frame by construction.
pub fn render(spec: &SceneSpec) -> RenderedScene {
    let (t_n, h, w) = (spec.frames, spec.h, spec.w);
    let mut clip = Array::zeros(&[t_n, h, w, 3]);
    let mut masks: Vec<Vec<Mask>> =
        spec.objects.iter().map(|_| Vec::with_capacity(t_n)).collect();
    for t in 0..t_n {
        let mut owner = vec![usize::MAX; h * w];
        let centers: Vec<(Real, Real)> =
            spec.objects.iter().map(|o| o.center_at(t)).collect();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as Real + 0.5, y as Real + 0.5);
                for (i, obj) in spec.objects.iter().enumerate() {
                    if inside(obj.shape, centers[i].0, centers[i].1, obj.size, px, py) {
                        owner[y * w + x] = i;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let rgb = match owner[y * w + x] {
                    usize::MAX => BACKGROUND,
                    i => spec.objects[i].color.rgb(),
                };
                for c in 0..3 {
                    clip.data[((t * h + y) * w + x) * 3 + c] = rgb[c];
                }
            }
        }
        for (i, per_obj) in masks.iter_mut().enumerate() {
            per_obj.push(Mask {
                h,
                w,
                data: owner.iter().map(|&o| o == i).collect(),
            });
        }
    }
    RenderedScene { clip, masks }
}

/// Referring expressions and closed-form reasoning predicates. Evaluation is
/// analytic over the SceneSpec, never over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phrase {
    Attr { color: Option<Color>, shape: Option<Shape>, plural: bool },
    Pred(Pred),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pred {
    Largest,
    Smallest,
    Leftmost,
    Rightmost,
    Topmost,
    Lowest,
    MovingLeft,
    MovingRight,
    MovingUp,
    MovingDown,
    Fastest,
    Slowest,
}

pub const STATIC_PREDS: [Pred; 6] = [
    Pred::Largest,
    Pred::Smallest,
    Pred::Leftmost,
    Pred::Rightmost,
    Pred::Topmost,
    Pred::Lowest,
];
pub const MOTION_PREDS: [Pred; 6] = [
    Pred::MovingLeft,
    Pred::MovingRight,
    Pred::MovingUp,
    Pred::MovingDown,
    Pred::Fastest,
    Pred::Slowest,
];

impl Phrase {
    pub fn text(&self) -> String {
        match *self {
            Phrase::Attr { color: Some(c), shape: Some(s), plural: false } => {
                format!("the {} {}", c.word(), s.word())
            }
            Phrase::Attr { color: Some(c), shape: None, plural: false } => {
                format!("the {} object", c.word())
            }
            Phrase::Attr { color: Some(c), shape: None, plural: true } => {
                format!("the {} objects", c.word())
            }
            Phrase::Attr { color: None, shape: Some(s), plural: false } => {
                format!("the {}", s.word())
            }
            Phrase::Attr { color: None, shape: Some(s), plural: true } => {
                format!("the {}", s.plural())
            }
            Phrase::Attr { .. } => unreachable!("phrase without color or shape"),
            Phrase::Pred(p) => match p {
                Pred::Largest => "the largest object".into(),
                Pred::Smallest => "the smallest object".into(),
                Pred::Leftmost => "the leftmost object".into(),
                Pred::Rightmost => "the rightmost object".into(),
                Pred::Topmost => "the topmost object".into(),
                Pred::Lowest => "the lowest object".into(),
                Pred::MovingLeft => "the object moving left".into(),
                Pred::MovingRight => "the object moving right".into(),
                Pred::MovingUp => "the object moving up".into(),
                Pred::MovingDown => "the object moving down".into(),
                Pred::Fastest => "the fastest object".into(),
                Pred::Slowest => "the slowest object".into(),
            },
        }
    }
}

/// Index of the unique argmax of `score`, requiring a winning margin; None if
/// the margin is not met or a gate excludes the winner.
fn unique_argmax(
    scores: &[Real],
    margin: Real,
    gate: impl Fn(Real) -> bool,
) -> Option<usize> {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    if !gate(scores[best]) {
        return None;
    }
    for (i, &s) in scores.iter().enumerate() {
        if i != best && scores[best] - s < margin {
            return None;
        }
    }
    Some(best)
}

/// Evaluates a phrase against a scene. Returns the sorted target set, or
/// None when the phrase does not pick out a nonempty, unambiguous answer.
pub fn eval_phrase(spec: &SceneSpec, phrase: &Phrase) -> Option<Vec<usize>> {
    let objs = &spec.objects;
    match *phrase {
        Phrase::Attr { color, shape, plural } => {
            let hits: Vec<usize> = objs
                .iter()
                .enumerate()
                .filter(|(_, o)| {
                    color.map_or(true, |c| o.color == c)
                        && shape.map_or(true, |s| o.shape == s)
                })
                .map(|(i, _)| i)
                .collect();
            match (plural, hits.len()) {
                (false, 1) => Some(hits),
                (true, n) if n >= 2 => Some(hits),
                _ => None,
            }
        }
        Phrase::Pred(p) => {
            let score: Vec<Real> = objs
                .iter()
                .map(|o| match p {
                    Pred::Largest => o.size,
                    Pred::Smallest => -o.size,
                    Pred::Leftmost => -o.pos.0,
                    Pred::Rightmost => o.pos.0,
                    Pred::Topmost => -o.pos.1,
                    Pred::Lowest => o.pos.1,
                    Pred::MovingLeft => -o.vel.0,
                    Pred::MovingRight => o.vel.0,
                    Pred::MovingUp => -o.vel.1,
                    Pred::MovingDown => o.vel.1,
                    Pred::Fastest => o.speed(),
                    Pred::Slowest => -o.speed(),
                })
                .collect();
            let (margin, gate): (Real, Box<dyn Fn(Real) -> bool>) = match p {
                Pred::Largest | Pred::Smallest => {
                    (size_margin(spec.h.min(spec.w) as Real), Box::new(|_| true))
                }
                Pred::Leftmost | Pred::Rightmost | Pred::Topmost | Pred::Lowest => {
                    (POS_MARGIN, Box::new(|_| true))
                }
                Pred::MovingLeft | Pred::MovingRight | Pred::MovingUp | Pred::MovingDown => {
                    (VEL_MARGIN, Box::new(|s: Real| s >= DIR_MIN))
                }
                Pred::Fastest | Pred::Slowest => (SPEED_MARGIN, Box::new(|_| true)),
            };
            unique_argmax(&score, margin, |s| gate(s)).map(|i| vec![i])
        }
    }
}

fn full_description(spec: &SceneSpec, ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| {
            let o = &spec.objects[i];
            format!("the {} {}", o.color.word(), o.shape.word())
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

fn template(mode: Mode) -> &'static str {
    match mode {
        Mode::Refer => {
            "you need to perform referring expression segmentation on the image according to the text prompt :"
        }
        Mode::Reason => {
            "you need to perform reasoning segmentation on the image according to the text prompt :"
        }
        Mode::ReferVideo => {
            "you need to perform referring video object segmentation on the video according to the text prompt :"
        }
        Mode::ReasonVideo => {
            "you need to perform reasoning video object segmentation on the video according to the text prompt :"
        }
    }
}

fn referring_candidates(spec: &SceneSpec) -> Vec<Phrase> {
    let mut out = Vec::new();
    let allow_plural = spec.difficulty != Difficulty::Easy;
    for o in &spec.objects {
        out.push(Phrase::Attr { color: Some(o.color), shape: Some(o.shape), plural: false });
    }
    for &c in &COLORS {
        for plural in [false, true] {
            if plural && !allow_plural {
                continue;
            }
            let p = Phrase::Attr { color: Some(c), shape: None, plural };
            if eval_phrase(spec, &p).is_some() {
                out.push(p);
            }
        }
    }
    for &s in &SHAPES {
        for plural in [false, true] {
            if plural && !allow_plural {
                continue;
            }
            let p = Phrase::Attr { color: None, shape: Some(s), plural };
            if eval_phrase(spec, &p).is_some() {
                out.push(p);
            }
        }
    }
    out
}

fn reasoning_candidates(spec: &SceneSpec, mode: Mode) -> Vec<Phrase> {
    let mut out: Vec<Phrase> = STATIC_PREDS
        .iter()
        .map(|&p| Phrase::Pred(p))
        .filter(|p| eval_phrase(spec, p).is_some())
        .collect();
    if mode.is_video() && spec.difficulty != Difficulty::Easy {
        let motion: Vec<Phrase> = MOTION_PREDS
            .iter()
            .map(|&p| Phrase::Pred(p))
            .filter(|p| eval_phrase(spec, p).is_some())
            .collect();
        // Motion questions are the point of video reasoning; double their odds.
        for p in &motion {
            out.push(*p);
            out.push(*p);
        }
    }
    out
}

/// Builds one instruction for an existing scene. Fails when the scene admits
/// no unambiguous phrase for the mode, in which case callers resample.
pub fn generate_instruction(
    spec: &SceneSpec,
    mode: Mode,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<InstructionSample> {
    let cands = if mode.is_reasoning() {
        reasoning_candidates(spec, mode)
    } else {
        referring_candidates(spec)
    };
    if cands.is_empty() {
        return Err(Error::Data("no unambiguous phrase for scene".into()));
    }
    let phrase = cands[rng.gen_range(0..cands.len())];
    let target_ids = eval_phrase(spec, &phrase)
        .ok_or_else(|| Error::Data("sampled phrase lost its answer".into()))?;
    let instruction_text = format!("{} {}", template(mode), phrase.text());
    let answer_text = full_description(spec, &target_ids);
    let instruction = vocab::tokenize(&instruction_text);
    let answer = vocab::tokenize(&answer_text);
    debug_assert!(!instruction.contains(&vocab::UNK), "instruction words must be in vocab");
    debug_assert!(!answer.contains(&vocab::UNK), "answer words must be in vocab");
    Ok(InstructionSample {
        id,
        mode,
        scene: spec.clone(),
        instruction_text,
        instruction,
        answer_text,
        answer,
        target_ids,
    })
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub size: usize,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub clip_len: usize,
    /// Weights for easy / medium / hard.
    pub difficulty_mix: [Real; 3],
    /// Weights for refer / reason / refer_video / reason_video.
    pub mode_mix: [Real; 4],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            size: 512,
            seed: 7,
            h: 32,
            w: 32,
            clip_len: 4,
            difficulty_mix: [1.0, 1.0, 1.0],
            mode_mix: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

fn pick_weighted<T: Copy>(items: &[T], weights: &[Real], rng: &mut ChaCha8Rng) -> T {
    let total: Real = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total.max(1e-12));
    for (item, &w) in items.iter().zip(weights) {
        if u < w {
            return *item;
        }
        u -= w;
    }
    items[items.len() - 1]
}

/// Generates sample `index` of the corpus. Pure in (spec.seed, index).
pub fn generate_sample(spec: &CorpusSpec, index: u64) -> Result<InstructionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));
    let mode = pick_weighted(
        &[Mode::Refer, Mode::Reason, Mode::ReferVideo, Mode::ReasonVideo],
        &spec.mode_mix,
        &mut rng,
    );
    let difficulty = pick_weighted(
        &[Difficulty::Easy, Difficulty::Medium, Difficulty::Hard],
        &spec.difficulty_mix,
        &mut rng,
    );
    let frames = if mode.is_video() { spec.clip_len } else { 1 };
    for _ in 0..MAX_SCENE_RETRIES {
        let scene = generate_scene(&mut rng, difficulty, spec.h, spec.w, frames)?;
        match generate_instruction(&scene, mode, index, &mut rng) {
            Ok(sample) => return Ok(sample),
            Err(_) => continue,
        }
    }
    Err(Error::Data(format!("sample {index}: no admissible scene after retries")))
}

/// Generates the whole corpus, optionally across threads. The result is
/// index-deterministic: thread count never changes any sample.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<InstructionSample>> {
    let threads: usize = std::env::var("TINYSEG_DATA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    if threads <= 1 || spec.size < 32 {
        return (0..spec.size as u64).map(|i| generate_sample(spec, i)).collect();
    }
    let chunk = spec.size.div_ceil(threads);
    let mut out: Vec<Option<InstructionSample>> = vec![None; spec.size];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let start = (c * chunk) as u64;
            handles.push(scope.spawn(move || -> Result<()> {
                for (k, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(generate_sample(spec, start + k as u64)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().map_err(|_| Error::Data("generator thread panicked".into()))??;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|s| s.expect("all slots filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn lone_object(shape: Shape, size: Real, pos: (Real, Real)) -> SceneSpec {
        SceneSpec {
            h: 32,
            w: 32,
            frames: 1,
            objects: vec![Object {
                shape,
                color: Color::Red,
                size,
                pos,
                vel: (0.0, 0.0),
            }],
            difficulty: Difficulty::Easy,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = generate_scene(&mut rng(11), Difficulty::Hard, 32, 32, 6).unwrap();
        let b = generate_scene(&mut rng(11), Difficulty::Hard, 32, 32, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn difficulty_controls_count_and_motion() {
        let e = generate_scene(&mut rng(1), Difficulty::Easy, 32, 32, 1).unwrap();
        let m = generate_scene(&mut rng(2), Difficulty::Medium, 32, 32, 6).unwrap();
        let h = generate_scene(&mut rng(3), Difficulty::Hard, 32, 32, 6).unwrap();
        assert_eq!(e.objects.len(), 2);
        assert_eq!(m.objects.len(), 3);
        assert_eq!(h.objects.len(), 4);
        assert!(e.objects.iter().all(|o| o.vel == (0.0, 0.0)));
        assert!(m.objects.iter().any(|o| o.speed() > 0.0));
    }

    #[test]
    fn attribute_tuples_are_distinct() {
        for seed in 0..30 {
            let s = generate_scene(&mut rng(seed), Difficulty::Hard, 32, 32, 6).unwrap();
            let mut tuples: Vec<_> =
                s.objects.iter().map(|o| (o.color, o.shape)).collect();
            tuples.sort_by_key(|&(c, sh)| {
                (COLORS.iter().position(|&x| x == c), SHAPES.iter().position(|&x| x == sh))
            });
            tuples.dedup();
            assert_eq!(tuples.len(), s.objects.len());
        }
    }

    #[test]
    fn objects_start_fully_inside() {
        for seed in 0..20 {
            let s = generate_scene(&mut rng(seed), Difficulty::Medium, 32, 32, 6).unwrap();
            for o in &s.objects {
                assert!(o.pos.0 - o.size >= 0.0 && o.pos.0 + o.size <= 32.0);
                assert!(o.pos.1 - o.size >= 0.0 && o.pos.1 + o.size <= 32.0);
                for t in 0..6 {
                    assert!(visible_fraction(o, 32, 32, t) >= VISIBLE_FRACTION - 1e-9);
                }
            }
        }
    }

    #[test]
    fn circle_pixel_area_matches_analytic() {
        // Pixel-center coverage of a disk differs from pi r^2 by O(perimeter).
        for &r in &[4.0, 6.0, 7.0] {
            let s = lone_object(Shape::Circle, r, (16.0, 16.0));
            let rend = render(&s);
            let count = rend.masks[0][0].data.iter().filter(|&&b| b).count() as Real;
            let analytic = std::f64::consts::PI as Real * r * r;
            assert!(
                (count - analytic).abs() <= 4.0 * r,
                "r={r}: count {count} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn square_pixel_area_is_exact_for_aligned_square() {
        // Half-side 4 centered on a pixel corner covers exactly 8x8 centers.
        let s = lone_object(Shape::Square, 4.0, (16.0, 16.0));
        let rend = render(&s);
        let count = rend.masks[0][0].data.iter().filter(|&&b| b).count();
        assert_eq!(count, 64);
    }

    #[test]
    fn painter_order_hides_covered_object() {
        let mut s = lone_object(Shape::Circle, 4.0, (16.0, 16.0));
        s.objects.push(Object {
            shape: Shape::Square,
            color: Color::Blue,
            size: 6.0,
            pos: (16.0, 16.0),
            vel: (0.0, 0.0),
        });
        let rend = render(&s);
        assert_eq!(rend.masks[0][0].data.iter().filter(|&&b| b).count(), 0);
        assert!(rend.masks[1][0].data.iter().filter(|&&b| b).count() > 0);
    }

    #[test]
    fn masks_are_disjoint_and_match_rendered_colors() {
        let s = generate_scene(&mut rng(5), Difficulty::Hard, 32, 32, 6).unwrap();
        let rend = render(&s);
        for t in 0..s.frames {
            for p in 0..32 * 32 {
                let owners: Vec<usize> = (0..s.objects.len())
                    .filter(|&i| rend.masks[i][t].data[p])
                    .collect();
                assert!(owners.len() <= 1, "overlapping masks at frame {t} pixel {p}");
                let base = ((t * 32 + p / 32) * 32 + p % 32) * 3;
                let px = [rend.clip.data[base], rend.clip.data[base + 1], rend.clip.data[base + 2]];
                let want = match owners.first() {
                    Some(&i) => s.objects[i].color.rgb(),
                    None => BACKGROUND,
                };
                assert_eq!(px, want);
            }
        }
    }

    #[test]
    fn moving_object_mask_translates() {
        let mut s = lone_object(Shape::Square, 4.0, (10.0, 16.0));
        s.frames = 3;
        s.objects[0].vel = (2.0, 0.0);
        let rend = render(&s);
        let count = |t: usize| rend.masks[0][t].data.iter().filter(|&&b| b).count();
        assert_eq!(count(0), count(2));
        // Frame 2 mask equals frame 0 mask shifted right by 4 pixels.
        let m0 = &rend.masks[0][0];
        let m2 = &rend.masks[0][2];
        for y in 0..32 {
            for x in 0..28 {
                assert_eq!(m0.data[y * 32 + x], m2.data[y * 32 + x + 4]);
            }
        }
    }

    #[test]
    fn predicate_semantics_on_hand_built_scene() {
        let mut s = SceneSpec {
            h: 32,
            w: 32,
            frames: 6,
            objects: vec![
                Object {
                    shape: Shape::Circle,
                    color: Color::Red,
                    size: 6.5,
                    pos: (8.0, 8.0),
                    vel: (-1.0, 0.0),
                },
                Object {
                    shape: Shape::Square,
                    color: Color::Blue,
                    size: 4.0,
                    pos: (22.0, 20.0),
                    vel: (1.5, 0.8),
                },
            ],
            difficulty: Difficulty::Medium,
        };
        let ask = |s: &SceneSpec, p: Pred| eval_phrase(s, &Phrase::Pred(p));
        assert_eq!(ask(&s, Pred::Largest), Some(vec![0]));
        assert_eq!(ask(&s, Pred::Smallest), Some(vec![1]));
        assert_eq!(ask(&s, Pred::Leftmost), Some(vec![0]));
        assert_eq!(ask(&s, Pred::Rightmost), Some(vec![1]));
        assert_eq!(ask(&s, Pred::Topmost), Some(vec![0]));
        assert_eq!(ask(&s, Pred::Lowest), Some(vec![1]));
        assert_eq!(ask(&s, Pred::MovingLeft), Some(vec![0]));
        assert_eq!(ask(&s, Pred::MovingRight), Some(vec![1]));
        assert_eq!(ask(&s, Pred::MovingDown), Some(vec![1]));
        assert_eq!(ask(&s, Pred::MovingUp), None); // nobody moves up >= 0.4
        assert_eq!(ask(&s, Pred::Fastest), Some(vec![1])); // |(1.5,.8)| = 1.7 vs 1.0
        // Margin failure: sizes 6.5 vs 6.0 are closer than the margin.
        s.objects[1].size = 6.0;
        assert_eq!(ask(&s, Pred::Largest), None);
    }

    #[test]
    fn referring_phrases_on_hand_built_scene() {
        let s = SceneSpec {
            h: 32,
            w: 32,
            frames: 1,
            objects: vec![
                Object {
                    shape: Shape::Circle,
                    color: Color::Red,
                    size: 5.0,
                    pos: (8.0, 8.0),
                    vel: (0.0, 0.0),
                },
                Object {
                    shape: Shape::Circle,
                    color: Color::Blue,
                    size: 4.0,
                    pos: (22.0, 22.0),
                    vel: (0.0, 0.0),
                },
            ],
            difficulty: Difficulty::Medium,
        };
        let full = Phrase::Attr {
            color: Some(Color::Red),
            shape: Some(Shape::Circle),
            plural: false,
        };
        assert_eq!(eval_phrase(&s, &full), Some(vec![0]));
        let shape_only =
            Phrase::Attr { color: None, shape: Some(Shape::Circle), plural: false };
        assert_eq!(eval_phrase(&s, &shape_only), None); // ambiguous: two circles
        let plural = Phrase::Attr { color: None, shape: Some(Shape::Circle), plural: true };
        assert_eq!(eval_phrase(&s, &plural), Some(vec![0, 1]));
        let absent =
            Phrase::Attr { color: Some(Color::Cyan), shape: None, plural: false };
        assert_eq!(eval_phrase(&s, &absent), None);
    }

    #[test]
    fn samples_are_pure_in_seed_and_index() {
        let spec = CorpusSpec { size: 8, ..CorpusSpec::default() };
        let a = generate_sample(&spec, 3).unwrap();
        let b = generate_sample(&spec, 3).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.instruction, b.instruction);
        assert_eq!(a.target_ids, b.target_ids);
        let c = generate_sample(&spec, 4).unwrap();
        assert_ne!(a.scene, c.scene);
    }

    #[test]
    fn corpus_matches_per_index_generation_across_threads() {
        let spec = CorpusSpec { size: 40, seed: 123, ..CorpusSpec::default() };
        std::env::set_var("TINYSEG_DATA_THREADS", "3");
        let threaded = generate_corpus(&spec).unwrap();
        std::env::remove_var("TINYSEG_DATA_THREADS");
        let serial = generate_corpus(&spec).unwrap();
        assert_eq!(threaded.len(), 40);
        for (x, y) in threaded.iter().zip(&serial) {
            assert_eq!(x.scene, y.scene);
            assert_eq!(x.instruction_text, y.instruction_text);
            assert_eq!(x.target_ids, y.target_ids);
        }
    }

    #[test]
    fn instructions_respect_mode_and_tokenize_cleanly() {
        let spec = CorpusSpec { size: 64, seed: 9, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        for s in &corpus {
            assert!(!s.target_ids.is_empty());
            assert!(s.target_ids.windows(2).all(|w| w[0] < w[1]));
            assert!(s.target_ids.iter().all(|&i| i < s.scene.objects.len()));
            assert_eq!(s.scene.frames, if s.mode.is_video() { spec.clip_len } else { 1 });
            assert!(!s.instruction.contains(&vocab::UNK));
            assert!(!s.answer.contains(&vocab::UNK));
            assert_eq!(vocab::detokenize(&s.instruction), s.instruction_text);
            if s.mode.is_reasoning() {
                assert!(s.instruction_text.contains("reasoning"));
            } else {
                assert!(s.instruction_text.contains("referring"));
            }
            // The answer names exactly the target objects.
            let want = full_description(&s.scene, &s.target_ids);
            assert_eq!(s.answer_text, want);
        }
    }

    #[test]
    fn reasoning_targets_match_independent_reevaluation() {
        // Re-derive the answer from the instruction text with a separate
        // parser and argmin/argmax pass; must match the generator exactly.
        let spec = CorpusSpec {
            size: 100,
            seed: 31,
            mode_mix: [0.0, 1.0, 0.0, 1.0],
            ..CorpusSpec::default()
        };
        for s in generate_corpus(&spec).unwrap() {
            let text = &s.instruction_text;
            let objs = &s.scene.objects;
            let pick_min = |f: &dyn Fn(&Object) -> Real| {
                (0..objs.len()).min_by(|&a, &b| f(&objs[a]).partial_cmp(&f(&objs[b])).unwrap())
            };
            let pick_max = |f: &dyn Fn(&Object) -> Real| {
                (0..objs.len()).max_by(|&a, &b| f(&objs[a]).partial_cmp(&f(&objs[b])).unwrap())
            };
            let got = if text.contains("largest") {
                pick_max(&|o| o.size)
            } else if text.contains("smallest") {
                pick_min(&|o| o.size)
            } else if text.contains("leftmost") {
                pick_min(&|o| o.pos.0)
            } else if text.contains("rightmost") {
                pick_max(&|o| o.pos.0)
            } else if text.contains("topmost") {
                pick_min(&|o| o.pos.1)
            } else if text.contains("lowest") {
                pick_max(&|o| o.pos.1)
            } else if text.contains("moving left") {
                pick_min(&|o| o.vel.0)
            } else if text.contains("moving right") {
                pick_max(&|o| o.vel.0)
            } else if text.contains("moving up") {
                pick_min(&|o| o.vel.1)
            } else if text.contains("moving down") {
                pick_max(&|o| o.vel.1)
            } else if text.contains("fastest") {
                pick_max(&|o| o.speed())
            } else if text.contains("slowest") {
                pick_min(&|o| o.speed())
            } else {
                panic!("unrecognized reasoning instruction: {text}");
            };
            assert_eq!(s.target_ids, vec![got.unwrap()], "text: {text}");
        }
    }
}

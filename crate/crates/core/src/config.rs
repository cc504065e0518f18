//! Run configuration: a flat UTF-8 `key = value` file. Unknown keys are
//! errors, every field has an explicit validated range, and the full set
//! round-trips through `to_text` for the checkpoint echo.

use crate::fusion::FusionMode;
use crate::synth::Difficulty;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub heads: usize,
    pub llm_layers: usize,
    pub ovp_layers: usize,
    pub vmtf_layers: usize,
    pub decoder_layers: usize,
    pub n_queries: usize,
    pub n_mask_tokens: usize,
    pub pixel_dim: usize,
    pub lora_rank: usize,
    // data
    pub h: usize,
    pub w: usize,
    pub clip_len: usize,
    pub t_r: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub mix_easy: Real,
    pub mix_medium: Real,
    pub mix_hard: Real,
    pub mix_refer: Real,
    pub mix_reason: Real,
    pub mix_refer_video: Real,
    pub mix_reason_video: Real,
    // optimizer
    pub peak_lr: Real,
    pub lr_floor: Real,
    pub weight_decay: Real,
    pub warmup_steps: Option<u64>,
    pub total_steps: u64,
    pub batch_size: usize,
    // loss weights
    pub w_cls: Real,
    pub w_mask: Real,
    pub w_b: Real,
    pub w_d: Real,
    // toggles
    pub ovp_enabled: bool,
    pub vmtf_enabled: bool,
    pub fusion_mode: FusionMode,
    pub lora_mode: bool,
    // eval
    pub score_threshold: Real,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 64,
            heads: 4,
            llm_layers: 3,
            ovp_layers: 3,
            vmtf_layers: 3,
            decoder_layers: 3,
            n_queries: 8,
            n_mask_tokens: 16,
            pixel_dim: 64,
            lora_rank: 4,
            h: 32,
            w: 32,
            clip_len: 4,
            t_r: 4,
            train_size: 2048,
            eval_size: 128,
            seed: 7,
            mix_easy: 1.0,
            mix_medium: 1.0,
            mix_hard: 1.0,
            mix_refer: 1.0,
            mix_reason: 1.0,
            mix_refer_video: 1.0,
            mix_reason_video: 1.0,
            peak_lr: 3e-4,
            lr_floor: 0.0,
            weight_decay: 0.0,
            warmup_steps: None,
            total_steps: 1500,
            batch_size: 4,
            w_cls: 1.0,
            w_mask: 1.0,
            w_b: 1.0,
            w_d: 1.0,
            ovp_enabled: true,
            vmtf_enabled: true,
            fusion_mode: FusionMode::Both,
            lora_mode: false,
            score_threshold: 0.5,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Warmup defaults to 5% of the run when not set explicitly.
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn difficulty_mix(&self) -> [(Difficulty, Real); 3] {
        [
            (Difficulty::Easy, self.mix_easy),
            (Difficulty::Medium, self.mix_medium),
            (Difficulty::Hard, self.mix_hard),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        let positive = |name: &str, v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::Config(format!("{name} must be >= 1, got 0")))
            } else {
                Ok(())
            }
        };
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("llm_layers", self.llm_layers),
            ("ovp_layers", self.ovp_layers),
            ("vmtf_layers", self.vmtf_layers),
            ("decoder_layers", self.decoder_layers),
            ("n_queries", self.n_queries),
            ("n_mask_tokens", self.n_mask_tokens),
            ("pixel_dim", self.pixel_dim),
            ("lora_rank", self.lora_rank),
            ("clip_len", self.clip_len),
            ("train_size", self.train_size),
            ("eval_size", self.eval_size),
            ("batch_size", self.batch_size),
        ] {
            positive(name, v)?;
        }
        if self.d % self.heads != 0 {
            return err(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.d % 4 != 0 {
            return err(format!("d ({}) must be a multiple of 4", self.d));
        }
        if self.pixel_dim % 4 != 0 {
            return err(format!("pixel_dim ({}) must be a multiple of 4", self.pixel_dim));
        }
        if self.h % 8 != 0 || self.w % 8 != 0 || self.h < 16 || self.w < 16 {
            return err(format!(
                "canvas {}x{} must be multiples of 8, at least 16",
                self.h, self.w
            ));
        }
        if self.h > 128 || self.w > 128 {
            return err("canvas above 128x128 is outside the toy envelope".into());
        }
        if self.t_r > 16 {
            return err(format!("t_r {} out of range 0..=16", self.t_r));
        }
        if self.clip_len > 32 {
            return err(format!("clip_len {} out of range 1..=32", self.clip_len));
        }
        if self.total_steps == 0 {
            return err("total_steps must be >= 1".into());
        }
        if self.warmup() >= self.total_steps {
            return err(format!(
                "warmup ({}) must be below total_steps ({})",
                self.warmup(),
                self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err(format!("peak_lr must be positive and finite, got {}", self.peak_lr));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.peak_lr) {
            return err("lr_floor must lie in [0, peak_lr]".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be non-negative".into());
        }
        for (name, v) in [
            ("w_cls", self.w_cls),
            ("w_mask", self.w_mask),
            ("w_b", self.w_b),
            ("w_d", self.w_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        let dmix = self.mix_easy + self.mix_medium + self.mix_hard;
        let mmix = self.mix_refer + self.mix_reason + self.mix_refer_video + self.mix_reason_video;
        for (name, v) in [
            ("mix_easy", self.mix_easy),
            ("mix_medium", self.mix_medium),
            ("mix_hard", self.mix_hard),
            ("mix_refer", self.mix_refer),
            ("mix_reason", self.mix_reason),
            ("mix_refer_video", self.mix_refer_video),
            ("mix_reason_video", self.mix_reason_video),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if dmix <= 0.0 || mmix <= 0.0 {
            return err("difficulty and mode mixes must each sum to > 0".into());
        }
        if (self.mix_refer_video > 0.0 || self.mix_reason_video > 0.0) && self.clip_len < 2 {
            return err("video modes require clip_len >= 2".into());
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return err(format!(
                "score_threshold must lie in (0, 1), got {}",
                self.score_threshold
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "llm_layers" => self.llm_layers = num(key, value)?,
            "ovp_layers" => self.ovp_layers = num(key, value)?,
            "vmtf_layers" => self.vmtf_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "n_queries" => self.n_queries = num(key, value)?,
            "n_mask_tokens" => self.n_mask_tokens = num(key, value)?,
            "pixel_dim" => self.pixel_dim = num(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "h" => self.h = num(key, value)?,
            "w" => self.w = num(key, value)?,
            "clip_len" => self.clip_len = num(key, value)?,
            "t_r" => self.t_r = num(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "eval_size" => self.eval_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mix_easy" => self.mix_easy = num(key, value)?,
            "mix_medium" => self.mix_medium = num(key, value)?,
            "mix_hard" => self.mix_hard = num(key, value)?,
            "mix_refer" => self.mix_refer = num(key, value)?,
            "mix_reason" => self.mix_reason = num(key, value)?,
            "mix_refer_video" => self.mix_refer_video = num(key, value)?,
            "mix_reason_video" => self.mix_reason_video = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "lr_floor" => self.lr_floor = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_steps" => self.warmup_steps = Some(num(key, value)?),
            "total_steps" => self.total_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "w_cls" => self.w_cls = num(key, value)?,
            "w_mask" => self.w_mask = num(key, value)?,
            "w_b" => self.w_b = num(key, value)?,
            "w_d" => self.w_d = num(key, value)?,
            "ovp_enabled" => self.ovp_enabled = boolean(key, value)?,
            "vmtf_enabled" => self.vmtf_enabled = boolean(key, value)?,
            "fusion_mode" => {
                self.fusion_mode = FusionMode::parse(value)
                    .map_err(|_| Error::Config(format!("fusion_mode: unknown mode {value:?}")))?
            }
            "lora_mode" => self.lora_mode = boolean(key, value)?,
            "score_threshold" => self.score_threshold = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Serialize every field; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("llm_layers", self.llm_layers.to_string());
        kv("ovp_layers", self.ovp_layers.to_string());
        kv("vmtf_layers", self.vmtf_layers.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("n_queries", self.n_queries.to_string());
        kv("n_mask_tokens", self.n_mask_tokens.to_string());
        kv("pixel_dim", self.pixel_dim.to_string());
        kv("lora_rank", self.lora_rank.to_string());
        kv("h", self.h.to_string());
        kv("w", self.w.to_string());
        kv("clip_len", self.clip_len.to_string());
        kv("t_r", self.t_r.to_string());
        kv("train_size", self.train_size.to_string());
        kv("eval_size", self.eval_size.to_string());
        kv("seed", self.seed.to_string());
        kv("mix_easy", format!("{:?}", self.mix_easy));
        kv("mix_medium", format!("{:?}", self.mix_medium));
        kv("mix_hard", format!("{:?}", self.mix_hard));
        kv("mix_refer", format!("{:?}", self.mix_refer));
        kv("mix_reason", format!("{:?}", self.mix_reason));
        kv("mix_refer_video", format!("{:?}", self.mix_refer_video));
        kv("mix_reason_video", format!("{:?}", self.mix_reason_video));
        kv("peak_lr", format!("{:?}", self.peak_lr));
        kv("lr_floor", format!("{:?}", self.lr_floor));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        if let Some(w) = self.warmup_steps {
            kv("warmup_steps", w.to_string());
        }
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("w_cls", format!("{:?}", self.w_cls));
        kv("w_mask", format!("{:?}", self.w_mask));
        kv("w_b", format!("{:?}", self.w_b));
        kv("w_d", format!("{:?}", self.w_d));
        kv("ovp_enabled", self.ovp_enabled.to_string());
        kv("vmtf_enabled", self.vmtf_enabled.to_string());
        kv("fusion_mode", self.fusion_mode.name().to_string());
        kv("lora_mode", self.lora_mode.to_string());
        kv("score_threshold", format!("{:?}", self.score_threshold));
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_validated_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.warmup(), 1500 / 20);
        assert_eq!(cfg.n_queries, 8);
        assert_eq!(cfg.n_mask_tokens, 16);
    }

    #[test]
    fn parse_round_trips_through_to_text() {
        let mut cfg = RunConfig::default();
        cfg.d = 32;
        cfg.heads = 2;
        cfg.t_r = 8;
        cfg.peak_lr = 1.5e-3;
        cfg.warmup_steps = Some(33);
        cfg.fusion_mode = FusionMode::Detailed;
        cfg.lora_mode = true;
        cfg.mix_hard = 0.25;
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\n# a comment\n  d = 32   # trailing\n\nheads=2\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!((cfg.d, cfg.heads), (32, 2));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        let e = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::parse("d = 32\nd = 64").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = RunConfig::parse("just some words").unwrap_err();
        assert!(e.to_string().contains("key = value"), "{e}");
    }

    #[test]
    fn range_violations_are_rejected_with_the_field_name() {
        for (text, needle) in [
            ("heads = 3", "heads"),                     // does not divide d = 64
            ("h = 20", "canvas"),                       // not a multiple of 8
            ("peak_lr = -0.1", "peak_lr"),
            ("peak_lr = inf", "peak_lr"),
            ("total_steps = 0", "total_steps"),
            ("warmup_steps = 2000", "warmup"),          // >= total
            ("fusion_mode = everything", "fusion_mode"),
            ("score_threshold = 1.5", "score_threshold"),
            ("batch_size = 0", "batch_size"),
            ("t_r = 40", "t_r"),
            ("mix_easy = -1", "mix_easy"),
            ("mix_refer = 0\nmix_reason = 0\nmix_refer_video = 0\nmix_reason_video = 0", "mix"),
            ("ovp_enabled = yes", "ovp_enabled"),
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(e.to_string().contains(needle), "{text} -> {e}");
        }
    }

    #[test]
    fn warmup_defaults_to_five_percent_of_total() {
        let cfg = RunConfig::parse("total_steps = 400").unwrap();
        assert_eq!(cfg.warmup(), 20);
        let cfg = RunConfig::parse("total_steps = 400\nwarmup_steps = 7").unwrap();
        assert_eq!(cfg.warmup(), 7);
    }
}

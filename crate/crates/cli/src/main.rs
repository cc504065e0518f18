//! Command-line surface: corpus generation, training, evaluation,
//! ablations, gradient checking, and qualitative mask rendering.

use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tinyseg_core::config::RunConfig;
use tinyseg_core::synth::{generate_corpus, render, CorpusSpec};
use tinyseg_core::trainer::{
    self, corpus_spec, held_out_seed, AblationAxis, EvalItem,
};
use tinyseg_core::{dataio, gradcheck, Error, Real, Result};

#[derive(Parser)]
#[command(name = "tinyseg", about = "Instructed segmentation on a procedural moving-shapes corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate clips, ground-truth masks, and a manifest on disk.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// easy,medium,hard weights.
        #[arg(long, default_value = "1,1,1")]
        difficulty: String,
        /// refer,reason,refer_video,reason_video weights.
        #[arg(long = "mode-mix", default_value = "1,1,1,1")]
        mode_mix: String,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long = "clip-len", default_value_t = 4)]
        clip_len: usize,
    },
    /// Train from a key=value config file; checkpoints land in --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an on-disk split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory produced by gen-data (contains manifest.tsv).
        #[arg(long)]
        split: PathBuf,
        /// Optional file for the metric report (always printed to stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Override the checkpoint's proposal score threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train every cell of one ablation axis and print the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// components | t_r | fusion
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Finite-difference gradient verification over all blocks.
    GradCheck {
        /// Check a single block (see --list for names).
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Print the block names and exit.
        #[arg(long, default_value_t = false)]
        list: bool,
    },
    /// Render frame | ground truth | prediction panels for held-out samples.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample ids from the checkpoint's held-out split.
        #[arg(long)]
        ids: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_weights<const K: usize>(s: &str, what: &str) -> Result<[Real; K]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != K {
        return Err(Error::Config(format!("{what}: expected {K} comma-separated weights, got {s:?}")));
    }
    let mut out = [0.0; K];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse::<Real>()
            .map_err(|_| Error::Config(format!("{what}: bad weight {p:?}")))?;
        if !slot.is_finite() || *slot < 0.0 {
            return Err(Error::Config(format!("{what}: weights must be finite and non-negative")));
        }
    }
    if out.iter().sum::<Real>() <= 0.0 {
        return Err(Error::Config(format!("{what}: weights must not all be zero")));
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn gen_data(
    seed: u64,
    size: usize,
    out: &Path,
    difficulty: &str,
    mode_mix: &str,
    height: usize,
    width: usize,
    clip_len: usize,
) -> Result<()> {
    let spec = CorpusSpec {
        size,
        seed,
        h: height,
        w: width,
        clip_len,
        difficulty_mix: parse_weights::<3>(difficulty, "difficulty")?,
        mode_mix: parse_weights::<4>(mode_mix, "mode-mix")?,
    };
    let corpus = generate_corpus(&spec)?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for sample in &corpus {
        let rendered = render(&sample.scene);
        entries.push(dataio::write_sample(out, sample, &rendered)?);
    }
    dataio::write_manifest(&out.join("manifest.tsv"), &entries)?;
    println!("wrote {} samples to {}", entries.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    std::fs::create_dir_all(out)?;
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let result = trainer::train(&cfg, Some(out), &mut log)?;
    writeln!(log, "done steps={} skipped={}", cfg.total_steps, result.skipped_steps)?;
    Ok(())
}

fn eval(
    checkpoint: &Path,
    split: &Path,
    report: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let (mut model, _opt, _step, _rng) = trainer::load_model(checkpoint)?;
    if let Some(t) = threshold {
        if !(0.0..1.0).contains(&t) || t <= 0.0 {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {t}")));
        }
        model.cfg.score_threshold = t as Real;
    }
    let entries = dataio::read_manifest(&split.join("manifest.tsv"))?;
    let mut items = Vec::with_capacity(entries.len());
    let mut failures = Vec::new();
    for entry in &entries {
        match dataio::load_sample(split, entry) {
            Ok(s) => items.push(EvalItem::from_disk(s)),
            Err(e) => failures.push(format!("sample {:05}: {e}", entry.id)),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{f}");
        }
        return Err(Error::Data(format!("{} of {} samples failed to load", failures.len(), entries.len())));
    }
    let rep = trainer::evaluate(&model, &items)?;
    let text = trainer::report_lines("final", &rep);
    print!("{text}");
    if let Some(path) = report {
        std::fs::write(path, &text)
            .map_err(|e| Error::Data(format!("report {}: {e}", path.display())))?;
    }
    Ok(())
}

fn ablate(config: &Path, axis: &str, seeds: usize) -> Result<()> {
    let cfg = read_config(config)?;
    let axis = AblationAxis::parse(axis)?;
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let cells = trainer::ablate(&cfg, axis, seeds, &mut log)?;
    for c in &cells {
        let scores: Vec<String> = c.scores.iter().map(|s| format!("{s:.4}")).collect();
        writeln!(
            log,
            "cell={} mean={:.4} spread={:.4} scores={}",
            c.name,
            c.mean,
            c.spread,
            scores.join(",")
        )?;
    }
    Ok(())
}

fn grad_check(module: Option<&str>, instances: usize, seed: u64, list: bool) -> Result<()> {
    if list {
        for b in gradcheck::BLOCKS {
            println!("{b}");
        }
        return Ok(());
    }
    let results = gradcheck::run_suite(module, instances, seed)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "block={} instances={} checked={} max_rel_err={:.3e} pass={}",
            r.name, r.instances, r.checked, r.max_rel_err, r.pass
        );
        if !r.pass {
            failed.push(format!(
                "{} ({}{})",
                r.name,
                format_args!("max_rel_err={:.3e}", r.max_rel_err),
                r.detail.as_deref().map(|d| format!(", {d}")).unwrap_or_default()
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("gradient check failed: {}", failed.join("; "))))
    }
}

fn render_cmd(checkpoint: &Path, ids: &str, out: &Path) -> Result<()> {
    let (model, _opt, _step, _rng) = trainer::load_model(checkpoint)?;
    let cfg = &model.cfg;
    let wanted: Vec<u64> = ids
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("ids: bad sample id {p:?}")))
        })
        .collect::<Result<_>>()?;
    let spec = corpus_spec(cfg, cfg.eval_size, held_out_seed(cfg.seed));
    let corpus = generate_corpus(&spec)?;
    let mut items = Vec::with_capacity(wanted.len());
    for id in &wanted {
        let sample = corpus
            .iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| {
                Error::Config(format!("ids: {id} outside the held-out split (0..{})", corpus.len()))
            })?;
        items.push(EvalItem::from_sample(sample));
    }
    trainer::render_masks(&model, &items, out)?;
    println!("rendered {} samples to {}", items.len(), out.display());
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { seed, size, out, difficulty, mode_mix, height, width, clip_len } => {
            gen_data(seed, size, &out, &difficulty, &mode_mix, height, width, clip_len)
        }
        Cmd::Train { config, out } => train(&config, &out),
        Cmd::Eval { checkpoint, split, report, threshold } => {
            eval(&checkpoint, &split, report.as_deref(), threshold)
        }
        Cmd::Ablate { config, axis, seeds } => ablate(&config, &axis, seeds),
        Cmd::GradCheck { module, instances, seed, list } => {
            grad_check(module.as_deref(), instances, seed, list)
        }
        Cmd::Render { checkpoint, ids, out } => render_cmd(&checkpoint, &ids, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, machine-readable: kind + message.
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

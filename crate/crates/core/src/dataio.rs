//! On-disk corpus format: binary netpbm images plus a tab-separated
//! manifest.
//!
//! Masks are P5 graymaps (0 = background, 255 = foreground), frames are P6
//! pixmaps. Manifest: one sample per line with five tab fields — id, mode,
//! clip directory, instruction text, comma-joined mask paths (one mask per
//! frame, the union of the target objects).

use crate::metrics::Mask;
use crate::synth::{InstructionSample, Mode, RenderedScene};
use crate::tensor::Array;
use crate::vocab;
use crate::{Error, Real, Result};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = Vec::with_capacity(mask.data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", mask.w, mask.h)?;
    buf.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (magic, rest) = header(&bytes, path, 3)?;
    if magic[0] != "P5" {
        return Err(Error::Data(format!("{}: expected P5 magic, got {:?}", path.display(), magic[0])));
    }
    let (w, h, maxval) = dims(&magic, path)?;
    if rest.len() < w * h {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let data = rest[..w * h]
        .iter()
        .map(|&b| {
            if b == 0 {
                Ok(false)
            } else if b as usize == maxval {
                Ok(true)
            } else {
                Err(Error::Data(format!("{}: non-binary gray value {b}", path.display())))
            }
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(Mask { h, w, data })
}

/// `frame` is [H, W, 3] with values in [0, 1]; quantized to 8 bits.
pub fn write_ppm(path: &Path, frame: &Array) -> Result<()> {
    if frame.rank() != 3 || frame.shape[2] != 3 {
        return Err(Error::invalid("write_ppm", "frame must be [H, W, 3]"));
    }
    let (h, w) = (frame.shape[0], frame.shape[1]);
    let mut buf = Vec::with_capacity(frame.data.len() + 32);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    buf.extend(frame.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let (magic, rest) = header(&bytes, path, 3)?;
    if magic[0] != "P6" {
        return Err(Error::Data(format!("{}: expected P6 magic, got {:?}", path.display(), magic[0])));
    }
    let (w, h, maxval) = dims(&magic, path)?;
    if rest.len() < w * h * 3 {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let data = rest[..w * h * 3].iter().map(|&b| b as Real / maxval as Real).collect();
    Ok(Array { shape: vec![h, w, 3], data })
}

/// Splits a netpbm header (magic + 3 more whitespace-separated tokens,
/// '#' comments allowed) from the binary payload.
fn header<'a>(bytes: &'a [u8], path: &Path, extra: usize) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 1 + extra {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data(format!("{}: truncated header", path.display())));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates header from payload.
    if i >= bytes.len() {
        return Err(Error::Data(format!("{}: missing pixel data", path.display())));
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn dims(tokens: &[String], path: &Path) -> Result<(usize, usize, usize)> {
    let parse = |s: &String| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad header token {s:?}", path.display())))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("{}: unsupported dimensions", path.display())));
    }
    Ok((w, h, maxval))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub mode: Mode,
    pub clip_dir: PathBuf,
    pub instruction: String,
    pub mask_paths: Vec<PathBuf>,
}

/// A sample reloaded from disk, ready for evaluation.
pub struct DiskSample {
    pub id: u64,
    pub mode: Mode,
    /// One [H, W, 3] array per frame.
    pub frames: Vec<Array>,
    pub instruction_text: String,
    pub instruction: Vec<u32>,
    /// Per-frame union mask of the target objects.
    pub gt: Vec<Mask>,
}

/// Per-frame union of the target objects' visible masks.
pub fn target_union_masks(rendered: &RenderedScene, target_ids: &[usize]) -> Vec<Mask> {
    let frames = rendered.masks[0].len();
    (0..frames)
        .map(|t| {
            let (h, w) = (rendered.masks[0][t].h, rendered.masks[0][t].w);
            Mask::from_fn(h, w, |y, x| {
                target_ids.iter().any(|&o| rendered.masks[o][t].get(y, x))
            })
        })
        .collect()
}

fn frame_slice(clip: &Array, t: usize) -> Array {
    let (h, w) = (clip.shape[1], clip.shape[2]);
    let n = h * w * 3;
    Array { shape: vec![h, w, 3], data: clip.data[t * n..(t + 1) * n].to_vec() }
}

/// Writes frames and per-frame target masks for one sample; returns its
/// manifest entry with paths relative to `root`.
pub fn write_sample(
    root: &Path,
    sample: &InstructionSample,
    rendered: &RenderedScene,
) -> Result<ManifestEntry> {
    let rel_dir = PathBuf::from(format!("samples/{:05}", sample.id));
    let dir = root.join(&rel_dir);
    fs::create_dir_all(&dir)?;
    let frames = sample.scene.frames;
    let gt = target_union_masks(rendered, &sample.target_ids);
    let mut mask_paths = Vec::with_capacity(frames);
    for t in 0..frames {
        write_ppm(&dir.join(format!("frame_{t:02}.ppm")), &frame_slice(&rendered.clip, t))?;
        let rel = rel_dir.join(format!("mask_{t:02}.pgm"));
        write_pgm(&root.join(&rel), &gt[t])?;
        mask_paths.push(rel);
    }
    Ok(ManifestEntry {
        id: sample.id,
        mode: sample.mode,
        clip_dir: rel_dir,
        instruction: sample.instruction_text.clone(),
        mask_paths,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let masks: Vec<String> =
            e.mask_paths.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.mode.name(),
            e.clip_dir.to_string_lossy(),
            e.instruction,
            masks.join(",")
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!(
                "{}:{}: expected 5 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad id", path.display(), lineno + 1)))?;
        entries.push(ManifestEntry {
            id,
            mode: Mode::parse(fields[1])?,
            clip_dir: PathBuf::from(fields[2]),
            instruction: fields[3].to_string(),
            mask_paths: fields[4].split(',').map(PathBuf::from).collect(),
        });
    }
    Ok(entries)
}

/// Loads one manifest entry. Missing or malformed files are reported with
/// their paths so callers can itemize failures across a split.
fn at_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<DiskSample> {
    let mut gt = Vec::with_capacity(entry.mask_paths.len());
    for rel in &entry.mask_paths {
        let p = root.join(rel);
        gt.push(at_path(read_pgm(&p), &p)?);
    }
    if gt.is_empty() {
        return Err(Error::Data(format!("sample {}: no mask paths", entry.id)));
    }
    let mut frames = Vec::with_capacity(gt.len());
    for t in 0..gt.len() {
        let p = root.join(&entry.clip_dir).join(format!("frame_{t:02}.ppm"));
        frames.push(at_path(read_ppm(&p), &p)?);
    }
    Ok(DiskSample {
        id: entry.id,
        mode: entry.mode,
        frames,
        instruction_text: entry.instruction.clone(),
        instruction: vocab::tokenize(&entry.instruction),
        gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("tinyseg-dataio-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_round_trips_random_masks_bit_exactly() {
        let dir = tmpdir("pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..5 {
            let m = Mask::from_fn(9, 13, |_, _| rng.gen_bool(0.4));
            let p = dir.join(format!("m{i}.pgm"));
            write_pgm(&p, &m).unwrap();
            assert_eq!(read_pgm(&p).unwrap(), m);
        }
        let bytes = fs::read(dir.join("m0.pgm")).unwrap();
        assert_eq!(&bytes[..3], b"P5\n");
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn ppm_round_trip_is_exact_on_the_8_bit_lattice() {
        let dir = tmpdir("ppm");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Real> =
            (0..4 * 5 * 3).map(|_| rng.gen_range(0u32..=255) as Real / 255.0).collect();
        let frame = Array { shape: vec![4, 5, 3], data };
        let p = dir.join("f.ppm");
        write_ppm(&p, &frame).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape, frame.shape);
        for (a, b) in frame.data.iter().zip(&back.data) {
            assert_eq!(a, b);
        }
        // Arbitrary reals survive within quantization error.
        let frame2 = Array { shape: vec![2, 2, 3], data: vec![0.123; 12] };
        write_ppm(&p, &frame2).unwrap();
        let back2 = read_ppm(&p).unwrap();
        assert!((back2.data[0] - 0.123).abs() <= 0.5 / 255.0);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tmpdir("bad");
        let p = dir.join("x.pgm");
        fs::write(&p, b"P2\n2 2\n255\nabcd").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("P5"));
        fs::write(&p, b"P5\n2 2\n255\nab").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, b"P5\n2 2\n255\n\x00\x7f\x00\x00").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("non-binary"));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corpus_round_trips_through_manifest_and_files() {
        let dir = tmpdir("corpus");
        let spec = CorpusSpec { size: 6, seed: 11, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let mut entries = Vec::new();
        for s in &corpus {
            let rendered = crate::synth::render(&s.scene);
            entries.push(write_sample(&dir, s, &rendered).unwrap());
        }
        let mpath = dir.join("manifest.tsv");
        write_manifest(&mpath, &entries).unwrap();
        let back = read_manifest(&mpath).unwrap();
        assert_eq!(back, entries);

        for (entry, s) in back.iter().zip(&corpus) {
            let loaded = load_sample(&dir, entry).unwrap();
            assert_eq!(loaded.mode, s.mode);
            assert_eq!(loaded.instruction_text, s.instruction_text);
            assert_eq!(loaded.instruction, s.instruction);
            let want_frames = if s.mode.is_video() { spec.clip_len } else { 1 };
            assert_eq!(loaded.frames.len(), want_frames);
            assert_eq!(loaded.gt.len(), want_frames);
            // Reloaded gt equals the in-memory union bit for bit.
            let rendered = crate::synth::render(&s.scene);
            let want = target_union_masks(&rendered, &s.target_ids);
            for (a, b) in loaded.gt.iter().zip(&want) {
                assert_eq!(a, b);
            }
            // And frames match the rendered clip on the 8-bit lattice.
            let f0 = frame_slice(&rendered.clip, 0);
            for (a, b) in loaded.frames[0].data.iter().zip(&f0.data) {
                assert!((a - b).abs() <= 0.5 / 255.0);
            }
        }
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_files_are_reported_with_their_paths() {
        let dir = tmpdir("missing");
        let entry = ManifestEntry {
            id: 1,
            mode: Mode::Refer,
            clip_dir: PathBuf::from("samples/00001"),
            instruction: "segment the red circle".into(),
            mask_paths: vec![PathBuf::from("samples/00001/mask_00.pgm")],
        };
        assert!(load_sample(&dir, &entry).is_err());
        let e = read_manifest(&dir.join("nope.tsv")).unwrap_err();
        assert!(matches!(e, Error::Io(_)));
        fs::write(dir.join("bad.tsv"), "1\trefer\tonly three fields\n").unwrap();
        let e = read_manifest(&dir.join("bad.tsv")).unwrap_err();
        assert!(e.to_string().contains("5 tab-separated"), "{e}");
        fs::remove_dir_all(dir).unwrap();
    }
}

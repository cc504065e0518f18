//! Little-endian binary checkpoints: magic, version, config echo, step
//! counter, rng state, then named tensors (parameters and optimizer
//! moments) as (name length, name, dtype tag, rank, extents, raw values).
//! Loading restores training bit-exactly on the same build.

use crate::config::RunConfig;
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Array;
use crate::{Error, Real, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"TSEGCKPT";
const VERSION: u32 = 1;
#[cfg(not(feature = "single"))]
const DTYPE: u8 = 1; // f64
#[cfg(feature = "single")]
const DTYPE: u8 = 2; // f32

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Array)>,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, a: &Array) {
    push_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE);
    buf.push(a.rank() as u8);
    for &e in &a.shape {
        push_u64(buf, e as u64);
    }
    for &v in &a.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    step: u64,
    rng: &RngState,
    store: &ParamStore,
    opt: &AdamW,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config.to_text();
    push_u64(&mut buf, cfg.len() as u64);
    buf.extend_from_slice(cfg.as_bytes());
    push_u64(&mut buf, step);
    push_u64(&mut buf, opt.t);
    buf.extend_from_slice(&rng.seed);
    buf.extend_from_slice(&rng.word_pos.to_le_bytes());
    push_u64(&mut buf, rng.stream);
    push_u64(&mut buf, 3 * store.len() as u64);
    for (id, e) in store.iter() {
        push_tensor(&mut buf, &format!("param.{}", e.name), &e.value);
        push_tensor(&mut buf, &format!("adamw.m.{}", e.name), &opt.m[id]);
        push_tensor(&mut buf, &format!("adamw.v.{}", e.name), &opt.v[id]);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let cfg_len = c.u64()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = RunConfig::parse(cfg_text)?;
    let step = c.u64()?;
    let adam_t = c.u64()?;
    let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
    let word_pos = c.u128()?;
    let stream = c.u64()?;
    let count = c.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: dtype tag {dtype}, this build reads {DTYPE}"
            )));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let sz = std::mem::size_of::<Real>();
        let raw = c.take(numel * sz)?;
        let data =
            raw.chunks_exact(sz).map(|b| Real::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, Array { shape, data }));
    }
    Ok(Loaded { config, step, adam_t, rng: RngState { seed, word_pos, stream }, tensors })
}

/// Copies loaded tensors into a freshly built store/optimizer pair. Every
/// name must resolve and every shape must match; extra or missing tensors
/// are errors so silent architecture drift cannot pass.
pub fn restore_into(loaded: &Loaded, store: &mut ParamStore, opt: &mut AdamW) -> Result<()> {
    if loaded.tensors.len() != 3 * store.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match the model's {}",
            loaded.tensors.len(),
            3 * store.len()
        )));
    }
    for (name, a) in &loaded.tensors {
        let (kind, pname) = name
            .split_once("param.")
            .map(|(_, p)| ("p", p))
            .or_else(|| name.split_once("adamw.m.").map(|(_, p)| ("m", p)))
            .or_else(|| name.split_once("adamw.v.").map(|(_, p)| ("v", p)))
            .ok_or_else(|| Error::Checkpoint(format!("unrecognized tensor {name}")))?;
        let id = store
            .find(pname)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {pname}")))?;
        let dst = match kind {
            "p" => store.value_mut(id),
            "m" => &mut opt.m[id],
            _ => &mut opt.v[id],
        };
        if dst.shape != a.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} in file, {:?} in model",
                a.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&a.data);
    }
    opt.t = loaded.adam_t;
    Ok(())
}

//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLAC" | version u32 | config_len u32 | config TOML bytes | n_tensors u32
//! per tensor: name_len u32 | name | dtype u8 (0 = f32, 1 = f64) | rank u32 | dims u64 × rank | payload
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use anyhow::{bail, ensure, Context};
use cla_core::{DType, Element, Tensor, TransformerModel};

use crate::config::{Precision, RunConfig};
use crate::Invalid;

pub const MAGIC: &[u8; 4] = b"CLAC";
pub const VERSION: u32 = 1;

/// A model in either compute precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(TransformerModel<f32>),
    F64(TransformerModel<f64>),
}

/// Runs `$body` with `$m` bound to the concrete model.
#[macro_export]
macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            $crate::checkpoint::AnyModel::F32($m) => $body,
            $crate::checkpoint::AnyModel::F64($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn seeded(cfg: &RunConfig, seed: u64) -> anyhow::Result<Self> {
        let mc = cfg.model_config()?;
        Ok(match cfg.model.precision {
            Precision::F32 => AnyModel::F32(TransformerModel::seeded(mc, seed)?),
            Precision::F64 => AnyModel::F64(TransformerModel::seeded(mc, seed)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: AnyModel,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> anyhow::Result<()> {
    let v = u32::try_from(v).context("length does not fit the checkpoint format")?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config: &RunConfig, model: &AnyModel) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_toml();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    with_model!(model, m => write_tensors(&mut out, m))?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn write_tensors<T: Element>(out: &mut Vec<u8>, m: &TransformerModel<T>) -> anyhow::Result<()> {
    use cla_core::LanguageModel;
    let params = m.params();
    put_u32(out, params.len())?;
    for p in params.iter() {
        put_u32(out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        put_u32(out, p.tensor.rank())?;
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            x.to_le_bytes(out);
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        ensure!(self.buf.len() - self.pos >= n, "checkpoint truncated at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> anyhow::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> anyhow::Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> anyhow::Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).context("dimension too large")
    }
}

/// Checks the trailing CRC and returns the covered bytes.
pub fn verify_crc(bytes: &[u8]) -> anyhow::Result<&[u8]> {
    if bytes.len() < 8 {
        return Err(Invalid(format!("checkpoint of {} bytes is too short", bytes.len())).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Invalid(format!(
            "checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        ))
        .into());
    }
    Ok(body)
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<Checkpoint> {
    let body = verify_crc(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Invalid("not a checkpoint (bad magic)".into()).into());
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Invalid(format!("unsupported checkpoint version {version}")).into());
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).context("config snapshot is not UTF-8")?;
    let config = RunConfig::parse(text).context("in checkpoint config snapshot")?;
    let mc = config.model_config()?;
    let model = match config.model.precision {
        Precision::F32 => AnyModel::F32(read_model(&mut r, mc)?),
        Precision::F64 => AnyModel::F64(read_model(&mut r, mc)?),
    };
    ensure!(r.pos == body.len(), "{} trailing bytes after the tensors", body.len() - r.pos);
    Ok(Checkpoint { config, model })
}

fn read_model<T: Element>(
    r: &mut Reader<'_>,
    mc: cla_core::ModelConfig,
) -> anyhow::Result<TransformerModel<T>> {
    let mut model = TransformerModel::new(mc, cla_core::Init::Zeros)?;
    let n = r.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .context("tensor name is not UTF-8")?
            .to_string();
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            t => bail!("tensor {name}: unknown dtype tag {t}"),
        };
        if dtype != T::DTYPE {
            return Err(Invalid(format!(
                "tensor {name} stored as {dtype:?} but the config asks for {:?}",
                T::DTYPE
            ))
            .into());
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<anyhow::Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .context("tensor size overflows")?;
        let size = dtype.size_bytes();
        let raw = r.take(count.checked_mul(size).context("tensor size overflows")?)?;
        let data = raw
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                DType::F64 => T::of_f64(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    model
        .load_tensors(tensors)
        .map_err(|e| Invalid(format!("checkpoint tensors do not match the config: {e}")))?;
    Ok(model)
}

pub fn save(path: &Path, config: &RunConfig, model: &AnyModel) -> anyhow::Result<()> {
    let bytes = encode(config, model)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading {}", path.display()))
}

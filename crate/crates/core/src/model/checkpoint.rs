//! `PCNV1` checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `PCNV1\n`, u64 config length, config as `key=value` lines,
//! u64 tensor count, then per tensor: u32 name length, name, u32 rank,
//! rank x u64 dims, f64 payload. Batch-norm running statistics are stored
//! as extra tensors after the parameters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::{build_model, PatchConvNet};
use crate::numerics::Tensor;

pub const MAGIC: &[u8] = b"PCNV1\n";

fn buffer_names(i: usize) -> (String, String) {
    (format!("blocks.{i}.norm.running_mean"), format!("blocks.{i}.norm.running_var"))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &PatchConvNet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let cfg = model.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let count = model.params.len() + 2 * model.bn_states.len();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in model.params.iter() {
        put_tensor(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
    }
    for (i, s) in model.bn_states.iter().enumerate() {
        let (m, v) = buffer_names(i);
        put_tensor(&mut out, &m, &[s.running_mean.len()], &s.running_mean);
        put_tensor(&mut out, &v, &[s.running_var.len()], &s.running_var);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more bytes)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<PatchConvNet> {
    if !buf.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing PCNV1 magic".into()));
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let cfg_len = r.u64()?;
    let config = ModelConfig::from_kv(r.utf8(cfg_len)?)?;
    let mut model = build_model(&config, 0)?;
    let count = r.u64()?;
    let expected = model.params.len() + 2 * model.bn_states.len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors stored, model has {expected}")));
    }
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.utf8(name_len)?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(t) = model.params.by_name_mut(&name) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: stored shape {shape:?}, expected {:?}", t.shape())));
            }
            t.data_mut().copy_from_slice(&data);
            continue;
        }
        let slot = (0..model.bn_states.len()).find_map(|i| {
            let (m, v) = buffer_names(i);
            if name == m {
                Some((i, true))
            } else if name == v {
                Some((i, false))
            } else {
                None
            }
        });
        let Some((i, is_mean)) = slot else {
            return Err(Error::Checkpoint(format!("unknown tensor {name:?}")));
        };
        let s = &mut model.bn_states[i];
        let dst = if is_mean { &mut s.running_mean } else { &mut s.running_var };
        if dst.len() != data.len() {
            return Err(Error::Checkpoint(format!("{name}: {} values, expected {}", data.len(), dst.len())));
        }
        dst.copy_from_slice(&data);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &PatchConvNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PatchConvNet> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Convenience for tests: all parameter tensors in store order.
pub fn tensors(model: &PatchConvNet) -> Vec<Tensor> {
    model.params.tensors()
}

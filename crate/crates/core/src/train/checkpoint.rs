//! `GMNT` named-tensor archives.
//!
//! Layout (little-endian): `b"GMNT"`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and raw f32
//! values.

use std::path::Path;

use super::optim::OptState;
use crate::arch::Model;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GMNT";
pub const VERSION: u32 = 1;
/// Name prefix of optimizer momentum buffers.
pub const VELOCITY_PREFIX: &str = "opt.velocity.";

/// Encoded size of an archive holding these `(name, shape)` entries.
pub fn encoded_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> usize {
    12 + entries
        .into_iter()
        .map(|(name, shape)| 2 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>())
        .sum::<usize>()
}

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated reading {what} at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a GMNT file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let b = r.take(2, "name length")?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("name at offset {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(4), &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Every model parameter (including BN running statistics) and, when given,
/// every momentum buffer, as f32.
pub fn collect<T: Float>(model: &Model<T>, opt: Option<&OptState<T>>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> =
        model.params.iter().map(|(_, name, p)| (name.to_string(), p.value.cast())).collect();
    if let Some(opt) = opt {
        out.extend(opt.velocity.iter().map(|(name, v)| (format!("{VELOCITY_PREFIX}{name}"), v.cast())));
    }
    out
}

/// Copy archived tensors into `model` (and `opt`). Every expected tensor must
/// be present with a matching shape; the first mismatch is reported by name
/// and nothing is modified. Velocity entries are ignored when `opt` is `None`.
pub fn restore<T: Float>(
    tensors: Vec<(String, Tensor<f32>)>,
    model: &mut Model<T>,
    mut opt: Option<&mut OptState<T>>,
) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, t) in &tensors {
        let shape = if let Some(v) = name.strip_prefix(VELOCITY_PREFIX) {
            match opt.as_deref() {
                Some(o) => o.velocity.get(v).map(|t| t.shape()),
                None => continue,
            }
        } else {
            model.params.by_name(name).map(|p| p.value.shape())
        };
        let shape = shape.ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                shape
            )));
        }
        seen.insert(name.clone());
    }
    let velocity = opt
        .iter()
        .flat_map(|o| o.velocity.keys().map(|k| format!("{VELOCITY_PREFIX}{k}")));
    if let Some(missing) = model
        .params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .chain(velocity)
        .find(|n| !seen.contains(n))
    {
        return Err(Error::Checkpoint(format!("tensor `{missing}` missing from archive")));
    }
    for (name, t) in tensors {
        if let Some(v) = name.strip_prefix(VELOCITY_PREFIX) {
            if let Some(slot) = opt.as_deref_mut().and_then(|o| o.velocity.get_mut(v)) {
                *slot = t.cast();
            }
        } else if let Some(id) = model.params.id(&name) {
            model.params.get_mut(id).value = t.cast();
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, opt: Option<&OptState<T>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&collect(model, opt))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(model: &mut Model<T>, opt: Option<&mut OptState<T>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(decode(&bytes)?, model, opt)
}

//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//! `"WMLB"`, `u16` version = 1, then per tensor: `u16` name length, UTF-8
//! name, `u8` rank, `rank x u32` dims, `f32` data. Tensors appear in the
//! model's fixed parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::{Model, ModelKind, ModelSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WMLB";
pub const VERSION: u16 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format("name", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::format("rank", format!("rank too large for {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("dims", "dimension exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("magic", format!("expected WMLB, found {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !r.done() {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::format("name", e.to_string()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(Error::format("rank", format!("`{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(r.take(4, "dims")?.try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::format("dims", format!("`{name}` has a zero dimension")));
            }
            shape.push(d);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dims", "element count overflows"))?;
        let bytes = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::format("dims", "element count overflows"))?,
            "data",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_tensors(path, &model.named_tensors())
}

/// Loads a checkpoint whose architecture must equal `spec`.
pub fn load_checkpoint_as(path: &Path, spec: ModelSpec) -> Result<Model> {
    Model::from_named_tensors(spec, read_tensors(path)?)
}

/// Loads a checkpoint and infers its spec from parameter names and shapes.
///
/// The container does not record the spatial input shape: CNN inputs are
/// assumed square, and MLP inputs square single-channel when the flattened
/// width is a perfect square (otherwise `1 x N x 1`).
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let tensors = read_tensors(path)?;
    let spec = infer_spec(&tensors)?;
    Model::from_named_tensors(spec, tensors)
}

fn isqrt_exact(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

pub fn infer_spec(tensors: &[(String, Tensor)]) -> Result<ModelSpec> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::format("parameter count", "checkpoint holds no tensors"))?;
    if first.0 == "conv1.weight" {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::format("name", format!("missing `{name}`")))
        };
        let c1 = get("conv1.weight")?;
        let c2 = get("conv2.weight")?;
        let fc = get("fc.weight")?;
        if c1.len() != 4 || c2.len() != 4 || fc.len() != 2 {
            return Err(Error::format("rank", "unexpected CNN parameter ranks"));
        }
        let cells = fc[1] / c2[0];
        let side = isqrt_exact(cells)
            .ok_or_else(|| Error::format("dims", "CNN pooled map is not square"))?;
        Ok(ModelSpec {
            kind: ModelKind::SmallCnn,
            input_shape: [side * 2, side * 2, c1[3]],
            num_classes: fc[0],
            widths: vec![c1[0], c2[0]],
        })
    } else if first.0 == "fc1.weight" {
        let weights: Vec<&Tensor> = tensors
            .iter()
            .filter(|(n, _)| n.ends_with(".weight"))
            .map(|(_, t)| t)
            .collect();
        let input = first.1.shape().get(1).copied().unwrap_or(0);
        let input_shape = match isqrt_exact(input) {
            Some(s) => [s, s, 1],
            None => [1, input, 1],
        };
        let widths: Vec<usize> = weights[..weights.len() - 1]
            .iter()
            .map(|t| t.shape()[0])
            .collect();
        Ok(ModelSpec {
            kind: ModelKind::Mlp,
            input_shape,
            num_classes: weights[weights.len() - 1].shape()[0],
            widths,
        })
    } else {
        Err(Error::format(
            "name",
            format!("unrecognised first parameter `{}`", first.0),
        ))
    }
}

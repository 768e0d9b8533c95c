//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`, all floats little-endian `f64`):
//!
//! ```text
//! magic    8 bytes  "PFAMCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name utf-8, kind u8, payload
//!   kind 0 (layer):  activation u8, out u32, in u32, weights[out·in], bias[out]
//!   kind 1 (tensor): ndim u32, dims u32[ndim], data[Π dims]
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use crate::autodiff::{Activation, DenseLayer, LayeredModel, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{HomoExtractor, MixVector, MixedModel, SplitModel};

const MAGIC: &[u8; 8] = b"PFAMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Layer(DenseLayer),
    Tensor(Tensor),
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint field exceeds u32"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(entries: &[(String, Entry)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, entries.len())?;
    for (name, entry) in entries {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        match entry {
            Entry::Layer(layer) => {
                buf.push(0);
                buf.push(layer.activation().code());
                put_u32(&mut buf, layer.out_dim())?;
                put_u32(&mut buf, layer.in_dim())?;
                put_f64s(&mut buf, layer.weights().value().data());
                put_f64s(&mut buf, layer.bias().value().data());
            }
            Entry::Tensor(t) => {
                buf.push(1);
                put_u32(&mut buf, t.shape().len())?;
                for &d in t.shape() {
                    put_u32(&mut buf, d)?;
                }
                put_f64s(&mut buf, t.data());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Entry)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let entry = match r.u8()? {
            0 => {
                let act = r.u8()?;
                let activation =
                    Activation::from_code(act).ok_or_else(|| format!("unknown activation code {act}"))?;
                let (out, inp) = (r.u32()?, r.u32()?);
                let w = r.f64s(out * inp)?;
                let b = r.f64s(out)?;
                let layer = Tensor::new(vec![out, inp], w)
                    .and_then(|w| DenseLayer::new(w, Tensor::new(vec![out], b)?, activation))
                    .map_err(|e| format!("entry {name}: {e}"))?;
                Entry::Layer(layer)
            }
            1 => {
                let ndim = r.u32()?;
                let dims = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
                let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("size overflow")?;
                let data = r.f64s(n)?;
                Entry::Tensor(Tensor::new(dims, data).map_err(|e| format!("entry {name}: {e}"))?)
            }
            k => return Err(format!("unknown entry kind {k}")),
        };
        entries.push((name, entry));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Entry)]) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Entry)>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

fn stack_entries(prefix: &str, stack: &LayeredModel, out: &mut Vec<(String, Entry)>) {
    for (i, layer) in stack.layers().iter().enumerate() {
        out.push((format!("{prefix}.{i}"), Entry::Layer(layer.clone())));
    }
}

fn take_stack(entries: &[(String, Entry)], prefix: &str) -> std::result::Result<LayeredModel, String> {
    let mut layers = Vec::new();
    while let Some((_, Entry::Layer(l))) = entries
        .iter()
        .find(|(n, _)| *n == format!("{prefix}.{}", layers.len()))
    {
        layers.push(l.clone());
    }
    LayeredModel::new(layers).map_err(|e| format!("{prefix}: {e}"))
}

fn take_tensor<'a>(entries: &'a [(String, Entry)], name: &str) -> std::result::Result<&'a Tensor, String> {
    match entries.iter().find(|(n, _)| n == name) {
        Some((_, Entry::Tensor(t))) => Ok(t),
        _ => Err(format!("missing tensor entry {name}")),
    }
}

/// Entries describing a client's complete mixed model.
pub fn mixed_model_entries(model: &MixedModel) -> Vec<(String, Entry)> {
    let mut out = Vec::new();
    stack_entries("homo", model.homo.layers(), &mut out);
    stack_entries("extractor", model.local.extractor(), &mut out);
    out.push(("header".into(), Entry::Layer(model.local.header().clone())));
    out.push(("alpha".into(), Entry::Tensor(model.alpha.values().clone())));
    out.push((
        "meta".into(),
        Entry::Tensor(Tensor::vector(vec![model.local.variant() as f64, model.alpha.lr()]).expect("two values")),
    ));
    out
}

pub fn mixed_model_from_entries(entries: &[(String, Entry)]) -> std::result::Result<MixedModel, String> {
    let homo = HomoExtractor::new(take_stack(entries, "homo")?).map_err(|e| e.to_string())?;
    let extractor = take_stack(entries, "extractor")?;
    let header = match entries.iter().find(|(n, _)| n == "header") {
        Some((_, Entry::Layer(l))) => l.clone(),
        _ => return Err("missing header layer".into()),
    };
    let meta = take_tensor(entries, "meta")?.data().to_vec();
    if meta.len() != 2 {
        return Err("meta entry must hold [variant, lr_alpha]".into());
    }
    let local = SplitModel::new(meta[0] as usize, extractor, header).map_err(|e| e.to_string())?;
    let alpha = MixVector::from_values(take_tensor(entries, "alpha")?.clone(), meta[1]).map_err(|e| e.to_string())?;
    MixedModel::new(homo, local, alpha).map_err(|e| e.to_string())
}

pub fn save_mixed_model(path: &Path, model: &MixedModel) -> Result<()> {
    save(path, &mixed_model_entries(model))
}

pub fn load_mixed_model(path: &Path) -> Result<MixedModel> {
    let entries = load(path)?;
    mixed_model_from_entries(&entries).map_err(|m| Error::format(path, m))
}

pub fn save_stack(path: &Path, stack: &LayeredModel) -> Result<()> {
    let mut entries = Vec::new();
    stack_entries("layer", stack, &mut entries);
    save(path, &entries)
}

pub fn load_stack(path: &Path) -> Result<LayeredModel> {
    let entries = load(path)?;
    take_stack(&entries, "layer").map_err(|m| Error::format(path, m))
}

/// Bitwise equality of every parameter value.
pub fn bitwise_equal<A: Parameterized, B: Parameterized>(a: &A, b: &B) -> bool {
    let (pa, pb) = (a.parameters(), b.parameters());
    pa.len() == pb.len()
        && pa
            .iter()
            .zip(&pb)
            .all(|(x, y)| x.value().shape() == y.value().shape() && x.value().to_bits() == y.value().to_bits())
}

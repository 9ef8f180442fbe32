//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"DFKD" | u32 version | u64 len | descriptor text (len bytes)
//! then per tensor until EOF:
//! u64 name len | name | u64 rank | u64 dim × rank | f32 × numel
//! ```
//!
//! The descriptor text is `key=value` lines holding the architecture, the
//! quantization settings and the training metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{parse_kv, ArchDescriptor, Model};
use crate::quant::QuantConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFKD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    pub stage: String,
    pub schedule_sha256: String,
    pub accuracy: f64,
    pub seed: u64,
}

fn descriptor_text(model: &Model, meta: &Metadata) -> String {
    let mut s = model.descriptor().to_text();
    match model.quant() {
        Some(q) => {
            let _ = writeln!(s, "quant_bits={}", q.n_bits);
            let _ = writeln!(s, "quant_first_layer={}", q.quantize_first_layer);
            let _ = writeln!(s, "quant_last_layer={}", q.quantize_last_layer);
        }
        None => s.push_str("quant_bits=none\n"),
    }
    let _ = writeln!(s, "stage={}", meta.stage);
    let _ = writeln!(s, "schedule_sha256={}", meta.schedule_sha256);
    let _ = writeln!(s, "accuracy={}", meta.accuracy);
    let _ = writeln!(s, "seed={}", meta.seed);
    s
}

pub fn to_bytes(model: &Model, meta: &Metadata) -> Vec<u8> {
    let desc = descriptor_text(model, meta);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    for p in model.state() {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                format!("byte {}", self.pos),
                format!("file ends inside {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str, limit: usize) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        if v > limit as u64 {
            return Err(Error::format(format!("byte {at}"), format!("{what} {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn quant_from(map: &BTreeMap<String, String>) -> Result<Option<QuantConfig>> {
    let bad = |k: &str| Error::Validation(format!("checkpoint field {k:?} is malformed"));
    match map.get("quant_bits").map(String::as_str) {
        None | Some("none") => Ok(None),
        Some(bits) => {
            let flag = |k: &str| -> Result<bool> {
                map.get(k).ok_or_else(|| bad(k))?.parse().map_err(|_| bad(k))
            };
            let q = QuantConfig {
                n_bits: bits.parse().map_err(|_| bad("quant_bits"))?,
                quantize_first_layer: flag("quant_first_layer")?,
                quantize_last_layer: flag("quant_last_layer")?,
            };
            q.validate()?;
            Ok(Some(q))
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Metadata)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("byte 0", "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "byte 4",
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let n = r.len("descriptor length", bytes.len())?;
    let text = std::str::from_utf8(r.take(n, "descriptor")?)
        .map_err(|_| Error::format("descriptor", "not UTF-8"))?;
    let map = parse_kv(text)?;
    let desc = ArchDescriptor::from_map(&map)?;
    let quant = quant_from(&map)?;
    let bad = |k: &str| Error::Validation(format!("checkpoint field {k:?} is malformed"));
    let meta = Metadata {
        stage: map.get("stage").cloned().unwrap_or_default(),
        schedule_sha256: map.get("schedule_sha256").cloned().unwrap_or_default(),
        accuracy: map
            .get("accuracy")
            .map_or(Ok(0.0), |v| v.parse())
            .map_err(|_| bad("accuracy"))?,
        seed: map.get("seed").map_or(Ok(0), |v| v.parse()).map_err(|_| bad("seed"))?,
    };
    let mut model = Model::new(desc, quant, 0)?;
    let mut seen = Vec::new();
    while !r.done() {
        let at = r.pos;
        let nl = r.len("name length", 4096)?;
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| Error::format(format!("byte {at}"), "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.len("rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension", bytes.len())?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model
            .set_state(&name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
        if seen.contains(&name) {
            return Err(Error::Integrity(format!("tensor {name} appears twice")));
        }
        seen.push(name);
    }
    if let Some(missing) = model.state().find(|p| !seen.contains(&p.name)) {
        return Err(Error::Integrity(format!("tensor {} is missing", missing.name)));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Model, meta: &Metadata) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let d = ArchDescriptor::tapcnn(3, 8, vec![4, 6], 3).unwrap();
        Model::new(d, Some(QuantConfig::new(4).unwrap()), 11).unwrap()
    }

    fn meta() -> Metadata {
        Metadata {
            stage: "beta".into(),
            schedule_sha256: "ab".repeat(32),
            accuracy: 0.8125,
            seed: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let (back, md) = from_bytes(&to_bytes(&m, &meta())).unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
        assert_eq!(back.descriptor(), m.descriptor());
        assert_eq!(back.quant(), m.quant());
        assert_eq!(md, meta());
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut b = to_bytes(&model(), &meta());
        b[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_and_corruption() {
        let b = to_bytes(&model(), &meta());
        assert!(from_bytes(&b[..b.len() - 3]).is_err());
        assert!(matches!(from_bytes(b"DFKX"), Err(Error::Format { .. })));
        // drop the last tensor entirely
        let m = model();
        let last = m.state().last().unwrap();
        let tail = 8 + last.name.len() + 8 + 8 * last.value.rank() + 4 * last.value.numel();
        assert!(matches!(from_bytes(&b[..b.len() - tail]), Err(Error::Integrity(_))));
    }
}

//! `.ddnt` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DDNT" | version u16 | precision u8 | payload length u64
//! payload:
//!   descriptor: u32 length + UTF-8 text
//!   tensors:    u32 count, then per tensor
//!               u16 name length + name | kind u8 | rank u8 | dims u32… | raw values
//!   optimizer:  u8 flag, then step u64 | lr, β1, β2, ε as f64 | u32 count,
//!               per entry u16 name length + name | u32 length | m values | v values
//! CRC32 of everything before it, u32
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use ddnet_core::netblocks::ModelWeights;
use ddnet_core::tensor::{AdamConfig, AdamState, NetworkWeights, ParamKind, Precision, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DDNT";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u16, supported: u16 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Adam moments in the precision of the weights they belong to.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    F32(AdamState<f32>),
    F64(AdamState<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form text (the CLI stores a TOML model card here).
    pub descriptor: String,
    pub weights: ModelWeights,
    pub optimizer: Option<OptimizerState>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensors<T: Real>(out: &mut Vec<u8>, w: &NetworkWeights<T>) {
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for (name, t, kind) in w.iter() {
        put_name(out, name);
        out.push(match kind {
            ParamKind::Trainable => 0,
            ParamKind::NonTrainable => 1,
        });
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        t.data().iter().for_each(|v| v.write_le(out));
    }
}

fn put_optimizer<T: Real>(out: &mut Vec<u8>, s: &AdamState<T>) {
    out.push(1);
    out.extend_from_slice(&s.step_count.to_le_bytes());
    for v in [s.config.learning_rate, s.config.beta1, s.config.beta2, s.config.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(s.first_moment.len() as u32).to_le_bytes());
    for (name, m) in &s.first_moment {
        put_name(out, name);
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        m.iter().for_each(|x| x.write_le(out));
        let v = &s.second_moment[name];
        v.iter().for_each(|x| x.write_le(out));
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(ckpt.descriptor.len() as u32).to_le_bytes());
    payload.extend_from_slice(ckpt.descriptor.as_bytes());
    match &ckpt.weights {
        ModelWeights::F32(w) => put_tensors(&mut payload, w),
        ModelWeights::F64(w) => put_tensors(&mut payload, w),
    }
    match (&ckpt.optimizer, &ckpt.weights) {
        (None, _) => payload.push(0),
        (Some(OptimizerState::F32(s)), ModelWeights::F32(_)) => put_optimizer(&mut payload, s),
        (Some(OptimizerState::F64(s)), ModelWeights::F64(_)) => put_optimizer(&mut payload, s),
        _ => return Err(CheckpointError::Malformed("optimizer precision differs from weights".into())),
    }
    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ckpt.weights.precision().tag());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("field overruns payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let w = T::PRECISION.byte_width();
        let bytes = self.take(n.checked_mul(w).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(w).map(T::read_le).collect())
    }
}

fn get_tensors<T: Real>(r: &mut Reader) -> Result<NetworkWeights<T>> {
    let count = r.u32()?;
    let mut w = NetworkWeights::new();
    for _ in 0..count {
        let name = r.name()?;
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::NonTrainable,
            k => return Err(CheckpointError::Malformed(format!("unknown parameter kind {k}"))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let t = Tensor::from_vec(&shape, r.values::<T>(n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        w.insert(name, t, kind);
    }
    Ok(w)
}

fn get_optimizer<T: Real>(r: &mut Reader) -> Result<Option<AdamState<T>>> {
    if r.u8()? == 0 {
        return Ok(None);
    }
    let step_count = r.u64()?;
    let config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let count = r.u32()?;
    let mut first_moment = IndexMap::new();
    let mut second_moment = IndexMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let n = r.u32()? as usize;
        first_moment.insert(name.clone(), r.values::<T>(n)?);
        second_moment.insert(name, r.values::<T>(n)?);
    }
    Ok(Some(AdamState {
        config,
        step_count,
        first_moment,
        second_moment,
    }))
}

/// Parses checkpoint bytes. Header, length and CRC are checked before any
/// tensor is decoded.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            expected: HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let precision = Precision::from_tag(bytes[6])
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown precision tag {}", bytes[6])))?;
    let payload_len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
    let expected = (HEADER as u64).saturating_add(payload_len).saturating_add(4);
    if (bytes.len() as u64) < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[HEADER..body_end],
        pos: 0,
    };
    let n = r.u32()? as usize;
    let descriptor =
        String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("descriptor is not UTF-8".into()))?;
    let (weights, optimizer) = match precision {
        Precision::F32 => {
            let w = get_tensors::<f32>(&mut r)?;
            (ModelWeights::F32(w), get_optimizer::<f32>(&mut r)?.map(OptimizerState::F32))
        }
        Precision::F64 => {
            let w = get_tensors::<f64>(&mut r)?;
            (ModelWeights::F64(w), get_optimizer::<f64>(&mut r)?.map(OptimizerState::F64))
        }
    };
    if r.pos != r.buf.len() {
        return Err(CheckpointError::Malformed("unparsed bytes after optimizer block".into()));
    }
    Ok(Checkpoint {
        descriptor,
        weights,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

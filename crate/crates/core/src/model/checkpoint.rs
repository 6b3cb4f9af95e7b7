//! Checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes   "RWFLCKPT"
//! version    u32
//! config     u32 length, then that many bytes of UTF-8 TOML (ModelConfig)
//! meta       u32 length, then that many bytes of UTF-8 TOML (free-form table)
//! count      u32
//! count records (inference weights first, then any `live/`-prefixed
//! training weights in the same order):
//!   name     u32 length, then UTF-8 bytes
//!   ndim     u32
//!   dims     ndim × u64
//!   data     prod(dims) × f64
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Mmdit, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"RWFLCKPT";
const LIVE_PREFIX: &str = "live/";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model (inference weights, EMA after training), optionally the live
/// training weights, and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Mmdit,
    pub live: Option<ParamStore>,
    pub meta: toml::Table,
}

impl Checkpoint {
    pub fn new(model: Mmdit) -> Self {
        Self {
            model,
            live: None,
            meta: toml::Table::new(),
        }
    }

    /// The live training weights as a model, if stored.
    pub fn live_model(&self) -> Result<Option<Mmdit>> {
        self.live
            .as_ref()
            .map(|p| Mmdit::from_params(*self.model.config(), p.clone()))
            .transpose()
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ck.model;
    if let Some(live) = &ck.live {
        if !live.same_layout(model.params()) {
            return Err(Error::shape("live weights do not match the model layout"));
        }
    }
    let config = toml::to_string(model.config())
        .map_err(|e| Error::Config(format!("serializing model config: {e}")))?;
    let meta = toml::to_string(&ck.meta).map_err(|e| Error::Config(format!("serializing metadata: {e}")))?;
    let live = ck.live.iter().flat_map(|p| p.iter().map(|(n, t)| (format!("{LIVE_PREFIX}{n}"), t)));
    let records: Vec<(String, &Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .chain(live)
        .collect();
    let mut out = Vec::with_capacity(64 + records.iter().map(|(_, t)| t.len() * 8 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, config.as_bytes());
    put_bytes(&mut out, meta.as_bytes());
    put_u32(&mut out, records.len());
    for (name, t) in records {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config: ModelConfig = toml::from_str(r.str()?)
        .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
    let meta: toml::Table =
        toml::from_str(r.str()?).map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        names.push(r.str()?.to_string());
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Parse("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let split = names.iter().position(|n| n.starts_with(LIVE_PREFIX)).unwrap_or(names.len());
    let live_names: Vec<String> = names
        .drain(split..)
        .map(|n| {
            n.strip_prefix(LIVE_PREFIX)
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("record `{n}` after live weights")))
        })
        .collect::<Result<_>>()?;
    let live_tensors = tensors.split_off(split);
    let model = Mmdit::from_params(config, ParamStore::from_parts(names, tensors))?;
    let live = if live_names.is_empty() {
        None
    } else {
        let live = ParamStore::from_parts(live_names, live_tensors);
        if !live.same_layout(model.params()) {
            return Err(Error::Version("live weights do not match the model layout".into()));
        }
        live.check_finite()?;
        Some(live)
    };
    Ok(Checkpoint { model, live, meta })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<Vec<u8>> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Hex SHA-256 of checkpoint bytes.
pub fn checkpoint_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Parse(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Parse(format!("checkpoint string: {e}")))
    }
}

//! Binary checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "DAPNETCK"
//! version    u32      1
//! header     u64 length, then that many bytes of UTF-8 JSON (CheckpointHeader)
//! count      u32      number of parameter tensors
//! per tensor:
//!   name     u32 length, then UTF-8 bytes
//!   rank     u32
//!   dims     rank × u64
//!   data     product(dims) × f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::DapNet;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DAPNETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub normalization: NormalizationStats,
    /// Full run configuration echo, kept verbatim.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

pub fn encode(header: &CheckpointHeader, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.bytes.len() < n {
            return Err(format!("truncated: wanted {n} more bytes, {} left", self.bytes.len()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut c = Cursor { bytes };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = c.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(len)?).map_err(|e| format!("header: {e}"))?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|e| format!("parameter name: {e}"))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let raw = c.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| format!("parameter {name}: {e}"))?;
        params.add(name, t);
    }
    if !c.bytes.is_empty() {
        return Err(format!("{} trailing bytes", c.bytes.len()));
    }
    Ok(Checkpoint { header, params })
}

pub fn save(
    path: &Path,
    model: &DapNet,
    normalization: &NormalizationStats,
    classes: &[String],
    run: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.cfg.clone(),
        classes: classes.to_vec(),
        normalization: normalization.clone(),
        run,
    };
    let bytes = encode(&header, &model.params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::data(path, detail))
}

/// Rebuilds the model a checkpoint describes and loads its weights.
pub fn load(path: &Path) -> Result<(DapNet, CheckpointHeader)> {
    let ck = read(path)?;
    let mut model = DapNet::new(ck.header.model.clone(), 0)?;
    model
        .params
        .load_values(&ck.params)
        .map_err(|e| Error::data(path, e.to_string()))?;
    Ok((model, ck.header))
}

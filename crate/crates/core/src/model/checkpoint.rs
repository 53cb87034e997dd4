//! Binary checkpoint: `WYN1`, version, length-prefixed JSON header, then one
//! record per tensor (name, rank, dims, little-endian f32 payload). All
//! integers are little-endian u32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadType, Model, ModelConfig, HEAD_W};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Float;

const MAGIC: &[u8; 4] = b"WYN1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Hash of the run configuration that produced the weights.
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        config_hash: config_hash.map(str::to_string),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * model.num_parameters());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    for (name, t) in model.params.named() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data().iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, config_hash: Option<&str>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, config_hash)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Corrupt(format!("file ends inside {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<Float>,
}

fn decode_parts(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<Record>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing WYN1 magic bytes".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = r.u32("header length")?;
    let json = r.take(len, "header")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;

    let mut records = Vec::new();
    while !r.done() {
        let n = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let what = format!("payload of {name}");
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt(what.clone()))?, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Float)
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok((meta, records))
}

fn build(meta: &CheckpointMeta, records: Vec<Record>) -> Result<Model> {
    let model = Model::new(meta.model.clone(), 0)?;
    let expected = model.params.named();
    if records.len() != expected.len() {
        return Err(Error::Corrupt(format!(
            "{} tensors present, configuration needs {}",
            records.len(),
            expected.len()
        )));
    }
    for ((name, t), rec) in expected.iter().zip(records) {
        if &rec.name != name {
            return Err(Error::Corrupt(format!("expected tensor {name}, found {}", rec.name)));
        }
        if rec.shape != t.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name}: configuration needs {:?}, file holds {:?}",
                t.shape(),
                rec.shape
            )));
        }
        t.set_data(rec.data)?;
    }
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let (meta, records) = decode_parts(bytes)?;
    let model = build(&meta, records)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint that must carry the given head.
pub fn load_checkpoint_as(path: &Path, head: HeadType) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, records) = decode_parts(&bytes)?;
    let cfg = &meta.model;
    if cfg.head_type != head {
        let expected = vec![cfg.d_model, cfg.head_width_for(head)];
        let found = records
            .iter()
            .find(|r| r.name == HEAD_W)
            .map(|r| r.shape.clone())
            .unwrap_or_else(|| vec![cfg.d_model, cfg.head_width()]);
        return Err(Error::HeadShape {
            name: HEAD_W.to_string(),
            expected,
            found,
        });
    }
    let model = build(&meta, records)?;
    Ok((model, meta))
}

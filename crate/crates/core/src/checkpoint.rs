//! Single-file checkpoint container.
//!
//! Layout: magic `SSPNETCK`, a little-endian `u32` format version, a `u64`
//! header length, the JSON header, one binary record per parameter
//! (`u32` name length, name, `u32` rank, `u64` dims, dtype byte, little-endian
//! `f64` data) and a trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afss::ScaleSelectionState;
use crate::datamodel::AttributeSchema;
use crate::error::{Error, Result};
use crate::heads::ImbalanceWeights;
use crate::model::{ModelConfig, SspNet};
use crate::trainer::{Checkpoint, EpochLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"SSPNETCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    train_config: TrainConfig,
    model_config: ModelConfig,
    schema: AttributeSchema,
    selection: ScaleSelectionState,
    pos_rates: ImbalanceWeights,
    epoch: usize,
    history: Vec<EpochLog>,
    param_count: usize,
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        train_config: ck.config.clone(),
        model_config: ck.model.config.clone(),
        schema: ck.model.schema.clone(),
        selection: ck.model.selection.clone(),
        pos_rates: ck.weights.clone(),
        epoch: ck.epoch,
        history: ck.history.clone(),
        param_count: ck.model.store.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, value) in ck.model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("unexpected end of parameter data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + 8 + DIGEST_LEN {
        return Err(Error::Integrity("file is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;

    let mut model = SspNet::with_selection(
        header.model_config,
        header.schema,
        header.selection,
        header.train_config.seed,
    )?;
    if header.param_count != model.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} parameters, model expects {}",
            header.param_count,
            model.store.len()
        )));
    }
    for _ in 0..header.param_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if r.take(1)?[0] != DTYPE_F64 {
            return Err(Error::Integrity(format!("unsupported dtype for {name}")));
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !model.store.contains(&name) {
            return Err(Error::Integrity(format!("unexpected parameter {name}")));
        }
        let target = model.store.get_mut(&name);
        if target.shape() != dims.as_slice() {
            return Err(Error::Integrity(format!(
                "parameter {name} has shape {dims:?}, model expects {:?}",
                target.shape()
            )));
        }
        *target = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("shape checked");
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        config: header.train_config,
        model,
        weights: header.pos_rates,
        epoch: header.epoch,
        history: header.history,
    })
}

pub fn save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

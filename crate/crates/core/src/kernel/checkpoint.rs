//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header, then every tensor's values as little-endian f64 in header order,
//! followed by the Adam first and second moments when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamHyper, AdamState};
use super::params::ParamTensor;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SETIMPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub params: Vec<ParamTensor>,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
    adam: Option<AdamHeader>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorHeader {
                    name: p.name.clone(),
                    shape: p.shape(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                hyper: a.hyper,
                step: a.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            put(&p.value);
        }
        if let Some(a) = &self.adam {
            a.m.iter().for_each(&mut put);
            a.v.iter().for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        let mut payload = &body[hlen..];
        let mut take = |shape: [usize; 2]| -> Result<Tensor> {
            let n = shape[0] * shape[1];
            if payload.len() < n * 8 {
                return Err(corrupt("truncated payload"));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[n * 8..];
            Tensor::new(shape[0], shape[1], data)
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            params.push(ParamTensor {
                name: t.name.clone(),
                value: take(t.shape)?,
                requires_grad: t.requires_grad,
            });
        }
        let adam = match header.adam {
            None => None,
            Some(a) => {
                let m = header.tensors.iter().map(|t| take(t.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|t| take(t.shape)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    hyper: a.hyper,
                    step: a.step,
                    m,
                    v,
                })
            }
        };
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Container {
            meta: header.meta,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

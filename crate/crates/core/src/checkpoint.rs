//! Model checkpoints.
//!
//! ```text
//! GUNET1\n
//! descriptor_bytes = <N>\n
//! <N bytes of TOML: architecture, per-layer channel table, tensor list>
//! <payload: little-endian f32 values of every tensor, in tensor-list order>
//! ```
//!
//! Double-precision models are stored at single precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{ArchConfig, ConvKind, ModelDescriptor, UNet};

pub const MAGIC: &str = "GUNET1";

/// One row of the channel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub block: String,
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub batchnorm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub group_order: usize,
    pub group_pool: bool,
    pub layers: Vec<LayerRecord>,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointHeader {
    fn of<T: Scalar>(model: &UNet<T>) -> Self {
        let d = model.descriptor();
        let mut layers: Vec<LayerRecord> = d
            .blocks
            .iter()
            .flat_map(|b| {
                b.convs.iter().map(|c| LayerRecord {
                    block: b.name.clone(),
                    kind: c.kind,
                    cin: c.cin,
                    cout: c.cout,
                    k: c.k,
                    batchnorm: c.batchnorm,
                })
            })
            .collect();
        if let Some(p) = &d.projection {
            layers.push(LayerRecord {
                block: "projection".into(),
                kind: p.kind,
                cin: p.cin,
                cout: p.cout,
                k: p.k,
                batchnorm: p.batchnorm,
            });
        }
        let tensors = model
            .store()
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                nbytes: 4 * e.value.len(),
            })
            .collect();
        CheckpointHeader {
            arch: model.config().clone(),
            group_order: d.group_order,
            group_pool: d.group_pool,
            layers,
            tensors,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.nbytes).sum()
    }
}

pub fn encode<T: Scalar>(model: &UNet<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader::of(model);
    let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = format!("{MAGIC}\ndescriptor_bytes = {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.reserve(header.payload_bytes());
    for e in model.store().entries() {
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header line".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))
}

/// Parse the header and return it with the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let mut pos = 0;
    let magic = read_line(bytes, &mut pos)?;
    if magic != MAGIC {
        let version = magic.strip_prefix("GUNET");
        return match version {
            Some(v) if !v.is_empty() && v.chars().all(|c| c.is_ascii_digit()) => Err(Error::VersionMismatch {
                found: magic.to_string(),
                expected: MAGIC.to_string(),
            }),
            _ => Err(Error::Format(format!("bad magic {magic:?}"))),
        };
    }
    let len_line = read_line(bytes, &mut pos)?;
    let n: usize = len_line
        .strip_prefix("descriptor_bytes = ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("bad descriptor length line {len_line:?}")))?;
    if bytes.len() < pos + n {
        return Err(Error::Format(format!(
            "descriptor needs {n} bytes, file has {}",
            bytes.len() - pos
        )));
    }
    let text = std::str::from_utf8(&bytes[pos..pos + n]).map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, &bytes[pos + n..]))
}

pub fn decode(bytes: &[u8]) -> Result<UNet<f32>> {
    let (header, payload) = decode_header(bytes)?;
    for t in &header.tensors {
        let expected = 4 * t.shape.iter().product::<usize>();
        if t.nbytes != expected {
            return Err(Error::LengthMismatch(format!(
                "tensor {} of shape {:?} declares {} bytes, needs {expected}",
                t.name, t.shape, t.nbytes
            )));
        }
    }
    let total = header.payload_bytes();
    if payload.len() < total {
        return Err(Error::Truncated {
            expected: total,
            found: payload.len(),
        });
    }
    if payload.len() > total {
        return Err(Error::LengthMismatch(format!(
            "payload has {} bytes, descriptor accounts for {total}",
            payload.len()
        )));
    }
    let mut model = UNet::<f32>::new(header.arch.clone(), 0)?;
    let built = ModelDescriptor::from_config(&header.arch)?;
    if built.group_order != header.group_order || built.group_pool != header.group_pool {
        return Err(Error::LengthMismatch("group layout disagrees with the architecture".into()));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for (t, e) in header.tensors.iter().zip(model.store().entries()) {
        let data = payload[offset..offset + t.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += t.nbytes;
        store.add(t.name.clone(), Tensor::from_vec(t.shape.clone(), data)?, e.trainable);
    }
    model.load_store(store)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &UNet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNet<f32>> {
    decode(&fs::read(path)?)
}

//! `KLTF` checkpoint files: `"KLTF" | u32 version | u64 manifest length |
//! JSON manifest | f64 blobs`, all little-endian. The manifest lists every
//! tensor by name with its shape and byte offset into the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::BatchNorm;
use super::network::{Checkpoint, ConvBlock, NetworkSpec, TrainingMeta};
use super::se::SeBlock;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KLTF";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: NetworkSpec,
    pub meta: TrainingMeta,
    pub bn_updates: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Every stored array in file order.
fn arrays(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = ckpt
        .trainable()
        .into_iter()
        .map(|(name, t)| (name, t.shape.clone(), t.data.as_slice()))
        .collect();
    for (i, b) in ckpt.blocks.iter().enumerate() {
        let c = b.bn.channels();
        out.push((format!("bn{i}.running_mean"), vec![c], &b.bn.running_mean));
        out.push((format!("bn{i}.running_var"), vec![c], &b.bn.running_var));
    }
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let arrays = arrays(ckpt);
    let mut offset = 0u64;
    let tensors = arrays
        .iter()
        .map(|(name, shape, data)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += 8 * data.len() as u64;
            entry
        })
        .collect();
    let manifest = Manifest {
        spec: ckpt.spec.clone(),
        meta: ckpt.meta.clone(),
        bn_updates: ckpt.blocks.iter().map(|b| b.bn.updates).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &arrays {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("KLTF", reason)
}

pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER))
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..end])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, blobs) = decode_manifest(bytes)?;
    manifest
        .spec
        .validate()
        .map_err(|e| bad(format!("manifest spec: {e}")))?;
    let mut expected_offset = 0u64;
    let mut values = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(bad(format!("tensor {} at unexpected offset {}", entry.name, entry.offset)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| bad(format!("tensor {} shape overflows", entry.name)))?;
        let start = entry.offset as usize;
        let stop = start
            .checked_add(8 * count)
            .filter(|s| *s <= blobs.len())
            .ok_or_else(|| bad(format!("tensor {} is truncated", entry.name)))?;
        let data: Vec<f64> = blobs[start..stop]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
            return Err(bad(format!("duplicate tensor {}", entry.name)));
        }
        expected_offset = stop as u64;
    }
    if expected_offset as usize != blobs.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    let mut take = |name: String| -> Result<Tensor> {
        let (shape, data) = values
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        Tensor::from_vec(&shape, data)
    };

    let spec = manifest.spec;
    if manifest.bn_updates.len() != spec.conv_blocks.len() {
        return Err(bad("batch-norm update counts do not match the spec"));
    }
    let mut blocks = Vec::with_capacity(spec.conv_blocks.len());
    for (i, s) in spec.conv_blocks.iter().enumerate() {
        let weight = take(format!("conv{i}.weight"))?;
        let bias = take(format!("conv{i}.bias"))?;
        let mut bn = BatchNorm::new(s.out_channels);
        bn.scale = take(format!("bn{i}.scale"))?;
        bn.shift = take(format!("bn{i}.shift"))?;
        bn.running_mean = take(format!("bn{i}.running_mean"))?.data;
        bn.running_var = take(format!("bn{i}.running_var"))?.data;
        bn.updates = manifest.bn_updates[i];
        blocks.push(ConvBlock {
            dilation: s.dilation,
            weight,
            bias,
            bn,
        });
    }
    let mut se = Vec::with_capacity(spec.se_blocks.len());
    for (j, s) in spec.se_blocks.iter().enumerate() {
        let mut block = SeBlock::new(s.channels, s.reduction)?;
        block.squeeze.weight = take(format!("se{j}.w1"))?;
        block.squeeze.bias = take(format!("se{j}.b1"))?;
        block.excite.weight = take(format!("se{j}.w2"))?;
        block.excite.bias = take(format!("se{j}.b2"))?;
        se.push(block);
    }
    let fusion_weight = take("fusion.weight".into())?;
    let fusion_bias = take("fusion.bias".into())?;
    if let Some(name) = values.keys().next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    let ckpt = Checkpoint {
        spec,
        blocks,
        se,
        fusion_weight,
        fusion_bias,
        meta: manifest.meta,
    };
    ckpt.validate().map_err(|e| bad(format!("tensor shapes: {e}")))?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

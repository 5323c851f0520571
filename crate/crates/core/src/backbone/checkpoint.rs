//! Binary checkpoint: `XMREIDCK`, u32 version, u64 header length, JSON
//! header, then every tensor as little-endian f32 in header order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{HeadConfig, ModelState, StageTaxonomy, Variant};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XMREIDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub best_metric: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: Variant,
    in_channels: usize,
    head: HeadConfig,
    taxonomy: StageTaxonomy,
    freeze_mask: BTreeSet<String>,
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint(model: &ModelState, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let names: Vec<(String, bool)> = model
        .parameter_names()
        .map(|n| (n.to_string(), false))
        .chain(model.buffer_names().map(|n| (n.to_string(), true)))
        .collect();
    for (name, buffer) in names {
        let t = if buffer { model.buffer(&name) } else { model.parameter(&name) }.expect("listed name");
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name,
            shape: t.dims().to_vec(),
            buffer,
        });
    }
    let header = Header {
        variant: model.variant(),
        in_channels: model.in_channels(),
        head: model.head().clone(),
        taxonomy: model.taxonomy().clone(),
        freeze_mask: model.freeze_mask().clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(&mut f, MAGIC)?;
    write(&mut f, &CHECKPOINT_VERSION.to_le_bytes())?;
    write(&mut f, &(json.len() as u64).to_le_bytes())?;
    write(&mut f, &json)?;
    write(&mut f, &payload)?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let mut data = &body[hlen..];
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(Error::Checkpoint(format!("truncated data for `{}`", e.name)));
        }
        let values: Vec<f32> = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[4 * n..];
        let t = Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?;
        if e.buffer {
            buffers.insert(e.name, t);
        } else {
            params.insert(e.name, t);
        }
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    let model = ModelState::from_parts(
        header.variant,
        header.in_channels,
        header.head,
        header.taxonomy,
        params,
        buffers,
        header.freeze_mask,
    )?;
    Ok((model, header.meta))
}

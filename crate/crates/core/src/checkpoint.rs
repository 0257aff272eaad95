//! Checkpoint directory format: `manifest.json` (format tag, version, the
//! `ArchConfig`, and an ordered tensor index of name/shape/byte-offset) plus
//! `weights.bin` (little-endian f32 values concatenated in index order).
//! Round-trips are bit-exact, including batch-norm running statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model};

pub const CHECKPOINT_FORMAT: &str = "forgenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

/// Named views of every serialized tensor, in fixed order.
fn tensor_views(model: &Model<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, block) in model.convs.iter().enumerate() {
        out.push((
            format!("conv{i}.weight"),
            block.weight.shape().to_vec(),
            block.weight.data().to_vec(),
        ));
        out.push((
            format!("conv{i}.bias"),
            block.bias.shape().to_vec(),
            block.bias.data().to_vec(),
        ));
        out.push((
            format!("conv{i}.bn_gamma"),
            block.bn.gamma.shape().to_vec(),
            block.bn.gamma.data().to_vec(),
        ));
        out.push((
            format!("conv{i}.bn_beta"),
            block.bn.beta.shape().to_vec(),
            block.bn.beta.data().to_vec(),
        ));
        out.push((
            format!("conv{i}.bn_running_mean"),
            vec![block.bn.running_mean.len()],
            block.bn.running_mean.clone(),
        ));
        out.push((
            format!("conv{i}.bn_running_var"),
            vec![block.bn.running_var.len()],
            block.bn.running_var.clone(),
        ));
    }
    for (j, head) in model.seg_heads.iter().enumerate() {
        out.push((
            format!("seg_head{j}.weight"),
            head.weight.shape().to_vec(),
            head.weight.data().to_vec(),
        ));
        out.push((
            format!("seg_head{j}.bias"),
            head.bias.shape().to_vec(),
            head.bias.data().to_vec(),
        ));
    }
    out.push((
        "image_head.weight".into(),
        model.image_head.weight.shape().to_vec(),
        model.image_head.weight.data().to_vec(),
    ));
    out.push((
        "image_head.bias".into(),
        model.image_head.bias.shape().to_vec(),
        model.image_head.bias.data().to_vec(),
    ));
    out
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    for (name, shape, data) in tensor_views(model) {
        entries.push(TensorEntry {
            name,
            shape,
            offset: bytes.len() as u64,
        });
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        arch: model.config.clone(),
        tensors: entries,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("checkpoint serialization: {e}")))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let weights_path = dir.join("weights.bin");
    std::fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(format!(
            "not a checkpoint (format tag `{}`)",
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let weights_path = dir.join("weights.bin");
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

    let mut model: Model<f32> = Model::build(&manifest.arch, 0)?;
    let expected = tensor_views(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::format(format!(
            "checkpoint indexes {} tensors, architecture needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for ((name, shape, data), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name {
            return Err(Error::format(format!(
                "tensor order mismatch: expected `{name}`, found `{}`",
                entry.name
            )));
        }
        if *shape != entry.shape {
            return Err(Error::format(format!(
                "tensor `{name}`: shape {:?} does not match architecture {shape:?}",
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let len = data.len() * 4;
        let slice = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::format(format!("tensor `{name}`: weights.bin too short")))?;
        loaded.push(
            slice
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }

    let mut it = loaded.into_iter();
    for block in &mut model.convs {
        block
            .weight
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
        block
            .bias
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
        block
            .bn
            .gamma
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
        block
            .bn
            .beta
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
        block.bn.running_mean = it.next().expect("counted");
        block.bn.running_var = it.next().expect("counted");
    }
    for head in &mut model.seg_heads {
        head.weight
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
        head.bias
            .data_mut()
            .copy_from_slice(&it.next().expect("counted"));
    }
    model
        .image_head
        .weight
        .data_mut()
        .copy_from_slice(&it.next().expect("counted"));
    model
        .image_head
        .bias
        .data_mut()
        .copy_from_slice(&it.next().expect("counted"));
    Ok(model)
}

//! JSON checkpoints with tensors stored as base-64 little-endian f32.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{DashError, Result};
use crate::model::{HybridArch, ModelSpec, Parameters};
use crate::search::{ArchState, CandidateSpace};
use crate::training::Stage;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub stage: String,
    pub step: usize,
    pub seed: u64,
}

impl Metadata {
    pub fn new(stage: Stage, step: usize, seed: u64) -> Metadata {
        let stage = match stage {
            Stage::Teacher => "teacher",
            Stage::Align => "align",
            Stage::Distill => "distill",
        };
        Metadata {
            stage: stage.into(),
            step,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub arch: Option<HybridArch>,
    pub alpha: Option<ArchState>,
    pub metadata: Metadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredAlpha {
    space: CandidateSpace,
    t_arch: f64,
    logits: StoredTensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    spec: ModelSpec,
    tensors: BTreeMap<String, StoredTensor>,
    arch: Option<String>,
    alpha: Option<StoredAlpha>,
    metadata: Metadata,
}

fn encode(t: &Tensor) -> StoredTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    StoredTensor {
        shape: t.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn decode(s: &StoredTensor) -> std::result::Result<Tensor, String> {
    let bytes = B64.decode(&s.data).map_err(|e| format!("base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err("tensor byte length is not a multiple of 4".into());
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(s.shape.clone(), data).map_err(|e| e.to_string())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        spec: ckpt.spec.clone(),
        tensors: ckpt.params.named().into_iter().map(|(n, t)| (n, encode(t))).collect(),
        arch: ckpt.arch.as_ref().map(ToString::to_string),
        alpha: ckpt.alpha.as_ref().map(|a| StoredAlpha {
            space: a.space,
            t_arch: a.t_arch,
            logits: encode(&a.alpha),
        }),
        metadata: ckpt.metadata.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    std::fs::write(path, text).map_err(|e| DashError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DashError::io(path, e))?;
    let corrupt = |reason: String| DashError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(DashError::VersionMismatch {
            found: version.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    file.spec.validate().map_err(|e| corrupt(e.to_string()))?;
    let mut params = Parameters::init(&file.spec, 0);
    let expected = params.named().len();
    if file.tensors.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} tensors, found {}",
            file.tensors.len()
        )));
    }
    for (name, slot) in params.named_mut() {
        let stored = file
            .tensors
            .get(&name)
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        let t = decode(stored).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        if t.shape() != slot.shape() {
            return Err(corrupt(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let arch = file
        .arch
        .map(|s| s.parse::<HybridArch>())
        .transpose()
        .map_err(|e| corrupt(e.to_string()))?;
    if let Some(a) = &arch {
        a.check_layers(&file.spec).map_err(|e| corrupt(e.to_string()))?;
    }
    let alpha = file
        .alpha
        .map(|a| {
            let logits = decode(&a.logits)?;
            ArchState::from_alpha(logits, a.space, a.t_arch).map_err(|e| e.to_string())
        })
        .transpose()
        .map_err(|e| corrupt(format!("alpha: {e}")))?;
    Ok(Checkpoint {
        spec: file.spec,
        params,
        arch,
        alpha,
        metadata: file.metadata,
    })
}

//! Checkpoint container.
//!
//! Layout (little-endian): magic `SPCK`, `u16` version, `u32` header length,
//! a UTF-8 JSON header, then the tensor payload. The header carries the run
//! config, the step counters and a directory of named blobs
//! (`student.*`, `teacher.*`, `optimizer.m.*`, `optimizer.v.*`, `center`)
//! with their dtype, extents and byte offset into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::IoError;
use crate::model::{ModelError, ModelParams};
use crate::tensor::NdArray;
use crate::trainer::{AdamState, DistillState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u16, expected: u16 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BlobType {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: BlobType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    global_step: u64,
    epoch: usize,
    optimizer_t: u64,
    tensors: Vec<BlobEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: DistillState,
}

pub fn encode_checkpoint(run: &RunConfig, state: &DistillState) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, params) in [
        ("student.", &state.student),
        ("teacher.", &state.teacher),
        ("optimizer.m.", &state.opt.m),
        ("optimizer.v.", &state.opt.v),
    ] {
        for (name, t) in params.iter() {
            tensors.push(BlobEntry {
                name: format!("{prefix}{name}"),
                dtype: BlobType::F32,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    tensors.push(BlobEntry {
        name: "center".into(),
        dtype: BlobType::F64,
        shape: vec![state.center.len()],
        offset: payload.len(),
    });
    for v in &state.center {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = Header {
        config: run.clone(),
        global_step: state.global_step,
        epoch: state.epoch,
        optimizer_t: state.opt.t,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing SPCK magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = 10usize
        .checked_add(hlen)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[10..body]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[body..];

    let mut groups: BTreeMap<&str, BTreeMap<String, NdArray<f32>>> = BTreeMap::new();
    let mut center = None;
    let mut expected_end = 0;
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let width = match entry.dtype {
            BlobType::F32 => 4,
            BlobType::F64 => 8,
        };
        let end = entry.offset + count * width;
        if entry.offset != expected_end || end > payload.len() {
            return Err(corrupt(format!("blob `{}` lies outside the payload", entry.name)));
        }
        expected_end = end;
        let raw = &payload[entry.offset..end];
        if entry.name == "center" {
            if entry.dtype != BlobType::F64 {
                return Err(corrupt("center must be f64".into()));
            }
            center = Some(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<_>>(),
            );
            continue;
        }
        if entry.dtype != BlobType::F32 {
            return Err(corrupt(format!("blob `{}` must be f32", entry.name)));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = NdArray::from_vec(&entry.shape, data).map_err(|e| corrupt(e.to_string()))?;
        let (group, name) = ["optimizer.m.", "optimizer.v.", "student.", "teacher."]
            .iter()
            .find_map(|p| entry.name.strip_prefix(p).map(|rest| (*p, rest)))
            .ok_or_else(|| corrupt(format!("unknown blob `{}`", entry.name)))?;
        groups.entry(group).or_default().insert(name.to_string(), t);
    }
    if expected_end != payload.len() {
        return Err(corrupt(format!("{} trailing payload bytes", payload.len() - expected_end)));
    }
    let mut take = |g: &str| ModelParams::from_map(groups.remove(g).unwrap_or_default());
    let student = take("student.");
    let teacher = take("teacher.");
    let m = take("optimizer.m.");
    let v = take("optimizer.v.");
    let model_err = |source| CheckpointError::Model {
        path: path.to_path_buf(),
        source,
    };
    student.check_config(&header.config.model).map_err(model_err)?;
    for other in [&teacher, &m, &v] {
        student.check_same_layout(other).map_err(model_err)?;
    }
    let center = center.ok_or_else(|| corrupt("missing center".into()))?;
    if center.len() != header.config.model.proj_out {
        return Err(corrupt(format!("center has {} entries", center.len())));
    }
    Ok(Checkpoint {
        config: header.config,
        state: DistillState {
            student,
            teacher,
            opt: AdamState {
                m,
                v,
                t: header.optimizer_t,
            },
            center,
            global_step: header.global_step,
            epoch: header.epoch,
        },
    })
}

pub fn save_checkpoint(path: &Path, run: &RunConfig, state: &DistillState) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(run, state)).map_err(|e| IoError::io(path, e).into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_hidden: 6,
            proj_bottleneck: 4,
            proj_out: 5,
            ..ModelConfig::default()
        };
        run
    }

    fn state(run: &RunConfig) -> DistillState {
        let mut s = DistillState::new(&run.model, 3).unwrap();
        s.teacher = ModelParams::init(&run.model, 4).unwrap();
        s.opt.m.get_mut("cls_token").unwrap().data_mut()[0] = 0.25;
        s.opt.t = 7;
        s.center = vec![0.1, -0.2, 1.0 / 3.0, 1e-300, -0.0];
        s.global_step = 7;
        s.epoch = 1;
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let run = tiny_run();
        let s = state(&run);
        let bytes = encode_checkpoint(&run, &s);
        let ck = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(ck.config, run);
        assert_eq!(ck.state.student.digest(), s.student.digest());
        assert_eq!(ck.state.teacher.digest(), s.teacher.digest());
        let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ck.state.center), bits(&s.center));
        assert_eq!(ck.state, s);
        assert_eq!(encode_checkpoint(&ck.config, &ck.state), bytes);
    }

    #[test]
    fn version_mismatch_is_loud() {
        let run = tiny_run();
        let mut bytes = encode_checkpoint(&run, &state(&run));
        bytes[4] = 2;
        let err = decode_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: 2, expected: 1, .. }), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let run = tiny_run();
        let bytes = encode_checkpoint(&run, &state(&run));
        let p = Path::new("x");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'Q';
        assert!(decode_checkpoint(&bad, p).is_err());
    }
}

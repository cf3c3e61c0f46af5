//! On-disk formats: the SPVD tensor container, the dataset manifest and the
//! JSONL metrics log.
//!
//! SPVD layout (little-endian): magic `SPVD`, `u16` version, `u8` dtype code,
//! `u8` rank, `rank` extents as `u32`, then the row-major `f32` payload.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::sampling::{RawVideo, SamplingError};
use crate::tensor::{DType, NdArray, TensorError};

pub const SPVD_MAGIC: &[u8; 4] = b"SPVD";
pub const SPVD_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        IoError::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Serializes an `f32` array into SPVD bytes.
pub fn encode_tensor(t: &NdArray<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(SPVD_MAGIC);
    out.extend_from_slice(&SPVD_VERSION.to_le_bytes());
    out.push(DType::F32.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses SPVD bytes; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<NdArray<f32>, IoError> {
    let bad = |r: String| IoError::format(path, r);
    if bytes.len() < 8 || &bytes[..4] != SPVD_MAGIC {
        return Err(bad("missing SPVD magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SPVD_VERSION {
        return Err(bad(format!("unsupported SPVD version {version}, expected {SPVD_VERSION}")));
    }
    match DType::from_code(bytes[6]) {
        Some(DType::F32) => {}
        other => return Err(bad(format!("unsupported dtype code {} ({other:?})", bytes[6]))),
    }
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(format!(
            "payload of {} bytes does not match extents {shape:?}",
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(NdArray::from_vec(&shape, data)?)
}

pub fn write_tensor(path: &Path, t: &NdArray<f32>) -> Result<(), IoError> {
    fs::write(path, encode_tensor(t)).map_err(|e| IoError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<NdArray<f32>, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
    pub label: usize,
    pub class_name: String,
    pub split: Split,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Accepts the manifest file itself or the directory holding
    /// `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| IoError::io(&file, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| IoError::json(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(&self.entries).map_err(|e| IoError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| IoError::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_classes()];
        for e in &self.entries {
            names[e.label] = e.class_name.clone();
        }
        names
    }

    pub fn load_video(&self, entry: &ManifestEntry) -> Result<RawVideo, IoError> {
        let path = self.root.join(&entry.file);
        let frames = read_tensor(&path)?;
        if frames.shape() != entry.shape.as_slice() {
            return Err(IoError::format(
                &path,
                format!("extents {:?} disagree with manifest {:?}", frames.shape(), entry.shape),
            ));
        }
        Ok(RawVideo::new(&entry.id, frames, Some(entry.label))?)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RawVideo>, IoError> {
        self.split(split).map(|e| self.load_video(e)).collect()
    }
}

/// Appends one compact JSON object per line.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> Result<Self, IoError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| IoError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<(), IoError> {
        let line = serde_json::to_string(record).map_err(|e| IoError::json(&self.path, e))?;
        writeln!(self.out, "{line}").map_err(|e| IoError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), IoError> {
        self.out.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>, IoError> {
    let mut text = String::new();
    BufReader::new(File::open(path).map_err(|e| IoError::io(path, e))?)
        .read_to_string(&mut text)
        .map_err(|e| IoError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| IoError::json(path, e)))
        .collect()
}

pub fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = NdArray::<f32>::from_fn(&[2, 3, 4], |i| i as f32 * 0.25 - 1.0);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"SPVD");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 8 + 12 + 4 * 24);
        assert_eq!(decode_tensor(&bytes, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let t = NdArray::<f32>::zeros(&[2, 2]);
        let good = encode_tensor(&t);
        let p = Path::new("x");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, p).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        let err = decode_tensor(&bad, p).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let mut bad = good.clone();
        bad[6] = 1;
        assert!(decode_tensor(&bad, p).is_err());
        assert!(decode_tensor(&good[..good.len() - 1], p).is_err());
    }

    #[test]
    fn files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let frames = NdArray::<f32>::full(&[2, 3, 4, 4], 0.5);
        write_tensor(&dir.path().join("a.spvd"), &frames).unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            entries: vec![ManifestEntry {
                id: "a".into(),
                file: "a.spvd".into(),
                label: 1,
                class_name: "b".into(),
                split: Split::Test,
                shape: vec![2, 3, 4, 4],
            }],
        };
        m.save(&dir.path().join("manifest.json")).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.num_classes(), 2);
        let v = back.load_video(&back.entries[0]).unwrap();
        assert_eq!(v.frames(), &frames);
        assert_eq!(back.load_split(Split::Train).unwrap().len(), 0);
        let missing = read_tensor(&dir.path().join("nope.spvd")).unwrap_err().to_string();
        assert!(missing.contains("nope.spvd"));
    }

    #[test]
    fn jsonl_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        for i in 0..2 {
            let mut w = JsonlWriter::append(&p).unwrap();
            w.write(&serde_json::json!({"step": i})).unwrap();
            w.flush().unwrap();
        }
        let rows = read_jsonl(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["step"], 1);
    }
}

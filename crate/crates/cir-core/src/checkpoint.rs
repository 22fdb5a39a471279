//! Checkpoint file format: `CKPT` magic, u32 version, a JSON header listing
//! tensor names/shapes/trainable flags plus a config echo, then raw f32
//! little-endian payloads in header order. Optimizer moments ride along
//! under `optim.m.*` / `optim.v.*` so a run can resume exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::atomic_write;
use crate::encoders::{ModelConfig, ParamTensors};
use crate::optim::AdamWState;
use crate::tensor::{Matrix, TensorError};

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("format version {found} is not the supported {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub mode: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorMeta>,
    pub optim_step: Option<u64>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    /// Model tensors by name, with their trainable flag.
    pub tensors: BTreeMap<String, (Matrix, bool)>,
    /// Optimizer state, when the checkpoint carried one.
    pub optim: Option<AdamWState>,
}

fn push_tensor(
    meta: &mut Vec<TensorMeta>,
    payload: &mut Vec<u8>,
    name: &str,
    m: &Matrix,
    trainable: bool,
) {
    meta.push(TensorMeta {
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        trainable,
    });
    for &v in m.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes model tensors (visit order) plus optional optimizer moments.
pub fn save_checkpoint(
    path: &Path,
    mode: &str,
    model_cfg: &ModelConfig,
    params: &dyn ParamTensors,
    optim: Option<&AdamWState>,
) -> Result<(), CheckpointError> {
    let mut meta = Vec::new();
    let mut payload = Vec::new();
    params.visit_tensors(&mut |name, m, trainable| {
        push_tensor(&mut meta, &mut payload, name, m, trainable);
    });
    if let Some(state) = optim {
        for (name, m) in &state.m {
            push_tensor(
                &mut meta,
                &mut payload,
                &format!("optim.m.{name}"),
                m,
                false,
            );
        }
        for (name, m) in &state.v {
            push_tensor(
                &mut meta,
                &mut payload,
                &format!("optim.v.{name}"),
                m,
                false,
            );
        }
    }
    let header = CheckpointHeader {
        mode: mode.to_string(),
        model: model_cfg.clone(),
        tensors: meta,
        optim_step: optim.map(|s| s.step),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&payload);
    atomic_write(path, &buf).map_err(|e| match e {
        crate::dataset::DataError::Io { path, source } => CheckpointError::Io { path, source },
        other => CheckpointError::TruncatedFile(other.to_string()),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::TruncatedFile("magic".into()))?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: CKPT_MAGIC,
            found: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::TruncatedFile("version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::TruncatedFile("header length".into()))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::TruncatedFile("header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut tensors = BTreeMap::new();
    let mut optim = header.optim_step.map(|step| AdamWState {
        m: BTreeMap::new(),
        v: BTreeMap::new(),
        step,
    });
    for meta in &header.tensors {
        let mut valbuf = vec![0u8; meta.rows * meta.cols * 4];
        r.read_exact(&mut valbuf)
            .map_err(|_| CheckpointError::TruncatedFile(format!("tensor {}", meta.name)))?;
        let data: Vec<f64> = valbuf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let m = Matrix::from_vec(meta.rows, meta.cols, data)?;
        if let Some(rest) = meta.name.strip_prefix("optim.m.") {
            if let Some(state) = optim.as_mut() {
                state.m.insert(rest.to_string(), m);
                continue;
            }
        }
        if let Some(rest) = meta.name.strip_prefix("optim.v.") {
            if let Some(state) = optim.as_mut() {
                state.v.insert(rest.to_string(), m);
                continue;
            }
        }
        tensors.insert(meta.name.clone(), (m, meta.trainable));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).ok() == Some(1) {
        return Err(CheckpointError::TruncatedFile("trailing bytes".into()));
    }
    Ok(LoadedCheckpoint {
        header,
        tensors,
        optim,
    })
}

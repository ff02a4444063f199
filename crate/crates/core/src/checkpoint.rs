//! Named-tensor checkpoint files.
//!
//! Layout: a text header (`meta` key/value lines, then one `tensor` line
//! per tensor with its shape, then a `checksum` line and a `payload` line
//! announcing the total f64 count), followed by every tensor's values
//! concatenated as little-endian 64-bit floats. The checksum covers the
//! header (minus the checksum line itself) plus the payload, so any edit
//! is detected. Identical checkpoints are byte-identical.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

const CKPT_MAGIC: &str = "EGO-OMG-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: expected header `{CKPT_MAGIC}`, found `{found}`")]
    VersionMismatch { path: String, found: String },
    #[error("{path}: checksum mismatch (file corrupted or edited)")]
    ChecksumMismatch { path: String },
    #[error("checkpoint has no tensor named `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has no meta key `{0}`")]
    MissingMeta(String),
}

/// Model parameters plus run configuration, in a stable order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Sets a meta entry, replacing an existing key in place.
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        assert!(
            !key.is_empty() && !key.contains(char::is_whitespace),
            "meta key `{key}` must be a single token"
        );
        let value = value.to_string();
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.meta.push((key.to_string(), value));
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn push_tensor(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "tensor name `{name}` must be a single token"
        );
        assert!(
            self.tensors.iter().all(|(n, _)| n != name),
            "duplicate tensor name `{name}`"
        );
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{CKPT_MAGIC}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, tensor) in &self.tensors {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        let count: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let payload_line = format!("payload {count}\n");

        let mut payload = Vec::with_capacity(count * 8);
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut hasher = Sha256::new();
        hasher.update(header.as_bytes());
        hasher.update(payload_line.as_bytes());
        hasher.update(&payload);
        let digest = hasher.finalize();

        let mut out = header.into_bytes();
        out.extend_from_slice(format!("checksum {digest:x}\n").as_bytes());
        out.extend_from_slice(payload_line.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&path.display().to_string(), &bytes)
    }

    pub fn from_bytes(path: &str, bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |line: usize, msg: String| CheckpointError::Malformed {
            path: path.to_string(),
            line,
            msg,
        };

        fn next_line(
            bytes: &[u8],
            pos: &mut usize,
            path: &str,
            line_no: usize,
        ) -> Result<String, CheckpointError> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: "unexpected end of header".to_string(),
                })?;
            let line = std::str::from_utf8(&bytes[start..start + rel]).map_err(|_| {
                CheckpointError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: "header is not valid UTF-8".to_string(),
                }
            })?;
            *pos = start + rel + 1;
            Ok(line.to_string())
        }

        let mut pos = 0usize;
        let mut line_no = 1usize;
        let header = next_line(bytes, &mut pos, path, line_no)?;
        if header != CKPT_MAGIC {
            return Err(CheckpointError::VersionMismatch {
                path: path.to_string(),
                found: header,
            });
        }

        let mut meta = Vec::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut declared_checksum: Option<String> = None;
        let payload_count: usize;
        let mut checked_lines = format!("{CKPT_MAGIC}\n");
        loop {
            line_no += 1;
            let line = next_line(bytes, &mut pos, path, line_no)?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').ok_or_else(|| {
                    malformed(line_no, format!("expected `meta <key> <value>`, got `{line}`"))
                })?;
                meta.push((k.to_string(), v.to_string()));
                checked_lines.push_str(&line);
                checked_lines.push('\n');
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts
                    .next()
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| malformed(line_no, "tensor line missing name".to_string()))?;
                let dims: Result<Vec<usize>, _> = parts.map(|d| d.parse::<usize>()).collect();
                let dims = dims.map_err(|_| {
                    malformed(line_no, format!("tensor `{name}` has a non-integer dimension"))
                })?;
                if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&d| d == 0) {
                    return Err(malformed(
                        line_no,
                        format!("tensor `{name}` has invalid shape {dims:?}"),
                    ));
                }
                specs.push((name.to_string(), dims));
                checked_lines.push_str(&line);
                checked_lines.push('\n');
            } else if let Some(rest) = line.strip_prefix("checksum ") {
                declared_checksum = Some(rest.to_string());
            } else if let Some(rest) = line.strip_prefix("payload ") {
                payload_count = rest.parse::<usize>().map_err(|_| {
                    malformed(line_no, format!("payload count `{rest}` is not an integer"))
                })?;
                checked_lines.push_str(&line);
                checked_lines.push('\n');
                break;
            } else {
                return Err(malformed(line_no, format!("unrecognized header line `{line}`")));
            }
        }

        let expected: usize = specs.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        if expected != payload_count {
            return Err(malformed(
                line_no,
                format!("payload declares {payload_count} values but tensors need {expected}"),
            ));
        }
        let payload = &bytes[pos..];
        if payload.len() != payload_count * 8 {
            return Err(malformed(
                line_no,
                format!(
                    "payload has {} bytes, expected {}",
                    payload.len(),
                    payload_count * 8
                ),
            ));
        }

        let declared = declared_checksum
            .ok_or_else(|| malformed(line_no, "missing `checksum <hex>` header line".to_string()))?;
        let mut hasher = Sha256::new();
        hasher.update(checked_lines.as_bytes());
        hasher.update(payload);
        let digest = format!("{:x}", hasher.finalize());
        if digest != declared {
            return Err(CheckpointError::ChecksumMismatch {
                path: path.to_string(),
            });
        }

        let mut tensors = Vec::with_capacity(specs.len());
        let mut offset = 0usize;
        for (name, dims) in specs {
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for i in 0..len {
                let start = (offset + i) * 8;
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&payload[start..start + 8]);
                data.push(f64::from_le_bytes(buf));
            }
            offset += len;
            tensors.push((name, Tensor::new(dims, data)));
        }

        Ok(Checkpoint { meta, tensors })
    }
}

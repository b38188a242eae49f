//! Probe checkpoints: a binary file of named little-endian `f64` tensors
//! plus a JSON metadata sidecar (`<path>.meta.json`).
//!
//! ```text
//! "SPCK" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u32 | name (UTF-8) | ndim u32 | dims ndim x u64 | values x f64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{Probe, ProbeConfig};
use crate::scalar::Scalar;

const MAGIC: [u8; 4] = *b"SPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stop_reason: String,
    pub best_step: usize,
    pub best_f1: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: String,
    pub encoder: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub probe: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainSummary>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn encode_tensors<T: Scalar>(probe: &Probe<T>) -> Vec<u8> {
    let tensors = probe.params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint<T: Scalar>(
    probe: &Probe<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    fs::write(path, encode_tensors(probe))?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(meta_path(path), json + "\n")?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// `(name, shape, values)` of one stored tensor.
pub type DecodedTensor = (String, Vec<usize>, Vec<f64>);

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<DecodedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = c
            .take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, shape, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", meta_file.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_file.display())))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Probe<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let tensors = decode_tensors(&bytes)?;
    let mut probe = Probe::<T>::new(meta.probe.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = probe
        .params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, architecture has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((dst, (name, shape)), (file_name, file_shape, values)) in probe
        .params
        .tensors_mut()
        .into_iter()
        .zip(&expected)
        .zip(tensors)
    {
        if *name != file_name || *shape != file_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {file_name} {file_shape:?} does not match {name} {shape:?}"
            )));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            *d = T::lit(v);
        }
    }
    Ok((probe, meta))
}

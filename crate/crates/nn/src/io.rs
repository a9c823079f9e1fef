//! Checkpoints and voxel datasets on disk.
//!
//! A checkpoint is the magic `PDOCKPT1`, a little-endian `u64` header
//! length, a JSON header and then the parameters followed by the
//! normalization buffers as little-endian `f64`. A dataset sample is a raw
//! little-endian `f32` tensor (`C x D x H x W`, row-major) next to a JSON
//! sidecar `{shape, field, label}`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::{LayerSpec, Model, ModelSpec};

const MAGIC: &[u8; 8] = b"PDOCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub seed: u64,
    pub field_types: Vec<String>,
    pub schemes: Vec<String>,
    pub n_params: usize,
    pub n_buffers: usize,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Model, extra: serde_json::Value) -> Result<()> {
    let params = model.params();
    let buffers = model.buffers();
    let schemes = model
        .spec()
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Conv { scheme, .. } => scheme.build().ok().map(|s| s.id()),
            _ => None,
        })
        .collect();
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        seed: model.seed(),
        field_types: model.layers().iter().map(|l| l.out_field().to_string()).collect(),
        schemes,
        n_params: params.len(),
        n_buffers: buffers.len(),
        extra,
    };
    let head = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(head.len() as u64).to_le_bytes())?;
    f.write_all(&head)?;
    let mut blob = Vec::with_capacity(8 * (params.len() + buffers.len()));
    for v in params.iter().chain(&buffers) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&blob)?;
    Ok(())
}

/// Rebuilds the model from the stored spec and overwrites its parameters
/// and buffers with the stored values.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(NnError::Format(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| NnError::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let blob = &bytes[16 + hlen..];
    if blob.len() != 8 * (header.n_params + header.n_buffers) {
        return Err(NnError::Format(format!(
            "blob holds {} bytes, header promises {} values",
            blob.len(),
            header.n_params + header.n_buffers
        )));
    }
    let vals: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = Model::build(&header.spec, header.seed)?;
    model.set_params(&vals[..header.n_params])?;
    model.set_buffers(&vals[header.n_params..])?;
    Ok((model, header))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub shape: [usize; 4],
    pub field: String,
    pub label: Option<usize>,
}

fn sample_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{i:04}.bin")),
        dir.join(format!("sample_{i:04}.json")),
    )
}

/// Writes `sample_NNNN.bin` / `sample_NNNN.json` pairs into `dir`.
pub fn write_dataset(dir: &Path, samples: &[(Array4<f64>, Option<usize>)], field: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (x, label)) in samples.iter().enumerate() {
        let (bin, meta) = sample_paths(dir, i);
        let s = x.shape();
        let bytes: Vec<u8> = x.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        fs::write(bin, bytes)?;
        let m = SampleMeta {
            shape: [s[0], s[1], s[2], s[3]],
            field: field.to_string(),
            label: *label,
        };
        fs::write(meta, serde_json::to_vec_pretty(&m)?)?;
    }
    Ok(())
}

pub fn read_sample(bin: &Path, meta: &Path) -> Result<(Array4<f64>, SampleMeta)> {
    let m: SampleMeta = serde_json::from_slice(&fs::read(meta)?)?;
    let bytes = fs::read(bin)?;
    let n: usize = m.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(NnError::Format(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            bin.display(),
            bytes.len(),
            m.shape,
            4 * n
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let x = Array4::from_shape_vec(m.shape, vals).map_err(|e| NnError::Format(e.to_string()))?;
    Ok((x, m))
}

/// Reads consecutive samples from `dir` until the first missing index.
pub fn read_dataset(dir: &Path) -> Result<Vec<(Array4<f64>, SampleMeta)>> {
    let mut out = Vec::new();
    loop {
        let (bin, meta) = sample_paths(dir, out.len());
        if !meta.exists() {
            break;
        }
        out.push(read_sample(&bin, &meta)?);
    }
    Ok(out)
}

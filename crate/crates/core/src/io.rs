//! On-disk formats: little-endian f32 matrices with JSON sidecars.
//!
//! A matrix file `name.f32` holds `rows * cols` values in row-major order and
//! nothing else; everything needed to interpret it lives in `name.json`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{SystemKind, Trajectory};

pub const MATRIX_FORMAT: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Content {
    Trajectory,
    Features,
    Latents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub format: String,
    pub content: Content,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// `traj.f32` -> `traj.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in values {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::format(
            path,
            format!("expected {} f32 values, file holds {} bytes", expected_len, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_f32(path, &traj.frames)?;
    write_json(
        &sidecar_path(path),
        &MatrixSidecar {
            format: MATRIX_FORMAT.into(),
            content: Content::Trajectory,
            rows: traj.n_frames(),
            cols: traj.dim,
            system: Some(traj.system),
            temperature: Some(traj.temperature),
            record_stride: Some(traj.record_stride),
            seed: Some(traj.seed),
            config_hash: Some(traj.config_hash.clone()),
        },
    )
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let side: MatrixSidecar = read_json(&sidecar_path(path))?;
    check_sidecar(path, &side, Content::Trajectory)?;
    let system = side.system.ok_or_else(|| Error::format(path, "sidecar lacks `system`"))?;
    if side.cols != system.dim() {
        return Err(Error::format(path, format!("{} frames must have {} columns", system, system.dim())));
    }
    let missing = |key: &str| Error::format(path, format!("sidecar lacks `{key}`"));
    Ok(Trajectory {
        system,
        dim: side.cols,
        frames: read_f32(path, side.rows * side.cols)?,
        temperature: side.temperature.ok_or_else(|| missing("temperature"))?,
        record_stride: side.record_stride.ok_or_else(|| missing("record_stride"))?,
        seed: side.seed.ok_or_else(|| missing("seed"))?,
        config_hash: side.config_hash.clone().ok_or_else(|| missing("config_hash"))?,
    })
}

/// Generated latents, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFile {
    pub dim: usize,
    pub values: Vec<f32>,
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl LatentFile {
    pub fn from_array(latents: &ndarray::Array2<f64>, temperature: Option<f64>, seed: u64) -> Self {
        LatentFile {
            dim: latents.ncols(),
            values: latents.iter().map(|&v| v as f32).collect(),
            temperature,
            seed,
        }
    }

    pub fn to_array(&self) -> ndarray::Array2<f64> {
        let rows = self.values.len() / self.dim.max(1);
        ndarray::Array2::from_shape_vec((rows, self.dim), self.values.iter().map(|&v| f64::from(v)).collect())
            .expect("values hold rows * dim entries")
    }
}

pub fn save_latents(path: &Path, latents: &LatentFile) -> Result<()> {
    write_f32(path, &latents.values)?;
    write_json(
        &sidecar_path(path),
        &MatrixSidecar {
            format: MATRIX_FORMAT.into(),
            content: Content::Latents,
            rows: latents.values.len() / latents.dim.max(1),
            cols: latents.dim,
            system: None,
            temperature: latents.temperature,
            record_stride: None,
            seed: Some(latents.seed),
            config_hash: None,
        },
    )
}

pub fn load_latents(path: &Path) -> Result<LatentFile> {
    let side: MatrixSidecar = read_json(&sidecar_path(path))?;
    check_sidecar(path, &side, Content::Latents)?;
    Ok(LatentFile {
        dim: side.cols,
        values: read_f32(path, side.rows * side.cols)?,
        temperature: side.temperature,
        seed: side.seed.unwrap_or_default(),
    })
}

fn check_sidecar(path: &Path, side: &MatrixSidecar, content: Content) -> Result<()> {
    if side.format != MATRIX_FORMAT {
        return Err(Error::format(path, format!("unsupported format `{}`", side.format)));
    }
    if side.content != content {
        return Err(Error::format(path, format!("expected {:?} content, found {:?}", content, side.content)));
    }
    Ok(())
}

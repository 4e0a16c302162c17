//! Morphable model container: `manifest.json` plus raw little-endian blobs.
//!
//! Float blobs are `f32`, row-major (`rows x cols`); vectors have one
//! column. Vertex-indexed rows are interleaved `x0 y0 z0 x1 ...` (or
//! `r g b`). `triangles.u32` holds `3 * triangle_count` little-endian
//! `u32` vertex indices.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LandmarkLayout, MorphableModel};

pub const MODEL_FORMAT: &str = "faceforge-mm/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub n_vertices: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub k_alb: usize,
    pub triangle_count: usize,
    pub landmark_indices: Vec<usize>,
    #[serde(default)]
    pub landmark_layout: LandmarkLayout,
    pub blobs: Vec<BlobInfo>,
}

fn f32_bytes<'a>(it: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    it.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_model(dir: &Path, model: &MorphableModel) -> Result<ModelManifest> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let n3 = 3 * model.n_vertices;
    let entries: Vec<(&str, usize, usize, Vec<u8>)> = vec![
        ("mean_shape", n3, 1, f32_bytes(model.mean_shape.iter())),
        ("id_basis", n3, model.k_id(), row_major(&model.id_basis)),
        ("exp_basis", n3, model.k_exp(), row_major(&model.exp_basis)),
        ("mean_albedo", n3, 1, f32_bytes(model.mean_albedo.iter())),
        ("alb_basis", n3, model.k_alb(), row_major(&model.alb_basis)),
        ("sigma_id", model.k_id(), 1, f32_bytes(model.sigma_id.iter())),
        ("sigma_exp", model.k_exp(), 1, f32_bytes(model.sigma_exp.iter())),
        ("sigma_alb", model.k_alb(), 1, f32_bytes(model.sigma_alb.iter())),
    ];
    let mut blobs = Vec::new();
    for (name, rows, cols, bytes) in entries {
        let file = format!("{name}.f32");
        fs::write(dir.join(&file), bytes)?;
        blobs.push(BlobInfo { name: name.into(), file, dtype: "f32le".into(), rows, cols });
    }
    let tris: Vec<u8> = model.triangles.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join("triangles.u32"), tris)?;
    blobs.push(BlobInfo {
        name: "triangles".into(),
        file: "triangles.u32".into(),
        dtype: "u32le".into(),
        rows: model.triangles.len(),
        cols: 3,
    });
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        n_vertices: model.n_vertices,
        k_id: model.k_id(),
        k_exp: model.k_exp(),
        k_alb: model.k_alb(),
        triangle_count: model.triangles.len(),
        landmark_indices: model.landmark_indices.clone(),
        landmark_layout: model.landmark_layout.clone(),
        blobs,
    };
    super::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn blob<'a>(m: &'a ModelManifest, name: &str) -> Result<&'a BlobInfo> {
    m.blobs
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::Format(format!("model manifest lacks blob '{name}'")))
}

fn read_f32(dir: &Path, b: &BlobInfo, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if b.dtype != "f32le" || b.rows != rows || b.cols != cols {
        return Err(Error::Format(format!("blob '{}' should be f32le {rows}x{cols}", b.name)));
    }
    let bytes = fs::read(dir.join(&b.file))?;
    if bytes.len() != 4 * rows * cols {
        return Err(Error::Format(format!("blob '{}' has {} bytes, expected {}", b.name, bytes.len(), 4 * rows * cols)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Loads a model directory (or the directory containing a manifest path).
pub fn read_model(path: &Path) -> Result<MorphableModel> {
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let m: ModelManifest = super::read_json(&dir.join(MANIFEST))?;
    if m.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unsupported model format '{}'", m.format)));
    }
    let n3 = 3 * m.n_vertices;
    let vec = |name: &str, rows: usize| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(read_f32(dir, blob(&m, name)?, rows, 1)?))
    };
    let mat = |name: &str, cols: usize| -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(n3, cols, &read_f32(dir, blob(&m, name)?, n3, cols)?))
    };
    let tb = blob(&m, "triangles")?;
    if tb.dtype != "u32le" || tb.cols != 3 || tb.rows != m.triangle_count {
        return Err(Error::Format("triangle blob does not match the manifest".into()));
    }
    let bytes = fs::read(dir.join(&tb.file))?;
    if bytes.len() != 12 * m.triangle_count {
        return Err(Error::Format("triangle blob has the wrong length".into()));
    }
    let idx: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let model = MorphableModel {
        n_vertices: m.n_vertices,
        mean_shape: vec("mean_shape", n3)?,
        id_basis: mat("id_basis", m.k_id)?,
        exp_basis: mat("exp_basis", m.k_exp)?,
        mean_albedo: vec("mean_albedo", n3)?,
        alb_basis: mat("alb_basis", m.k_alb)?,
        sigma_id: vec("sigma_id", m.k_id)?,
        sigma_exp: vec("sigma_exp", m.k_exp)?,
        sigma_alb: vec("sigma_alb", m.k_alb)?,
        triangles: idx.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect(),
        landmark_indices: m.landmark_indices.clone(),
        landmark_layout: m.landmark_layout.clone(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic_model;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_model(5, 120, 4, 3, 4).unwrap();
        write_model(dir.path(), &m).unwrap();
        let back = read_model(dir.path()).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.landmark_indices, m.landmark_indices);
        assert!((&back.id_basis - &m.id_basis).amax() < 1e-6);
        assert_eq!(back.id_basis[(4, 2)], m.id_basis[(4, 2)] as f32 as f64);
        let again = tempfile::tempdir().unwrap();
        write_model(again.path(), &back).unwrap();
        for f in ["manifest.json", "id_basis.f32", "triangles.u32"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
        assert!(read_model(&dir.path().join(MANIFEST)).is_ok());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_model(5, 60, 2, 2, 2).unwrap();
        let mut man = write_model(dir.path(), &m).unwrap();
        man.format = "other/9".into();
        super::super::write_json(&dir.path().join(MANIFEST), &man).unwrap();
        assert!(matches!(read_model(dir.path()), Err(Error::Format(_))));
    }
}

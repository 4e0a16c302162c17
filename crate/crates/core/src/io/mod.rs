//! On-disk formats: PFM float maps, sRGB PNG, the model container, JSON
//! parameter/fit/landmark files, OBJ meshes, configuration and datasets.

pub mod config;
pub mod dataset;
pub mod model_file;
pub mod pfm;
pub mod png;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitting::{FitResult, Landmark, LandmarkSet};
use crate::image::{Mask, RgbImage, ScalarMap};
use crate::model::{FaceParams, Mesh};
use crate::pipeline::InverseRendering;

pub use model_file::{read_model, write_model, MODEL_FORMAT};

pub const FIT_FORMAT: &str = "faceforge-fit/1";

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_params(path: &Path, params: &FaceParams) -> Result<()> {
    write_json(path, params)
}

/// Reads a bare parameter file or the `params` of a fit file.
pub fn read_params(path: &Path) -> Result<FaceParams> {
    let v: serde_json::Value = read_json(path)?;
    let inner = match v.get("params") {
        Some(p) if v.get("format").is_some() => p.clone(),
        _ => v,
    };
    Ok(serde_json::from_value(inner)?)
}

#[derive(Serialize)]
struct FitFile<'a> {
    format: &'static str,
    #[serde(flatten)]
    fit: &'a FitResult,
}

pub fn write_fit(path: &Path, fit: &FitResult) -> Result<()> {
    write_json(path, &FitFile { format: FIT_FORMAT, fit })
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    let v: serde_json::Value = read_json(path)?;
    if v.get("format").and_then(|f| f.as_str()) != Some(FIT_FORMAT) {
        return Err(Error::Format(format!("{} is not a {FIT_FORMAT} file", path.display())));
    }
    Ok(serde_json::from_value(v)?)
}

/// Landmarks as a JSON array of `[vertex_index, x, y]`.
pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let rows: Vec<(usize, f64, f64)> = read_json(path)?;
    Ok(LandmarkSet::new(rows.into_iter().map(|(index, x, y)| Landmark { index, point: [x, y] }).collect()))
}

pub fn write_landmarks(path: &Path, landmarks: &LandmarkSet) -> Result<()> {
    let rows: Vec<(usize, f64, f64)> = landmarks.points.iter().map(|l| (l.index, l.point[0], l.point[1])).collect();
    write_json(path, &rows)
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads `.pfm` as linear floats or `.png` as sRGB converted to linear.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    match extension(path).as_str() {
        "pfm" => pfm::read_rgb(path),
        "png" => png::read_rgb(path),
        e => invalid(format!("unsupported image extension '{e}' (use .pfm or .png)")),
    }
}

pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    match extension(path).as_str() {
        "pfm" => pfm::write_rgb(path, image),
        "png" => png::write_rgb(path, image),
        e => invalid(format!("unsupported image extension '{e}' (use .pfm or .png)")),
    }
}

/// Writes `stem.pfm` and a `stem.png` preview into `dir`.
pub fn write_image_pair(dir: &Path, stem: &str, image: &RgbImage) -> Result<()> {
    pfm::write_rgb(&dir.join(format!("{stem}.pfm")), image)?;
    png::write_rgb(&dir.join(format!("{stem}.png")), image)
}

/// Scalar map with NaN outside `mask`.
pub fn masked_scalar(map: &ScalarMap, mask: &Mask) -> ScalarMap {
    let data = map.data.iter().zip(&mask.data).map(|(&v, &m)| if m { v } else { f64::NAN }).collect();
    ScalarMap { width: map.width, height: map.height, data }
}

/// OBJ with per-vertex colors (`v x y z r g b`), colors clamped to [0, 1].
pub fn obj_string(positions: &DVector<f64>, colors: &DVector<f64>, triangles: &[[u32; 3]]) -> String {
    let mut s = String::new();
    for (p, c) in positions.as_slice().chunks_exact(3).zip(colors.as_slice().chunks_exact(3)) {
        let c = [c[0], c[1], c[2]].map(|v| v.clamp(0.0, 1.0));
        let _ = writeln!(s, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    for t in triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    fs::write(path, obj_string(&mesh.positions, &mesh.colors, &mesh.triangles))?;
    Ok(())
}

/// Mesh over the pixel grid: one vertex per masked pixel at
/// `(x + 0.5, y + 0.5, k * depth)`, two triangles per fully masked 2x2 cell.
pub fn depth_mesh(depth: &ScalarMap, albedo: &RgbImage, mask: &Mask, pixels_per_unit: f64) -> Result<Mesh> {
    depth.check_size(mask, "mask")?;
    depth.check_size(albedo, "albedo")?;
    let (w, h) = (depth.width, depth.height);
    let mut index = vec![u32::MAX; w * h];
    let (mut pos, mut col) = (Vec::new(), Vec::new());
    for i in mask.indices() {
        let (x, y) = mask.xy(i);
        index[i] = (pos.len() / 3) as u32;
        pos.extend_from_slice(&[x as f64 + 0.5, y as f64 + 0.5, pixels_per_unit * depth.data[i]]);
        col.extend_from_slice(&albedo.data[i]);
    }
    let mut triangles = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            let [a, b, c, d] = [i, i + 1, i + w, i + w + 1].map(|j| index[j]);
            if [a, b, c, d].contains(&u32::MAX) {
                continue;
            }
            // counter-clockwise on screen with y down and depth toward the viewer
            triangles.push([a, c, b]);
            triangles.push([b, c, d]);
        }
    }
    Ok(Mesh { positions: DVector::from_vec(pos), colors: DVector::from_vec(col), triangles })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseRenderingSummary {
    pub status: crate::fitting::FitStatus,
    pub energy: crate::fitting::EnergyBreakdown,
    pub errors: crate::pipeline::StageErrors,
    pub refine_iterations: usize,
    pub face_pixels: usize,
    pub low_confidence_pixels: usize,
    pub missing_landmarks: bool,
}

/// Writes every stage output of an inverse rendering into `dir`.
pub fn write_inverse_rendering(dir: &Path, model: &crate::model::MorphableModel, ir: &InverseRendering) -> Result<InverseRenderingSummary> {
    fs::create_dir_all(dir)?;
    let params = ir.params();
    let mask = &ir.raster.mask;
    write_fit(&dir.join("fit.json"), &ir.fit)?;
    write_params(&dir.join("params.json"), params)?;
    let coarse = crate::raster::render_params(model, params, ir.image.width, ir.image.height, Some(&ir.image))?;
    write_image_pair(dir, "coarse", &coarse.rendered.image)?;
    write_image_pair(dir, "render", &ir.render()?)?;
    png::write_mask(&dir.join("mask.png"), mask)?;
    pfm::write_scalar(&dir.join("depth.pfm"), &masked_scalar(&ir.field.z, mask))?;
    pfm::write_scalar(&dir.join("displacement.pfm"), &masked_scalar(&ir.field.d, mask))?;
    pfm::write_scalar(&dir.join("refined_depth.pfm"), &masked_scalar(&ir.field.refined(), mask))?;
    pfm::write_rgb(&dir.join("albedo_coarse.pfm"), &ir.coarse_albedo)?;
    pfm::write_rgb(&dir.join("albedo_fine.pfm"), &ir.fine.albedo)?;
    png::write_mask(&dir.join("low_confidence.png"), &ir.fine.low_confidence)?;
    pfm::write_scalar(&dir.join("beta.pfm"), &ir.beta.beta)?;
    write_image_pair(dir, "albedo", &ir.blended_albedo)?;
    write_json(&dir.join("refine_trace.json"), &ir.refine_trace)?;
    write_obj(&dir.join("mesh.obj"), &model.mesh(params)?)?;
    let detail = depth_mesh(&ir.field.refined(), &ir.blended_albedo, mask, params.pose.scale)?;
    write_obj(&dir.join("detail_mesh.obj"), &detail)?;
    let summary = InverseRenderingSummary {
        status: ir.fit.status,
        energy: ir.fit.energy,
        errors: ir.errors,
        refine_iterations: ir.refine_trace.len().saturating_sub(1),
        face_pixels: mask.count(),
        low_confidence_pixels: ir.fine.low_confidence.count(),
        missing_landmarks: ir.beta.missing_landmarks,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
}

impl ErrorReport {
    pub fn from_error(e: &Error) -> Self {
        ErrorReport { error: e.kind().into(), message: e.to_string() }
    }
}

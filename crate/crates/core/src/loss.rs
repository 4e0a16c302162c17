//! Deterministic evaluators for the training losses and for depth error.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{invalid, Error, Result};
use crate::image::{Mask, RgbImage, ScalarMap};
use crate::lighting::Illumination;
use crate::model::{assemble_shape, FaceParams, MorphableModel};
use crate::raster::{rasterize, render_params};

/// Per-pixel interpolated mean shape and basis rows for every face pixel of
/// a ground-truth rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBasis {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<usize>,
    /// Stacked xyz rows, 3 per pixel.
    pub mean: DVector<f64>,
    pub id: DMatrix<f64>,
    pub exp: DMatrix<f64>,
}

impl PixelBasis {
    pub fn new(model: &MorphableModel, truth: &FaceParams, width: usize, height: usize) -> Result<Self> {
        truth.validate_for(model)?;
        let shape = assemble_shape(model, &truth.alpha_id, &truth.alpha_exp)?;
        let raster = rasterize(&shape, &truth.pose, &model.triangles, width, height);
        let pixels = raster.face_pixels();
        if pixels.is_empty() {
            return Err(Error::FaceOffScreen);
        }
        let f = pixels.len();
        let mut mean = DVector::zeros(3 * f);
        let mut id = DMatrix::zeros(3 * f, model.k_id());
        let mut exp = DMatrix::zeros(3 * f, model.k_exp());
        for (r, &i) in pixels.iter().enumerate() {
            let tri = model.triangles[raster.tri_index[i] as usize];
            let w = raster.bary[i];
            for k in 0..3 {
                for c in 0..3 {
                    let row = 3 * tri[k] as usize + c;
                    mean[3 * r + c] += w[k] * model.mean_shape[row];
                    for j in 0..model.k_id() {
                        id[(3 * r + c, j)] += w[k] * model.id_basis[(row, j)];
                    }
                    for j in 0..model.k_exp() {
                        exp[(3 * r + c, j)] += w[k] * model.exp_basis[(row, j)];
                    }
                }
            }
        }
        Ok(PixelBasis { width, height, pixels, mean, id, exp })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Pixel-center coordinates of the face pixels.
    pub fn pixel_centers(&self) -> Vec<Vector2<f64>> {
        self.pixels
            .iter()
            .map(|&i| Vector2::new((i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5))
            .collect()
    }
}

/// Projects the per-pixel surface points for geometry `(alpha_id,
/// alpha_exp)` under `pose`.
pub fn proj_points(basis: &PixelBasis, pose: &Pose, alpha_id: &[f64], alpha_exp: &[f64]) -> Result<Vec<Vector2<f64>>> {
    if alpha_id.len() != basis.id.ncols() || alpha_exp.len() != basis.exp.ncols() {
        return invalid("coefficient lengths do not match the pixel basis");
    }
    let p = &basis.mean + &basis.id * DVector::from_column_slice(alpha_id) + &basis.exp * DVector::from_column_slice(alpha_exp);
    Ok(p.as_slice()
        .chunks_exact(3)
        .map(|v| pose.project(&Vector3::new(v[0], v[1], v[2])).q)
        .collect())
}

fn proj(basis: &PixelBasis, pose_of: &FaceParams, geo_of: &FaceParams) -> Result<Vec<Vector2<f64>>> {
    proj_points(basis, &pose_of.pose, &geo_of.alpha_id, &geo_of.alpha_exp)
}

/// A loss as a raw sum plus the number of pixels it ran over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub sum: f64,
    pub pixels: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.pixels == 0 { 0.0 } else { self.sum / self.pixels as f64 }
    }
}

fn sq_dist(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> LossValue {
    LossValue { sum: a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum(), pixels: a.len() }
}

/// `|Proj(truth) - Proj(estimate pose, truth geometry)|^2`.
pub fn loss_pose(basis: &PixelBasis, truth: &FaceParams, estimate: &FaceParams) -> Result<LossValue> {
    Ok(sq_dist(&proj(basis, truth, truth)?, &proj(basis, estimate, truth)?))
}

/// `|Proj(truth) - Proj(truth pose, estimate geometry)|^2`.
pub fn loss_geo(basis: &PixelBasis, truth: &FaceParams, estimate: &FaceParams) -> Result<LossValue> {
    Ok(sq_dist(&proj(basis, truth, truth)?, &proj(basis, truth, estimate)?))
}

fn check_losses(ls: &[f64]) -> Result<()> {
    if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return invalid("losses must be finite and non-negative");
    }
    Ok(())
}

/// Adaptive weighting of the pose and geometry losses: returns `(w, L)` with
/// `w = L_geo / (L_pose + L_geo)` and `L = w L_pose + (1 - w) L_geo`.
pub fn loss_total_single(l_pose: f64, l_geo: f64) -> Result<(f64, f64)> {
    check_losses(&[l_pose, l_geo])?;
    let sum = l_pose + l_geo;
    if sum == 0.0 {
        return Ok((0.5, 0.0));
    }
    let w = l_geo / sum;
    Ok((w, w * l_pose + (1.0 - w) * l_geo))
}

/// Three-way weighting for tracking: returns `(w1, w2, L)`.
pub fn loss_total_tracking(l_pose: f64, l_geo: f64, l_col: f64) -> Result<(f64, f64, f64)> {
    check_losses(&[l_pose, l_geo, l_col])?;
    let sum = l_pose + l_geo + l_col;
    if sum == 0.0 {
        return Ok((1.0 / 3.0, 1.0 / 3.0, 0.0));
    }
    let w1 = (l_geo + l_col) / (2.0 * sum);
    let w2 = (l_pose + l_col) / (2.0 * sum);
    Ok((w1, w2, w1 * l_pose + w2 * l_geo + (1.0 - w1 - w2) * l_col))
}

/// Squared RGB difference over the face mask between `frame` and a render
/// with the true geometry and pose but the estimated albedo and lighting.
pub fn loss_col(
    model: &MorphableModel,
    truth: &FaceParams,
    alpha_alb: &[f64],
    illum: &Illumination,
    frame: &RgbImage,
) -> Result<LossValue> {
    let mut p = truth.clone();
    p.alpha_alb = alpha_alb.to_vec();
    p.illum = *illum;
    let r = render_params(model, &p, frame.width, frame.height, None)?;
    let pixels = r.raster.face_pixels();
    if pixels.is_empty() {
        return Err(Error::EmptyRegion("ground-truth face mask is empty".into()));
    }
    let sum = pixels
        .iter()
        .map(|&i| (0..3).map(|c| (r.rendered.image.data[i][c] - frame.data[i][c]).powi(2)).sum::<f64>())
        .sum();
    Ok(LossValue { sum, pixels: pixels.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthError {
    pub rmse: f64,
    pub mae: f64,
    pub pixels: usize,
}

/// RMSE and MAE over pixels of `mask` where both depths are finite.
pub fn depth_error(reconstructed: &ScalarMap, reference: &ScalarMap, mask: &Mask) -> Result<DepthError> {
    reconstructed.check_size(reference, "reference depth")?;
    reconstructed.check_size(mask, "mask")?;
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for i in mask.indices() {
        let (a, b) = (reconstructed.data[i], reference.data[i]);
        if a.is_finite() && b.is_finite() {
            let d = a - b;
            sq += d * d;
            abs += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("no pixel has both depths defined".into()));
    }
    Ok(DepthError { rmse: (sq / n as f64).sqrt(), mae: abs / n as f64, pixels: n })
}

/// One evaluated sample, as emitted in loss reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sample: String,
    pub pixels: usize,
    pub l_pose: f64,
    pub l_geo: f64,
    pub l_col: Option<f64>,
    pub w: f64,
    pub total_single: f64,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub total_tracking: Option<f64>,
}

/// Evaluates an estimate against the truth; with `frame`, the color loss
/// and tracking total are included.
pub fn evaluate_losses(
    model: &MorphableModel,
    sample: &str,
    truth: &FaceParams,
    estimate: &FaceParams,
    width: usize,
    height: usize,
    frame: Option<&RgbImage>,
) -> Result<LossReport> {
    estimate.validate_for(model)?;
    let basis = PixelBasis::new(model, truth, width, height)?;
    let lp = loss_pose(&basis, truth, estimate)?.sum;
    let lg = loss_geo(&basis, truth, estimate)?.sum;
    let (w, total_single) = loss_total_single(lp, lg)?;
    let mut report = LossReport {
        sample: sample.to_string(),
        pixels: basis.len(),
        l_pose: lp,
        l_geo: lg,
        l_col: None,
        w,
        total_single,
        w1: None,
        w2: None,
        total_tracking: None,
    };
    if let Some(frame) = frame {
        let lc = loss_col(model, truth, &estimate.alpha_alb, &estimate.illum, frame)?.sum;
        let (w1, w2, t) = loss_total_tracking(lp, lg, lc)?;
        report.l_col = Some(lc);
        report.w1 = Some(w1);
        report.w2 = Some(w2);
        report.total_tracking = Some(t);
    }
    Ok(report)
}

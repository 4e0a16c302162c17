//! Stage 1: analysis-by-synthesis fit of geometry, albedo, pose and lighting
//! to an image and sparse landmarks with damped Gauss-Newton.
//!
//! The objective is `E = E_con + w_l E_lan + w_r E_reg`, where `E_con` is the
//! mean squared RGB error over the face region, `E_lan` the mean squared
//! landmark reprojection error in pixels and `E_reg` the squared
//! sigma-normalized coefficients.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{rotation_derivatives, Pose};
use crate::error::{invalid, Error, Result};
use crate::image::{masked_rmse, RgbImage};
use crate::lighting::{sh_basis_gradient, sh_basis_unit, Illumination, ILLUM_COEFFS, SH_COEFFS};
use crate::linalg::damped_step;
use crate::model::{assemble_shape, vertex, FaceParams, MorphableModel};
use crate::raster::{render_params, CoarseRender, RasterMap};

/// Per-phase iteration caps. Every trial step, accepted or not, counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseIterations {
    pub pose: usize,
    pub shape: usize,
    pub appearance: usize,
    pub joint: usize,
}

impl Default for PhaseIterations {
    fn default() -> Self {
        PhaseIterations { pose: 20, shape: 30, appearance: 30, joint: 80 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FittingConfig {
    /// Landmark weight `w_l`.
    pub w_l: f64,
    /// Regularization weight `w_r`.
    pub w_r: f64,
    /// Photometric residuals are multiplied by this factor inside the
    /// optimizer, i.e. intensities are compared on a `[0, intensity_scale]`
    /// range.
    pub intensity_scale: f64,
    pub max_iterations: PhaseIterations,
    pub lambda_init: f64,
    /// Divisor applied to the damping after an accepted step.
    pub lambda_decay: f64,
    /// Multiplier applied to the damping after a rejected step.
    pub lambda_growth: f64,
    /// A phase stops when an accepted step lowers the energy by less than
    /// this fraction.
    pub tolerance: f64,
}

pub const DEFAULT_INTENSITY_SCALE: f64 = 255.0;

impl Default for FittingConfig {
    fn default() -> Self {
        FittingConfig {
            w_l: 10.0,
            w_r: 5e-5,
            intensity_scale: DEFAULT_INTENSITY_SCALE,
            max_iterations: PhaseIterations::default(),
            lambda_init: 1e-3,
            lambda_decay: 2.0,
            lambda_growth: 10.0,
            tolerance: 1e-7,
        }
    }
}

impl FittingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_l >= 0.0 && self.w_r >= 0.0) {
            return invalid("fitting weights must be non-negative");
        }
        if !(self.intensity_scale > 0.0) {
            return invalid("intensity_scale must be positive");
        }
        if !(self.tolerance > 0.0) {
            return invalid("tolerance must be positive");
        }
        if !(self.lambda_init > 0.0 && self.lambda_decay > 1.0 && self.lambda_growth > 1.0) {
            return invalid("damping must start positive, decay > 1 and growth > 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    /// Model vertex index.
    pub index: usize,
    /// Image position in pixels.
    pub point: [f64; 2],
}

/// Correspondences between model landmark vertices and image points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Self {
        LandmarkSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate_for(&self, model: &MorphableModel) -> Result<()> {
        for l in &self.points {
            if !model.landmark_indices.contains(&l.index) {
                return invalid(format!("vertex {} is not a model landmark", l.index));
            }
            if !(l.point[0].is_finite() && l.point[1].is_finite()) {
                return invalid("landmark point is not finite");
            }
        }
        Ok(())
    }

    /// Exact projections of every model landmark under `params`.
    pub fn project(model: &MorphableModel, params: &FaceParams) -> Result<Self> {
        let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
        let points = model
            .landmark_indices
            .iter()
            .map(|&v| {
                let q = params.pose.project(&vertex(&shape, v)).q;
                Landmark { index: v, point: [q.x, q.y] }
            })
            .collect();
        Ok(LandmarkSet { points })
    }

    /// Position of the landmark on vertex `index`, if present.
    pub fn point_of(&self, index: usize) -> Option<Vector2<f64>> {
        self.points.iter().find(|l| l.index == index).map(|l| Vector2::new(l.point[0], l.point[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Photometric term in optimizer units (scaled by `intensity_scale^2`).
    pub e_con: f64,
    pub e_lan: f64,
    pub e_reg: f64,
    pub e_total: f64,
}

impl EnergyBreakdown {
    pub fn new(e_con: f64, e_lan: f64, e_reg: f64, config: &FittingConfig) -> Self {
        EnergyBreakdown { e_con, e_lan, e_reg, e_total: e_con + config.w_l * e_lan + config.w_r * e_reg }
    }
}

/// Index ranges of the packed parameter vector
/// `[pitch, yaw, roll, s, tx, ty | alpha_id | alpha_exp | alpha_alb | r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub k_id: usize,
    pub k_exp: usize,
    pub k_alb: usize,
}

impl ParamLayout {
    pub fn of(model: &MorphableModel) -> Self {
        ParamLayout { k_id: model.k_id(), k_exp: model.k_exp(), k_alb: model.k_alb() }
    }

    pub fn pose(&self) -> Range<usize> {
        0..Pose::PARAMS
    }

    pub fn id(&self) -> Range<usize> {
        6..6 + self.k_id
    }

    pub fn exp(&self) -> Range<usize> {
        self.id().end..self.id().end + self.k_exp
    }

    /// Identity followed by expression coefficients.
    pub fn geometry(&self) -> Range<usize> {
        6..self.exp().end
    }

    pub fn alb(&self) -> Range<usize> {
        self.exp().end..self.exp().end + self.k_alb
    }

    pub fn illum(&self) -> Range<usize> {
        self.alb().end..self.alb().end + ILLUM_COEFFS
    }

    pub fn len(&self) -> usize {
        self.illum().end
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, p: &FaceParams) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        x.rows_mut(0, 6).copy_from_slice(&p.pose.to_array());
        x.rows_mut(self.id().start, self.k_id).copy_from_slice(&p.alpha_id);
        x.rows_mut(self.exp().start, self.k_exp).copy_from_slice(&p.alpha_exp);
        x.rows_mut(self.alb().start, self.k_alb).copy_from_slice(&p.alpha_alb);
        x.rows_mut(self.illum().start, ILLUM_COEFFS).copy_from_slice(&p.illum.coeffs);
        x
    }

    pub fn unpack(&self, x: &DVector<f64>) -> FaceParams {
        let s = x.as_slice();
        let mut coeffs = [0.0; ILLUM_COEFFS];
        coeffs.copy_from_slice(&s[self.illum()]);
        FaceParams {
            alpha_id: s[self.id()].to_vec(),
            alpha_exp: s[self.exp()].to_vec(),
            alpha_alb: s[self.alb()].to_vec(),
            pose: Pose::from_array([s[0], s[1], s[2], s[3], s[4], s[5]]),
            illum: Illumination { coeffs },
        }
    }
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.width == 0 || image.height == 0 {
        return invalid("image is empty");
    }
    if image.data.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("image has non-finite pixels");
    }
    Ok(())
}

fn sum_sq_diff(render: &CoarseRender, image: &RgbImage) -> Result<(f64, usize)> {
    let mask = &render.raster.mask;
    let n = mask.count();
    if n == 0 {
        return Err(Error::FaceOffScreen);
    }
    let mut acc = 0.0;
    for i in mask.indices() {
        for c in 0..3 {
            acc += (render.rendered.image.data[i][c] - image.data[i][c]).powi(2);
        }
    }
    Ok((acc, n))
}

/// `(1/|F|) sum_F |I_ren - I_in|^2` with intensities as given.
pub fn energy_con(image: &RgbImage, params: &FaceParams, model: &MorphableModel) -> Result<f64> {
    check_image(image)?;
    let render = render_params(model, params, image.width, image.height, None)?;
    let (acc, n) = sum_sq_diff(&render, image)?;
    Ok(acc / n as f64)
}

/// Photometric energy with the pixel-to-triangle assignment of `raster`
/// held fixed.
pub fn energy_con_frozen(
    image: &RgbImage,
    params: &FaceParams,
    model: &MorphableModel,
    raster: &RasterMap,
) -> Result<f64> {
    raster.mask.check_size(image, "image")?;
    let n = raster.face_count();
    if n == 0 {
        return Err(Error::FaceOffScreen);
    }
    let tri = TriangleShading::build(model, params, raster, false)?;
    let albedo = crate::model::assemble_albedo(model, &params.alpha_alb)?;
    let mut acc = 0.0;
    for i in raster.face_pixels() {
        let t = raster.tri_index[i] as usize;
        let b = pixel_albedo(model, &albedo, raster, i);
        let s = tri.shading[&t].s;
        for c in 0..3 {
            acc += (b[c] * s[c] - image.data[i][c]).powi(2);
        }
    }
    Ok(acc / n as f64)
}

/// Gradient of [`energy_con_frozen`] w.r.t. the 27 lighting coefficients.
pub fn con_lighting_gradient(
    image: &RgbImage,
    params: &FaceParams,
    model: &MorphableModel,
    raster: &RasterMap,
) -> Result<[f64; ILLUM_COEFFS]> {
    raster.mask.check_size(image, "image")?;
    let n = raster.face_count();
    if n == 0 {
        return Err(Error::FaceOffScreen);
    }
    let tri = TriangleShading::build(model, params, raster, false)?;
    let albedo = crate::model::assemble_albedo(model, &params.alpha_alb)?;
    let mut g = [0.0; ILLUM_COEFFS];
    for i in raster.face_pixels() {
        let ts = &tri.shading[&(raster.tri_index[i] as usize)];
        let b = pixel_albedo(model, &albedo, raster, i);
        for c in 0..3 {
            let r = b[c] * ts.s[c] - image.data[i][c];
            for j in 0..SH_COEFFS {
                g[c * SH_COEFFS + j] += 2.0 * r * b[c] * ts.phi[j] / n as f64;
            }
        }
    }
    Ok(g)
}

/// `(1/|L|) sum |q_i - proj(p_i)|^2`.
pub fn energy_lan(landmarks: &LandmarkSet, params: &FaceParams, model: &MorphableModel) -> Result<f64> {
    if landmarks.is_empty() {
        return invalid("landmark set is empty");
    }
    let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
    let r = params.pose.rotation();
    let mut acc = 0.0;
    for l in &landmarks.points {
        if l.index >= model.n_vertices {
            return invalid(format!("landmark vertex {} out of range", l.index));
        }
        let q = crate::camera::project_with(&r, params.pose.scale, params.pose.t, &vertex(&shape, l.index)).q;
        acc += (q.x - l.point[0]).powi(2) + (q.y - l.point[1]).powi(2);
    }
    Ok(acc / landmarks.len() as f64)
}

/// Mean Euclidean landmark reprojection error in pixels.
pub fn landmark_error(landmarks: &LandmarkSet, params: &FaceParams, model: &MorphableModel) -> Result<f64> {
    if landmarks.is_empty() {
        return invalid("landmark set is empty");
    }
    let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
    let total: f64 = landmarks
        .points
        .iter()
        .map(|l| {
            let q = params.pose.project(&vertex(&shape, l.index)).q;
            (q - Vector2::new(l.point[0], l.point[1])).norm()
        })
        .sum();
    Ok(total / landmarks.len() as f64)
}

/// `sum (alpha / sigma)^2` over identity, expression and albedo modes.
pub fn energy_reg(params: &FaceParams, model: &MorphableModel) -> f64 {
    let term = |a: &[f64], s: &DVector<f64>| a.iter().zip(s.iter()).map(|(a, s)| (a / s).powi(2)).sum::<f64>();
    term(&params.alpha_id, &model.sigma_id)
        + term(&params.alpha_exp, &model.sigma_exp)
        + term(&params.alpha_alb, &model.sigma_alb)
}

/// Full objective at `params`.
pub fn energy(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    params: &FaceParams,
    model: &MorphableModel,
    config: &FittingConfig,
) -> Result<EnergyBreakdown> {
    let con = energy_con(image, params, model)?;
    let lan = if landmarks.is_empty() { 0.0 } else { energy_lan(landmarks, params, model)? };
    Ok(EnergyBreakdown::new(
        config.intensity_scale.powi(2) * con,
        lan,
        energy_reg(params, model),
        config,
    ))
}

/// RMSE of the flat-shaded render of `params` against `image` over the
/// rendered face region.
pub fn photometric_rmse(image: &RgbImage, params: &FaceParams, model: &MorphableModel) -> Result<f64> {
    let render = render_params(model, params, image.width, image.height, None)?;
    if render.raster.face_count() == 0 {
        return Err(Error::FaceOffScreen);
    }
    masked_rmse(&render.rendered.image, image, &render.raster.mask)
}

/// Landmark residuals `proj(p_i) - q_i` (x then y per landmark) and their
/// Jacobian w.r.t. the packed parameter vector of [`ParamLayout`].
pub fn landmark_jacobian(
    landmarks: &LandmarkSet,
    params: &FaceParams,
    model: &MorphableModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let layout = ParamLayout::of(model);
    let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
    let pose = &params.pose;
    let r = pose.rotation();
    let dr = rotation_derivatives(pose.pitch, pose.yaw, pose.roll);
    let m = landmarks.len();
    let mut res = DVector::zeros(2 * m);
    let mut jac = DMatrix::zeros(2 * m, layout.len());
    let sr: Matrix2x3<f64> = pose.scale * r.fixed_rows::<2>(0).into_owned();
    for (k, l) in landmarks.points.iter().enumerate() {
        if l.index >= model.n_vertices {
            return invalid(format!("landmark vertex {} out of range", l.index));
        }
        let p = vertex(&shape, l.index);
        let rp = r * p;
        res[2 * k] = pose.scale * rp.x + pose.t[0] - l.point[0];
        res[2 * k + 1] = pose.scale * rp.y + pose.t[1] - l.point[1];
        for a in 0..3 {
            let d = dr[a] * p;
            jac[(2 * k, a)] = pose.scale * d.x;
            jac[(2 * k + 1, a)] = pose.scale * d.y;
        }
        jac[(2 * k, 3)] = rp.x;
        jac[(2 * k + 1, 3)] = rp.y;
        jac[(2 * k, 4)] = 1.0;
        jac[(2 * k + 1, 5)] = 1.0;
        let rows = 3 * l.index..3 * l.index + 3;
        for (basis, cols) in [(&model.id_basis, layout.id()), (&model.exp_basis, layout.exp())] {
            let block = basis.view((rows.start, 0), (3, basis.ncols()));
            let proj = sr * block;
            for (j, col) in cols.enumerate() {
                jac[(2 * k, col)] = proj[(0, j)];
                jac[(2 * k + 1, col)] = proj[(1, j)];
            }
        }
    }
    Ok((res, jac))
}

/// Flat shading of one triangle and its derivatives.
struct TriShade {
    phi: [f64; SH_COEFFS],
    /// Per-channel irradiance factor.
    s: [f64; 3],
    /// `d s_c / d(pitch, yaw, roll)`.
    ds_dangle: [[f64; 3]; 3],
    /// `d s_c / d alpha` over identity then expression modes.
    ds_dgeo: Vec<[f64; 3]>,
}

struct TriangleShading {
    shading: std::collections::BTreeMap<usize, TriShade>,
}

impl TriangleShading {
    /// Shading of every triangle visible in `raster`; derivatives only when
    /// `with_derivatives` is set.
    fn build(model: &MorphableModel, params: &FaceParams, raster: &RasterMap, with_derivatives: bool) -> Result<Self> {
        let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
        let pose = &params.pose;
        let r = pose.rotation();
        let dr = rotation_derivatives(pose.pitch, pose.yaw, pose.roll);
        let mut shading = std::collections::BTreeMap::new();
        for i in raster.face_pixels() {
            let t = raster.tri_index[i] as usize;
            if shading.contains_key(&t) {
                continue;
            }
            let tri = model.triangles[t];
            let [a, b, c] = tri.map(|v| vertex(&shape, v as usize));
            let m = (b - a).cross(&(c - a));
            let len = m.norm();
            let mh = if len > 0.0 { m / len } else { Vector3::zeros() };
            let n = r * mh;
            let phi = sh_basis_unit(&n);
            let s = params.illum.shading(&phi);
            let mut ts = TriShade { phi, s, ds_dangle: [[0.0; 3]; 3], ds_dgeo: Vec::new() };
            if with_derivatives && len > 0.0 {
                let grads = sh_basis_gradient(&n);
                let g: [Vector3<f64>; 3] = std::array::from_fn(|ch| {
                    let coeffs = params.illum.channel(ch);
                    (0..SH_COEFFS).fold(Vector3::zeros(), |acc, j| acc + grads[j] * coeffs[j])
                });
                for (k, drk) in dr.iter().enumerate() {
                    let dn = drk * mh;
                    for ch in 0..3 {
                        ts.ds_dangle[k][ch] = g[ch].dot(&dn);
                    }
                }
                let rg: [Vector3<f64>; 3] = std::array::from_fn(|ch| r.transpose() * g[ch]);
                let proj: Matrix3<f64> = (Matrix3::identity() - mh * mh.transpose()) / len;
                for basis in [&model.id_basis, &model.exp_basis] {
                    for k in 0..basis.ncols() {
                        let d = |v: u32| {
                            let o = 3 * v as usize;
                            Vector3::new(basis[(o, k)], basis[(o + 1, k)], basis[(o + 2, k)])
                        };
                        let (da, db, dc) = (d(tri[0]), d(tri[1]), d(tri[2]));
                        let dm = (db - da).cross(&(c - a)) + (b - a).cross(&(dc - da));
                        let dmh = proj * dm;
                        ts.ds_dgeo.push(std::array::from_fn(|ch| rg[ch].dot(&dmh)));
                    }
                }
            } else if with_derivatives {
                ts.ds_dgeo = vec![[0.0; 3]; model.k_id() + model.k_exp()];
            }
            shading.insert(t, ts);
        }
        Ok(TriangleShading { shading })
    }
}

fn pixel_albedo(model: &MorphableModel, albedo: &DVector<f64>, raster: &RasterMap, i: usize) -> [f64; 3] {
    let tri = model.triangles[raster.tri_index[i] as usize];
    let w = raster.bary[i];
    std::array::from_fn(|c| (0..3).map(|k| w[k] * albedo[3 * tri[k] as usize + c]).sum())
}

/// Calls `f(residual, entries)` for every photometric residual row
/// `I_ren - I_in` (pixel-major, channel-minor), with the sparse Jacobian row
/// w.r.t. the packed parameters. Assignments in `raster` are held fixed.
fn for_each_photometric_row<F>(
    image: &RgbImage,
    params: &FaceParams,
    model: &MorphableModel,
    raster: &RasterMap,
    mut f: F,
) -> Result<()>
where
    F: FnMut(f64, &[(usize, f64)]),
{
    let layout = ParamLayout::of(model);
    let tri = TriangleShading::build(model, params, raster, true)?;
    let albedo = crate::model::assemble_albedo(model, &params.alpha_alb)?;
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(64);
    let k_alb = model.k_alb();
    for i in raster.face_pixels() {
        let t = raster.tri_index[i] as usize;
        let ts = &tri.shading[&t];
        let b = pixel_albedo(model, &albedo, raster, i);
        let verts = model.triangles[t];
        let w = raster.bary[i];
        for c in 0..3 {
            entries.clear();
            for k in 0..3 {
                entries.push((k, b[c] * ts.ds_dangle[k][c]));
            }
            for (j, d) in ts.ds_dgeo.iter().enumerate() {
                entries.push((layout.geometry().start + j, b[c] * d[c]));
            }
            for m in 0..k_alb {
                let db: f64 = (0..3).map(|k| w[k] * model.alb_basis[(3 * verts[k] as usize + c, m)]).sum();
                entries.push((layout.alb().start + m, ts.s[c] * db));
            }
            for j in 0..SH_COEFFS {
                entries.push((layout.illum().start + c * SH_COEFFS + j, b[c] * ts.phi[j]));
            }
            f(b[c] * ts.s[c] - image.data[i][c], &entries);
        }
    }
    Ok(())
}

/// Dense photometric residuals and Jacobian under a frozen raster.
pub fn photometric_jacobian(
    image: &RgbImage,
    params: &FaceParams,
    model: &MorphableModel,
    raster: &RasterMap,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let layout = ParamLayout::of(model);
    let rows = 3 * raster.face_count();
    let mut res = DVector::zeros(rows);
    let mut jac = DMatrix::zeros(rows, layout.len());
    let mut row = 0;
    for_each_photometric_row(image, params, model, raster, |r, entries| {
        res[row] = r;
        for &(c, v) in entries {
            jac[(row, c)] = v;
        }
        row += 1;
    })?;
    Ok((res, jac))
}

/// Phase of the fitting schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Pose,
    Shape,
    Lighting,
    Appearance,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: Phase,
    pub iteration: usize,
    pub lambda: f64,
    pub accepted: bool,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FaceParams,
    pub energy: EnergyBreakdown,
    pub status: FitStatus,
    pub trace: Vec<TraceEntry>,
}

struct Problem<'a> {
    image: &'a RgbImage,
    landmarks: &'a LandmarkSet,
    model: &'a MorphableModel,
    config: &'a FittingConfig,
    layout: ParamLayout,
}

struct State {
    x: DVector<f64>,
    params: FaceParams,
    energy: EnergyBreakdown,
    render: CoarseRender,
}

impl Problem<'_> {
    fn evaluate(&self, x: DVector<f64>) -> Result<State> {
        let params = self.layout.unpack(&x);
        params.validate_for(self.model)?;
        let render = render_params(self.model, &params, self.image.width, self.image.height, None)?;
        let (acc, n) = sum_sq_diff(&render, self.image)?;
        let lan = if self.landmarks.is_empty() { 0.0 } else { energy_lan(self.landmarks, &params, self.model)? };
        let energy = EnergyBreakdown::new(
            self.config.intensity_scale.powi(2) * acc / n as f64,
            lan,
            energy_reg(&params, self.model),
            self.config,
        );
        Ok(State { x, params, energy, render })
    }

    /// Gauss-Newton normal equations `(J^T J, J^T r)` of the full objective.
    fn normal_equations(&self, st: &State) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p = self.layout.len();
        let mut jtj = DMatrix::zeros(p, p);
        let mut jtr = DVector::zeros(p);
        let raster = &st.render.raster;
        let wc = self.config.intensity_scale.powi(2) / raster.face_count() as f64;
        for_each_photometric_row(self.image, &st.params, self.model, raster, |r, entries| {
            for &(a, va) in entries {
                jtr[a] += wc * va * r;
                for &(b, vb) in entries {
                    jtj[(a, b)] += wc * va * vb;
                }
            }
        })?;
        if !self.landmarks.is_empty() {
            let (res, jac) = landmark_jacobian(self.landmarks, &st.params, self.model)?;
            let wl = self.config.w_l / self.landmarks.len() as f64;
            jtj.gemm_tr(wl, &jac, &jac, 1.0);
            jtr.gemv_tr(wl, &jac, &res, 1.0);
        }
        let wr = self.config.w_r;
        let sigmas = self.model.sigma_id.iter().chain(self.model.sigma_exp.iter());
        for (k, s) in sigmas.enumerate() {
            let j = self.layout.geometry().start + k;
            jtj[(j, j)] += wr / (s * s);
            jtr[j] += wr * st.x[j] / (s * s);
        }
        for (k, s) in self.model.sigma_alb.iter().enumerate() {
            let j = self.layout.alb().start + k;
            jtj[(j, j)] += wr / (s * s);
            jtr[j] += wr * st.x[j] / (s * s);
        }
        Ok((jtj, jtr))
    }

    /// Levenberg-Marquardt over the parameters in `active`. Returns whether
    /// the phase converged before its iteration cap.
    fn lm_phase(&self, st: &mut State, active: &[usize], phase: Phase, max_iter: usize, trace: &mut Vec<TraceEntry>) -> Result<bool> {
        let cfg = self.config;
        let mut lambda = cfg.lambda_init;
        let mut iter = 0;
        while iter < max_iter {
            let (jtj, jtr) = self.normal_equations(st)?;
            let sub_jtj = jtj.select_rows(active).select_columns(active);
            let sub_jtr = jtr.select_rows(active);
            loop {
                iter += 1;
                let trial = damped_step(&sub_jtj, &sub_jtr, lambda).ok().and_then(|dx| {
                    let mut x = st.x.clone();
                    for (k, &j) in active.iter().enumerate() {
                        x[j] += dx[k];
                    }
                    let small = dx.norm() <= 1e-14 * (1.0 + st.x.norm());
                    self.evaluate(x).ok().map(|s| (s, small))
                });
                match trial {
                    Some((cand, small)) if cand.energy.e_total <= st.energy.e_total => {
                        let drop = st.energy.e_total - cand.energy.e_total;
                        *st = cand;
                        lambda = (lambda / cfg.lambda_decay).max(1e-12);
                        trace.push(TraceEntry { phase, iteration: iter, lambda, accepted: true, energy: st.energy });
                        if small || drop <= cfg.tolerance * st.energy.e_total.max(f64::MIN_POSITIVE) {
                            return Ok(true);
                        }
                        break;
                    }
                    other => {
                        let energy = match other {
                            Some((cand, _)) => cand.energy,
                            None => EnergyBreakdown { e_con: f64::INFINITY, e_lan: f64::INFINITY, e_reg: f64::INFINITY, e_total: f64::INFINITY },
                        };
                        lambda *= cfg.lambda_growth;
                        trace.push(TraceEntry { phase, iteration: iter, lambda, accepted: false, energy });
                        if lambda > 1e12 {
                            return Ok(true);
                        }
                    }
                }
                if iter >= max_iter {
                    break;
                }
            }
        }
        Ok(false)
    }

    /// Exact least-squares lighting for the current geometry and albedo.
    fn solve_lighting(&self, st: &State) -> Option<Illumination> {
        let raster = &st.render.raster;
        let mut illum = st.params.illum;
        let mut ata = [SMatrix::<f64, 9, 9>::zeros(); 3];
        let mut atb = [SMatrix::<f64, 9, 1>::zeros(); 3];
        for i in raster.face_pixels() {
            let n = st.render.normals[raster.tri_index[i] as usize];
            let phi = SMatrix::<f64, 9, 1>::from_column_slice(&sh_basis_unit(&n));
            let b = pixel_albedo(self.model, &st.render.albedo, raster, i);
            for c in 0..3 {
                let a = phi * b[c];
                ata[c] += a * a.transpose();
                atb[c] += a * self.image.data[i][c];
            }
        }
        for c in 0..3 {
            let g = ata[c].cholesky()?.solve(&atb[c]);
            illum.coeffs[c * SH_COEFFS..(c + 1) * SH_COEFFS].copy_from_slice(g.as_slice());
        }
        Some(illum)
    }
}

/// Weak-perspective pose of the mean face from landmarks: an affine camera
/// fitted by least squares, projected onto the nearest scaled rotation.
pub fn estimate_pose(landmarks: &LandmarkSet, model: &MorphableModel) -> Result<Pose> {
    if landmarks.len() < 4 {
        return invalid("pose estimation needs at least 4 landmarks");
    }
    let mut a = DMatrix::zeros(landmarks.len(), 4);
    let mut bx = DVector::zeros(landmarks.len());
    let mut by = DVector::zeros(landmarks.len());
    for (k, l) in landmarks.points.iter().enumerate() {
        if l.index >= model.n_vertices {
            return invalid(format!("landmark vertex {} out of range", l.index));
        }
        let p = vertex(&model.mean_shape, l.index);
        a.row_mut(k).copy_from_slice(&[p.x, p.y, p.z, 1.0]);
        bx[k] = l.point[0];
        by[k] = l.point[1];
    }
    let ata = a.transpose() * &a;
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Singular("landmarks are degenerate for pose estimation".into()))?;
    let sx = chol.solve(&(a.transpose() * bx));
    let sy = chol.solve(&(a.transpose() * by));
    let m = Matrix2x3::new(sx[0], sx[1], sx[2], sy[0], sy[1], sy[2]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let scale = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    let rows = u * vt;
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()]);
    let (pitch, yaw, roll) = euler_from_rotation(&r);
    let pose = Pose::new(pitch, yaw, roll, scale, [sx[3], sy[3]]);
    pose.validate()?;
    Ok(pose)
}

/// Inverse of [`crate::camera::rotation_from_euler`].
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let pitch = r[(2, 1)].atan2(r[(2, 2)]);
    let roll = r[(1, 0)].atan2(r[(0, 0)]);
    (pitch, yaw, roll)
}

/// DC-only gray lighting that matches the mean image intensity over the
/// face region of `params` rendered with unit irradiance.
fn initial_lighting(image: &RgbImage, model: &MorphableModel, params: &FaceParams) -> Result<Illumination> {
    let mut unit = params.clone();
    unit.illum = Illumination::dc(1.0 / crate::lighting::sh_dc());
    let render = render_params(model, &unit, image.width, image.height, None)?;
    let idx = render.raster.face_pixels();
    if idx.is_empty() {
        return Err(Error::FaceOffScreen);
    }
    let albedo: f64 = idx.iter().map(|&i| pixel_albedo(model, &render.albedo, &render.raster, i).iter().sum::<f64>()).sum();
    let observed: f64 = idx.iter().map(|&i| image.data[i].iter().sum::<f64>()).sum();
    let gain = if albedo > 0.0 { observed / albedo } else { 1.0 };
    Ok(Illumination::dc(gain / crate::lighting::sh_dc()))
}

/// Fits from the mean face, with pose estimated from the landmarks and
/// gray lighting matched to the image.
pub fn fit_model(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    config: &FittingConfig,
) -> Result<FitResult> {
    let pose = estimate_pose(landmarks, model)?;
    let mut init = FaceParams::neutral(model, pose, Illumination::zeros());
    init.illum = initial_lighting(image, model, &init)?;
    fit_model_from(image, landmarks, model, config, &init)
}

/// Fits starting from `init`. The schedule is: pose on landmarks, then pose
/// and shape, then exact lighting followed by albedo and lighting, then all
/// parameters jointly. Every accepted step lowers the full objective.
pub fn fit_model_from(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    config: &FittingConfig,
    init: &FaceParams,
) -> Result<FitResult> {
    config.validate()?;
    check_image(image)?;
    init.validate_for(model)?;
    landmarks.validate_for(model)?;
    let layout = ParamLayout::of(model);
    let problem = Problem { image, landmarks, model, config, layout };
    let mut st = problem.evaluate(layout.pack(init))?;
    let mut trace = vec![TraceEntry { phase: Phase::Init, iteration: 0, lambda: config.lambda_init, accepted: true, energy: st.energy }];
    let it = config.max_iterations;

    let pose: Vec<usize> = layout.pose().collect();
    let shape: Vec<usize> = layout.pose().chain(layout.geometry()).collect();
    let appearance: Vec<usize> = layout.alb().chain(layout.illum()).collect();
    let all: Vec<usize> = (0..layout.len()).collect();

    if !landmarks.is_empty() {
        problem.lm_phase(&mut st, &pose, Phase::Pose, it.pose, &mut trace)?;
        problem.lm_phase(&mut st, &shape, Phase::Shape, it.shape, &mut trace)?;
    }
    if let Some(illum) = problem.solve_lighting(&st) {
        let mut x = st.x.clone();
        x.rows_mut(layout.illum().start, ILLUM_COEFFS).copy_from_slice(&illum.coeffs);
        let accepted = match problem.evaluate(x) {
            Ok(cand) if cand.energy.e_total <= st.energy.e_total => {
                st = cand;
                true
            }
            _ => false,
        };
        trace.push(TraceEntry { phase: Phase::Lighting, iteration: 1, lambda: 0.0, accepted, energy: st.energy });
    }
    problem.lm_phase(&mut st, &appearance, Phase::Appearance, it.appearance, &mut trace)?;
    let converged = problem.lm_phase(&mut st, &all, Phase::Joint, it.joint, &mut trace)?;
    let status = if converged { FitStatus::Converged } else { FitStatus::MaxIterations };
    if status == FitStatus::MaxIterations {
        log::warn!("fit stopped at the iteration cap, energy {}", st.energy.e_total);
    }
    Ok(FitResult { params: st.params, energy: st.energy, status, trace })
}

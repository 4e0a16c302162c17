//! Displacement transfer between two fitted faces: the source's detail
//! gradients are imposed on the target by a Poisson solve, and the target
//! is re-rendered with the result.

use nalgebra::{DVector, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{bilinear, neighbors4, Mask, RgbImage, ScalarMap};
use crate::linalg::{pcg, CgReport};
use crate::model::{assemble_shape, FaceParams, MorphableModel};
use crate::pipeline::{render_detailed, InverseRendering};
use crate::raster::{normals_with_support, rasterize, NormalSupport, RasterMap};

pub const SCALE_RANGE: [f64; 2] = [0.7, 1.3];
/// Visibility tolerance as a fraction of the source face's depth range.
pub const DEPTH_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Gradient scale `s_d`.
    pub scale: f64,
    /// Relative residual for the conjugate-gradient solve.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { scale: 1.0, tolerance: 1e-13, max_iterations: 20_000 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(SCALE_RANGE[0]..=SCALE_RANGE[1]).contains(&self.scale) {
            return invalid(format!("transfer scale {} outside [0.7, 1.3]", self.scale));
        }
        if !(self.tolerance > 0.0) {
            return invalid("transfer tolerance must be positive");
        }
        Ok(())
    }
}

/// Uniform draw of `s_d` from [`SCALE_RANGE`].
pub fn sample_scale<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(SCALE_RANGE[0]..=SCALE_RANGE[1])
}

/// A fitted face as seen in one image.
#[derive(Debug, Clone)]
pub struct FittedFace {
    pub params: FaceParams,
    pub shape: DVector<f64>,
    pub raster: RasterMap,
    pub triangles: Vec<[u32; 3]>,
}

impl FittedFace {
    pub fn new(model: &MorphableModel, params: &FaceParams, width: usize, height: usize) -> Result<Self> {
        params.validate_for(model)?;
        let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
        let raster = rasterize(&shape, &params.pose, &model.triangles, width, height);
        Ok(FittedFace { params: params.clone(), shape, raster, triangles: model.triangles.clone() })
    }
}

/// Source-image position for each target pixel, plus the region where
/// both faces are visible.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    /// Continuous source coordinates (pixel centers at `x + 0.5`).
    pub source: Vec<Option<Vector2<f64>>>,
    pub omega: Mask,
    /// Pixels of `omega` with a 4-neighbor outside it.
    pub boundary: Mask,
}

impl CorrespondenceMap {
    /// Identity map on `mask`.
    pub fn identity(mask: &Mask) -> Self {
        let source = (0..mask.len())
            .map(|i| {
                let (x, y) = mask.xy(i);
                mask.data[i].then(|| Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
            })
            .collect();
        Self::from_parts(mask.width, mask.height, source)
    }

    fn from_parts(width: usize, height: usize, source: Vec<Option<Vector2<f64>>>) -> Self {
        let omega = Mask { width, height, data: source.iter().map(|s| s.is_some()).collect() };
        let boundary = boundary_of(&omega);
        CorrespondenceMap { width, height, source, omega, boundary }
    }

    pub fn interior(&self) -> Mask {
        let data = self.omega.data.iter().zip(&self.boundary.data).map(|(&o, &b)| o && !b).collect();
        Mask { width: self.width, height: self.height, data }
    }
}

fn boundary_of(omega: &Mask) -> Mask {
    let (w, h) = (omega.width, omega.height);
    let mut out = Mask::filled(w, h, false);
    for i in omega.indices() {
        let (x, y) = omega.xy(i);
        let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        out.data[i] = edge || neighbors4(w, h, i).any(|q| !omega.data[q]);
    }
    out
}

/// For every target face pixel, the same surface point (triangle and
/// barycentrics) on the source mesh projected into the source image; kept
/// when that point is visible in the source z-buffer.
pub fn build_correspondence(target: &FittedFace, source: &FittedFace) -> Result<CorrespondenceMap> {
    if target.triangles != source.triangles {
        return invalid("target and source use different mesh topologies");
    }
    let src = &source.raster;
    let depths: Vec<f64> = src.face_pixels().iter().map(|&i| src.depth[i]).collect();
    let range = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = DEPTH_TOLERANCE * range.max(0.0);
    let tr = &target.raster;
    let mut out = vec![None; tr.width * tr.height];
    for i in tr.face_pixels() {
        let t = tr.tri_index[i] as usize;
        let tri = target.triangles[t];
        let w = tr.bary[i];
        let p = (0..3).fold(nalgebra::Vector3::zeros(), |acc, k| {
            acc + crate::model::vertex(&source.shape, tri[k] as usize) * w[k]
        });
        let proj = source.params.pose.project(&p);
        let (qx, qy) = (proj.q.x.floor(), proj.q.y.floor());
        if qx < 0.0 || qy < 0.0 || qx >= src.width as f64 || qy >= src.height as f64 {
            continue;
        }
        let j = qy as usize * src.width + qx as usize;
        if !src.mask.data[j] {
            continue;
        }
        if src.tri_index[j] as usize == t || (src.depth[j] - proj.depth).abs() <= tol {
            out[i] = Some(proj.q);
        }
    }
    Ok(CorrespondenceMap::from_parts(tr.width, tr.height, out))
}

/// Target gradient field `w = s_d * forward differences of d_s` sampled at
/// the source coordinates; `[w_x, w_y]` per pixel of omega.
pub fn guidance_field(d_s: &ScalarMap, corr: &CorrespondenceMap, scale: f64) -> Vec<[f64; 2]> {
    corr.source
        .iter()
        .map(|s| match s {
            Some(q) => {
                let c = bilinear(d_s, q.x, q.y);
                [
                    scale * (bilinear(d_s, q.x + 1.0, q.y) - c),
                    scale * (bilinear(d_s, q.x, q.y + 1.0) - c),
                ]
            }
            None => [0.0; 2],
        })
        .collect()
}

/// Divergence of `w` as seen by the normal equations at pixel `p`: the
/// adjoint (backward) difference over edges inside omega.
fn divergence(w: &[[f64; 2]], omega: &Mask, p: usize) -> f64 {
    let width = omega.width;
    let (x, y) = omega.xy(p);
    let mut acc = 0.0;
    if x + 1 < width && omega.data[p + 1] {
        acc -= w[p][0];
    }
    if x > 0 && omega.data[p - 1] {
        acc += w[p - 1][0];
    }
    if y + 1 < omega.height && omega.data[p + width] {
        acc -= w[p][1];
    }
    if y > 0 && omega.data[p - width] {
        acc += w[p - width][1];
    }
    acc
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub displacement: ScalarMap,
    /// Set when omega had no interior pixel and `d_t` was returned as is.
    pub empty_interior: bool,
    pub solver: Option<CgReport>,
}

/// Poisson transfer with an explicit gradient scale (any finite value;
/// [`transfer_displacement`] enforces the configured range).
pub fn poisson_transfer(
    d_s: &ScalarMap,
    d_t: &ScalarMap,
    corr: &CorrespondenceMap,
    scale: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<TransferResult> {
    if !scale.is_finite() {
        return invalid("transfer scale must be finite");
    }
    if d_t.width != corr.width || d_t.height != corr.height {
        return invalid("target displacement does not match the correspondence size");
    }
    let interior = corr.interior();
    let unknowns = interior.indices();
    if unknowns.is_empty() {
        log::warn!("transfer region has no interior; target displacement unchanged");
        return Ok(TransferResult { displacement: d_t.clone(), empty_interior: true, solver: None });
    }
    let w = guidance_field(d_s, corr, scale);
    let (width, height) = (corr.width, corr.height);
    let mut index = vec![usize::MAX; width * height];
    for (k, &p) in unknowns.iter().enumerate() {
        index[p] = k;
    }
    // interior pixels have all four neighbors in omega
    let mut rhs = vec![0.0; unknowns.len()];
    for (k, &p) in unknowns.iter().enumerate() {
        rhs[k] = divergence(&w, &corr.omega, p);
        for q in neighbors4(width, height, p) {
            if index[q] == usize::MAX {
                rhs[k] += d_t.data[q];
            }
        }
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        for (k, &p) in unknowns.iter().enumerate() {
            let mut acc = 4.0 * v[k];
            for q in neighbors4(width, height, p) {
                if index[q] != usize::MAX {
                    acc -= v[index[q]];
                }
            }
            out[k] = acc;
        }
    };
    let mut x: Vec<f64> = unknowns.iter().map(|&p| d_t.data[p]).collect();
    let report = pcg(apply, &vec![4.0; unknowns.len()], &rhs, &mut x, tolerance, max_iterations);
    if !report.converged {
        log::warn!("transfer solve stopped at relative residual {:e}", report.relative_residual);
    }
    let mut out = d_t.clone();
    for (k, &p) in unknowns.iter().enumerate() {
        out.data[p] = x[k];
    }
    Ok(TransferResult { displacement: out, empty_interior: false, solver: Some(report) })
}

/// Minimizes `sum |grad d - w|^2` over omega with `d = d_t` on its boundary;
/// `d_t` is kept outside omega.
pub fn transfer_displacement(
    d_s: &ScalarMap,
    d_t: &ScalarMap,
    corr: &CorrespondenceMap,
    config: &TransferConfig,
) -> Result<TransferResult> {
    config.validate()?;
    poisson_transfer(d_s, d_t, corr, config.scale, config.tolerance, config.max_iterations)
}

/// Largest `|4-neighbor Laplacian - divergence of w|` over interior pixels.
pub fn euler_lagrange_residual(d: &ScalarMap, d_s: &ScalarMap, corr: &CorrespondenceMap, scale: f64) -> f64 {
    let w = guidance_field(d_s, corr, scale);
    let interior = corr.interior();
    let mut worst: f64 = 0.0;
    for p in interior.indices() {
        let lap: f64 = neighbors4(d.width, d.height, p).map(|q| d.data[p] - d.data[q]).sum();
        worst = worst.max((lap - divergence(&w, &corr.omega, p)).abs());
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetailMeta {
    pub scale: f64,
    pub seed: Option<u64>,
    pub omega_pixels: usize,
    pub empty_interior: bool,
    pub solver_iterations: usize,
    pub solver_relative_residual: f64,
}

/// A re-rendered target carrying transferred detail.
#[derive(Debug, Clone)]
pub struct DetailSample {
    pub image: RgbImage,
    pub coarse_depth: ScalarMap,
    pub displacement: ScalarMap,
    pub mask: Mask,
    pub correspondence: CorrespondenceMap,
    pub params: FaceParams,
    pub meta: DetailMeta,
}

/// Transfers the source's displacement onto the target and renders the
/// target with its blended albedo and lighting over its input image.
pub fn synthesize_detail_sample(
    model: &MorphableModel,
    target: &InverseRendering,
    source: &InverseRendering,
    config: &TransferConfig,
    seed: Option<u64>,
) -> Result<DetailSample> {
    let (w, h) = (target.image.width, target.image.height);
    let tf = FittedFace::new(model, target.params(), w, h)?;
    let sf = FittedFace::new(model, source.params(), source.image.width, source.image.height)?;
    let corr = build_correspondence(&tf, &sf)?;
    let res = transfer_displacement(&source.field.d, &target.field.d, &corr, config)?;
    let mut d = res.displacement;
    for (v, &m) in d.data.iter_mut().zip(&target.raster.mask.data) {
        if !m {
            *v = 0.0;
        }
    }
    let z = &target.field.z;
    let refined = ScalarMap {
        width: w,
        height: h,
        data: z.data.iter().zip(&d.data).map(|(a, b)| a + b).collect(),
    };
    let support = NormalSupport::new(&target.raster.mask)?;
    let normals = normals_with_support(&refined, &support, target.params().pose.scale);
    let image = render_detailed(&target.raster, &target.blended_albedo, &normals, target.params(), Some(&target.image))?;
    let meta = DetailMeta {
        scale: config.scale,
        seed,
        omega_pixels: corr.omega.count(),
        empty_interior: res.empty_interior,
        solver_iterations: res.solver.map_or(0, |r| r.iterations),
        solver_relative_residual: res.solver.map_or(0.0, |r| r.relative_residual),
    };
    Ok(DetailSample {
        image,
        coarse_depth: z.clone(),
        displacement: d,
        mask: target.raster.mask.clone(),
        correspondence: corr,
        params: target.params().clone(),
        meta,
    })
}

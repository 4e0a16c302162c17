//! Stage 2: per-pixel depth displacement on top of the fitted coarse depth,
//! recovered from shading by iteratively reweighted least squares.
//!
//! Minimizes `E(d) = E_con(z + d) + mu1 |d|^2 + mu2 |L d|_1`, where `L` is
//! the 4-neighbor graph Laplacian of the face region and normals come from
//! the refined depth surface. `E_con` here is the summed (not averaged)
//! squared shading error, with intensities multiplied by
//! `intensity_scale`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitting::DEFAULT_INTENSITY_SCALE;
use crate::image::{neighbors4, Mask, NormalMap, RgbImage, ScalarMap};
use crate::lighting::{sh_basis_gradient, sh_basis_unit, Illumination};
use crate::linalg::pcg;
use crate::model::{FaceParams, MorphableModel};
use crate::raster::{forward_normal, normals_with_support, render_params, NormalSupport, RasterMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub mu1: f64,
    pub mu2: f64,
    /// Floor on `|L d|` in the reweighting, in depth units.
    pub epsilon: f64,
    pub outer_iterations: usize,
    /// Relative residual at which the inner conjugate-gradient solve stops.
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    /// Outer iterations stop once the energy drops by less than this
    /// fraction.
    pub tolerance: f64,
    /// Same role as [`crate::fitting::FittingConfig::intensity_scale`].
    pub intensity_scale: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            mu1: 1e-3,
            mu2: 0.3,
            epsilon: 1e-4,
            outer_iterations: 30,
            cg_tolerance: 1e-8,
            cg_max_iterations: 2000,
            tolerance: 1e-6,
            intensity_scale: DEFAULT_INTENSITY_SCALE,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) {
            return invalid("mu1 and mu2 must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.cg_tolerance > 0.0 && self.tolerance > 0.0) {
            return invalid("epsilon and tolerances must be positive");
        }
        if !(self.intensity_scale > 0.0) {
            return invalid("intensity_scale must be positive");
        }
        Ok(())
    }
}

/// Coarse depth, displacement and face mask on the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    pub mask: Mask,
    pub z: ScalarMap,
    /// Zero off the mask.
    pub d: ScalarMap,
}

impl DepthField {
    pub fn new(z: ScalarMap, mask: Mask) -> Result<Self> {
        z.check_size(&mask, "depth mask")?;
        let d = ScalarMap::filled(z.width, z.height, 0.0);
        Ok(DepthField { mask, z, d })
    }

    pub fn width(&self) -> usize {
        self.z.width
    }

    pub fn height(&self) -> usize {
        self.z.height
    }

    /// `z + d` on the mask, `z` elsewhere.
    pub fn refined(&self) -> ScalarMap {
        let data = self
            .z
            .data
            .iter()
            .zip(&self.d.data)
            .zip(&self.mask.data)
            .map(|((z, d), &m)| if m { z + d } else { *z })
            .collect();
        ScalarMap { width: self.z.width, height: self.z.height, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineEnergy {
    /// Photometric term in optimizer units.
    pub e_con: f64,
    /// `|d|_2^2`.
    pub d_sq: f64,
    /// `|L d|_1`.
    pub lap_l1: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub field: DepthField,
    /// Energy at the start and after every outer iteration.
    pub trace: Vec<RefineEnergy>,
}

/// Coarse depth (model units) and raster of the fitted face.
pub fn coarse_depth(model: &MorphableModel, params: &FaceParams, width: usize, height: usize) -> Result<(ScalarMap, RasterMap)> {
    let r = render_params(model, params, width, height, None)?;
    if r.raster.face_count() == 0 {
        return Err(Error::FaceOffScreen);
    }
    Ok((r.raster.depth_map(), r.raster))
}

/// Graph Laplacian `(L v)_p = sum_{q in N(p), q on mask} (v_p - v_q)` on
/// face pixels, zero elsewhere.
pub fn laplacian(v: &ScalarMap, mask: &Mask) -> ScalarMap {
    let mut out = ScalarMap::filled(v.width, v.height, 0.0);
    for p in mask.indices() {
        out.data[p] = neighbors4(v.width, v.height, p)
            .filter(|&q| mask.data[q])
            .map(|q| v.data[p] - v.data[q])
            .sum();
    }
    out
}

/// The refinement objective for one image, with the pixel-to-triangle
/// assignment, albedo and lighting fixed at their Stage-1 values.
pub struct RefineProblem<'a> {
    image: &'a RgbImage,
    z: &'a ScalarMap,
    mask: Mask,
    support: NormalSupport,
    /// Face pixels in row-major order; unknown `k` is pixel `pixels[k]`.
    pixels: Vec<usize>,
    unknown: Vec<Option<usize>>,
    albedo: Vec<[f64; 3]>,
    illum: Illumination,
    /// Pixels per depth unit.
    k: f64,
    config: RefineConfig,
}

impl<'a> RefineProblem<'a> {
    pub fn new(
        image: &'a RgbImage,
        z: &'a ScalarMap,
        params: &FaceParams,
        model: &MorphableModel,
        config: &RefineConfig,
    ) -> Result<Self> {
        config.validate()?;
        z.check_size(image, "image")?;
        let render = render_params(model, params, z.width, z.height, None)?;
        let mask = render.raster.mask.clone();
        if mask.count() == 0 {
            return Err(Error::FaceOffScreen);
        }
        let support = NormalSupport::new(&mask).map_err(|e| match e {
            Error::EmptyRegion(m) => Error::Singular(m),
            other => other,
        })?;
        let pixels = mask.indices();
        let mut unknown = vec![None; mask.len()];
        for (k, &p) in pixels.iter().enumerate() {
            unknown[p] = Some(k);
        }
        let albedo = render.raster.interpolate(&model.triangles, &render.albedo);
        Ok(RefineProblem {
            image,
            z,
            mask,
            support,
            pixels,
            unknown,
            albedo,
            illum: params.illum,
            k: params.pose.scale,
            config: *config,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn unknowns(&self) -> usize {
        self.pixels.len()
    }

    fn check(&self, d: &ScalarMap) -> Result<()> {
        d.check_size(&self.mask, "displacement")?;
        if d.data.iter().zip(&self.mask.data).any(|(v, &m)| !m && *v != 0.0) {
            return invalid("displacement is nonzero outside the face mask");
        }
        if d.data.iter().any(|v| !v.is_finite()) {
            return invalid("displacement is not finite");
        }
        Ok(())
    }

    fn refined(&self, d: &ScalarMap) -> ScalarMap {
        let data = self.z.data.iter().zip(&d.data).map(|(z, d)| z + d).collect();
        ScalarMap { width: d.width, height: d.height, data }
    }

    pub fn normals(&self, d: &ScalarMap) -> NormalMap {
        normals_with_support(&self.refined(d), &self.support, self.k)
    }

    /// `b_c S_c(n_p) - I_c` per face pixel (row-major) and channel.
    pub fn shading_residuals(&self, d: &ScalarMap) -> Vec<f64> {
        let normals = self.normals(d);
        let mut out = Vec::with_capacity(3 * self.pixels.len());
        for &p in &self.pixels {
            let s = self.illum.shading(&sh_basis_unit(&normals.data[p]));
            for c in 0..3 {
                out.push(self.albedo[p][c] * s[c] - self.image.data[p][c]);
            }
        }
        out
    }

    /// Sparse rows of the Jacobian of [`Self::shading_residuals`] w.r.t.
    /// the unknowns: each row depends on the displacement at the normal's
    /// source pixel and its right and lower neighbors.
    pub fn shading_jacobian(&self, d: &ScalarMap) -> Vec<[(usize, f64); 3]> {
        let zt = self.refined(d);
        let w = d.width;
        let k = self.k;
        let mut rows = Vec::with_capacity(3 * self.pixels.len());
        for &p in &self.pixels {
            let s = self.support.source[p].expect("face pixel has a normal source");
            let m = forward_normal(&zt.data, w, s, k);
            let len = m.norm();
            let n = m / len;
            let grads = sh_basis_gradient(&n);
            let dn = [Vector3::new(k, k, 0.0), Vector3::new(-k, 0.0, 0.0), Vector3::new(0.0, -k, 0.0)]
                .map(|dm| (dm - n * n.dot(&dm)) / len);
            let cols = [s, s + 1, s + w].map(|q| self.unknown[q].expect("support pixels lie on the mask"));
            for c in 0..3 {
                let g = self
                    .illum
                    .channel(c)
                    .iter()
                    .zip(&grads)
                    .fold(Vector3::zeros(), |acc, (gam, gr)| acc + gr * *gam);
                let b = self.albedo[p][c];
                rows.push([0, 1, 2].map(|j| (cols[j], b * g.dot(&dn[j]))));
            }
        }
        rows
    }

    fn data_weight(&self) -> f64 {
        self.config.intensity_scale.powi(2)
    }

    pub fn energy(&self, d: &ScalarMap) -> Result<RefineEnergy> {
        self.check(d)?;
        Ok(self.energy_unchecked(d))
    }

    fn energy_unchecked(&self, d: &ScalarMap) -> RefineEnergy {
        let e_con = self.data_weight() * self.shading_residuals(d).iter().map(|r| r * r).sum::<f64>();
        let d_sq: f64 = self.pixels.iter().map(|&p| d.data[p].powi(2)).sum();
        let lap = laplacian(d, &self.mask);
        let lap_l1: f64 = self.pixels.iter().map(|&p| lap.data[p].abs()).sum();
        RefineEnergy { e_con, d_sq, lap_l1, total: e_con + self.config.mu1 * d_sq + self.config.mu2 * lap_l1 }
    }

    fn to_map(&self, v: &[f64]) -> ScalarMap {
        let mut m = ScalarMap::filled(self.mask.width, self.mask.height, 0.0);
        for (k, &p) in self.pixels.iter().enumerate() {
            m.data[p] = v[k];
        }
        m
    }

    fn lap_vec(&self, v: &[f64], out: &mut [f64]) {
        let (w, h) = (self.mask.width, self.mask.height);
        for (k, &p) in self.pixels.iter().enumerate() {
            out[k] = neighbors4(w, h, p)
                .filter_map(|q| self.unknown[q])
                .map(|j| v[k] - v[j])
                .sum();
        }
    }

    /// IRLS from `d = 0`.
    pub fn solve(&self) -> Result<RefineResult> {
        let cfg = &self.config;
        let n = self.pixels.len();
        let mut d = ScalarMap::filled(self.mask.width, self.mask.height, 0.0);
        let mut cur = self.energy_unchecked(&d);
        let mut trace = vec![cur];
        let wc = self.data_weight();
        let mut lambda = 1e-3;
        for outer in 0..cfg.outer_iterations {
            let dv: Vec<f64> = self.pixels.iter().map(|&p| d.data[p]).collect();
            let mut ld = vec![0.0; n];
            self.lap_vec(&dv, &mut ld);
            let weights: Vec<f64> = ld.iter().map(|v| 0.5 * cfg.mu2 / v.abs().max(cfg.epsilon)).collect();
            let res = self.shading_residuals(&d);
            let jac = self.shading_jacobian(&d);

            let mut grad = vec![0.0; n];
            let mut diag = vec![cfg.mu1; n];
            for (row, r) in jac.iter().zip(&res) {
                for &(c, v) in row {
                    grad[c] += wc * v * r;
                }
            }
            for row in &jac {
                for &(c, v) in row {
                    diag[c] += wc * v * v;
                }
            }
            let wld: Vec<f64> = ld.iter().zip(&weights).map(|(l, w)| l * w).collect();
            let mut lwl = vec![0.0; n];
            self.lap_vec(&wld, &mut lwl);
            for k in 0..n {
                grad[k] += cfg.mu1 * dv[k] + lwl[k];
            }
            let (w, h) = (self.mask.width, self.mask.height);
            for (k, &p) in self.pixels.iter().enumerate() {
                // diagonal of L W L: sum over the rows of L touching k
                let deg = neighbors4(w, h, p).filter(|&q| self.mask.data[q]).count() as f64;
                let mut acc = weights[k] * deg * deg;
                for j in neighbors4(w, h, p).filter_map(|q| self.unknown[q]) {
                    acc += weights[j];
                }
                diag[k] += acc;
            }
            let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();

            let mut accepted = None;
            for _ in 0..12 {
                let apply = |v: &[f64], out: &mut [f64]| {
                    let mut jv = vec![0.0; jac.len()];
                    for (r, row) in jac.iter().enumerate() {
                        jv[r] = row.iter().map(|&(c, x)| x * v[c]).sum();
                    }
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (row, &jr) in jac.iter().zip(&jv) {
                        for &(c, x) in row {
                            out[c] += wc * x * jr;
                        }
                    }
                    let mut lv = vec![0.0; n];
                    self.lap_vec(v, &mut lv);
                    for (l, w) in lv.iter_mut().zip(&weights) {
                        *l *= w;
                    }
                    let mut llv = vec![0.0; n];
                    self.lap_vec(&lv, &mut llv);
                    for k in 0..n {
                        out[k] += cfg.mu1 * v[k] + llv[k] + lambda * diag[k] * v[k];
                    }
                };
                let damped: Vec<f64> = diag.iter().map(|x| x * (1.0 + lambda)).collect();
                let mut step = vec![0.0; n];
                pcg(apply, &damped, &rhs, &mut step, cfg.cg_tolerance, cfg.cg_max_iterations);
                let cand_v: Vec<f64> = dv.iter().zip(&step).map(|(a, b)| a + b).collect();
                let cand = self.to_map(&cand_v);
                let e = self.energy_unchecked(&cand);
                if e.total.is_finite() && e.total <= cur.total {
                    lambda = (lambda * 0.5).max(1e-9);
                    accepted = Some((cand, e));
                    break;
                }
                lambda *= 10.0;
            }
            let Some((cand, e)) = accepted else {
                log::debug!("refine: no descent step at outer iteration {outer}");
                break;
            };
            let drop = cur.total - e.total;
            d = cand;
            cur = e;
            trace.push(cur);
            if drop <= cfg.tolerance * cur.total.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let mut field = DepthField::new(self.z.clone(), self.mask.clone())?;
        field.d = d;
        Ok(RefineResult { field, trace })
    }
}

/// `E(d)` for a displacement map `d` over the mask of `params`.
pub fn refine_energy(
    image: &RgbImage,
    d: &ScalarMap,
    z: &ScalarMap,
    params: &FaceParams,
    model: &MorphableModel,
    config: &RefineConfig,
) -> Result<RefineEnergy> {
    RefineProblem::new(image, z, params, model, config)?.energy(d)
}

/// Recovers the displacement field from `d = 0`.
pub fn refine_displacement(
    image: &RgbImage,
    z: &ScalarMap,
    params: &FaceParams,
    model: &MorphableModel,
    config: &RefineConfig,
) -> Result<RefineResult> {
    RefineProblem::new(image, z, params, model, config)?.solve()
}

/// Renders `params` with per-pixel normals of the refined depth surface.
pub fn render_refined(
    model: &MorphableModel,
    params: &FaceParams,
    field: &DepthField,
    background: Option<&RgbImage>,
) -> Result<crate::raster::RenderedImage> {
    let r = render_params(model, params, field.width(), field.height(), None)?;
    let support = NormalSupport::new(&r.raster.mask)?;
    let normals = normals_with_support(&field.refined(), &support, params.pose.scale);
    crate::raster::render_face(
        &r.raster,
        &model.triangles,
        crate::raster::AlbedoSource::PerVertex(&r.albedo),
        crate::raster::NormalSource::PerPixel(&normals),
        &params.illum,
        background,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (MorphableModel, FaceParams) {
        let model = generate_synthetic_model(3, 300, 4, 3, 4).unwrap();
        let mut pose = model.default_pose(48, 48);
        pose.yaw = 0.2;
        let mut il = Illumination::dc(3.0);
        il.coeffs[3] = 0.8;
        il.coeffs[12] = 0.8;
        il.coeffs[21] = 0.8;
        il.coeffs[1] = -0.5;
        il.coeffs[10] = -0.5;
        il.coeffs[19] = -0.5;
        (model.clone(), FaceParams::neutral(&model, pose, il))
    }

    fn render_with(model: &MorphableModel, params: &FaceParams, z: &ScalarMap, d: &ScalarMap) -> RgbImage {
        let (_, raster) = coarse_depth(model, params, z.width, z.height).unwrap();
        let mut field = DepthField::new(z.clone(), raster.mask.clone()).unwrap();
        field.d = d.clone();
        render_refined(model, params, &field, None).unwrap().image
    }

    #[test]
    fn zero_displacement_energy_is_pure_data() {
        let (model, params) = scene();
        let (z, _) = coarse_depth(&model, &params, 48, 48).unwrap();
        let d = ScalarMap::filled(48, 48, 0.0);
        let img = render_with(&model, &params, &z, &d).map(|p| [p[0] + 0.01, p[1], p[2]]);
        let e = refine_energy(&img, &d, &z, &params, &model, &RefineConfig::default()).unwrap();
        assert_eq!(e.d_sq, 0.0);
        assert_eq!(e.lap_l1, 0.0);
        assert_eq!(e.total, e.e_con);
        assert!(e.e_con > 0.0);
    }

    #[test]
    fn laplacian_of_constant_vanishes_inside() {
        let mask = Mask::filled(6, 6, true);
        let v = ScalarMap::filled(6, 6, 2.5);
        assert!(laplacian(&v, &mask).data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn energy_matches_reference_sum() {
        let (model, params) = scene();
        let (z, raster) = coarse_depth(&model, &params, 48, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = ScalarMap::filled(48, 48, 0.0);
        for i in raster.mask.indices() {
            d.data[i] = rng.random_range(-0.5..0.5);
        }
        let img = render_with(&model, &params, &z, &ScalarMap::filled(48, 48, 0.0));
        let cfg = RefineConfig::default();
        let e = refine_energy(&img, &d, &z, &params, &model, &cfg).unwrap();
        // independent loop: normals from explicit cross products
        let zt: Vec<f64> = z.data.iter().zip(&d.data).map(|(a, b)| a + b).collect();
        let support = NormalSupport::new(&raster.mask).unwrap();
        let albedo = raster.interpolate(&model.triangles, &model.mean_albedo);
        let (mut con, mut sq, mut l1) = (0.0, 0.0, 0.0);
        let k = params.pose.scale;
        for p in raster.mask.indices() {
            let s = support.source[p].unwrap();
            let a = Vector3::new(0.0, 0.0, k * zt[s]);
            let b = Vector3::new(1.0, 0.0, k * zt[s + 1]);
            let c = Vector3::new(0.0, 1.0, k * zt[s + 48]);
            let mut n = (b - a).cross(&(c - a)).normalize();
            if n.z < 0.0 {
                n = -n;
            }
            let sh = params.illum.shading(&sh_basis_unit(&n));
            for ch in 0..3 {
                con += (albedo[p][ch] * sh[ch] - img.data[p][ch]).powi(2);
            }
            sq += d.data[p] * d.data[p];
            let mut lap = 0.0;
            for q in [p - 1, p + 1, p - 48, p + 48] {
                if raster.mask.data[q] {
                    lap += d.data[p] - d.data[q];
                }
            }
            l1 += lap.abs();
        }
        con *= 255.0 * 255.0;
        assert!((e.e_con - con).abs() < 1e-9 * con);
        assert!((e.d_sq - sq).abs() < 1e-12 * sq);
        assert!((e.lap_l1 - l1).abs() < 1e-12 * l1);
        assert!((e.total - (con + cfg.mu1 * sq + cfg.mu2 * l1)).abs() < 1e-9 * e.total);
    }

    #[test]
    fn rejects_displacement_off_mask() {
        let (model, params) = scene();
        let (z, _) = coarse_depth(&model, &params, 48, 48).unwrap();
        let mut d = ScalarMap::filled(48, 48, 0.0);
        d.data[0] = 1.0;
        let img = RgbImage::filled(48, 48, [0.0; 3]);
        assert!(matches!(
            refine_energy(&img, &d, &z, &params, &model, &RefineConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn shading_jacobian_matches_finite_differences() {
        let (model, params) = scene();
        let (z, raster) = coarse_depth(&model, &params, 48, 48).unwrap();
        let img = RgbImage::filled(48, 48, [0.3; 3]);
        let cfg = RefineConfig::default();
        let prob = RefineProblem::new(&img, &z, &params, &model, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = ScalarMap::filled(48, 48, 0.0);
        for i in raster.mask.indices() {
            d.data[i] = rng.random_range(-0.3..0.3);
        }
        let jac = prob.shading_jacobian(&d);
        let pixels = raster.mask.indices();
        for _ in 0..20 {
            let k = rng.random_range(0..pixels.len());
            let p = pixels[k];
            let h = 1e-6;
            let mut dp = d.clone();
            dp.data[p] += h;
            let mut dm = d.clone();
            dm.data[p] -= h;
            let rp = prob.shading_residuals(&dp);
            let rm = prob.shading_residuals(&dm);
            for (row, entries) in jac.iter().enumerate() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let an: f64 = entries.iter().filter(|e| e.0 == k).map(|e| e.1).sum();
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-4), "row {row}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn self_render_gives_near_zero_displacement() {
        let (model, params) = scene();
        let (z, _) = coarse_depth(&model, &params, 48, 48).unwrap();
        let img = render_with(&model, &params, &z, &ScalarMap::filled(48, 48, 0.0));
        let res = refine_displacement(&img, &z, &params, &model, &RefineConfig::default()).unwrap();
        let max = res.field.d.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-3, "max |d| = {max}");
    }

    #[test]
    fn dominating_mu1_suppresses_displacement() {
        let (model, params) = scene();
        let (z, raster) = coarse_depth(&model, &params, 48, 48).unwrap();
        let mut d = ScalarMap::filled(48, 48, 0.0);
        for i in raster.mask.indices() {
            let (x, _) = raster.mask.xy(i);
            d.data[i] = (x as f64 * 0.8).sin();
        }
        let img = render_with(&model, &params, &z, &d);
        let max_abs = |mu1: f64| {
            let cfg = RefineConfig { mu1, ..Default::default() };
            let res = refine_displacement(&img, &z, &params, &model, &cfg).unwrap();
            res.field.d.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let scale = RefineConfig::default().intensity_scale.powi(2);
        let sizes = [max_abs(1e-3), max_abs(1e3), max_abs(1e3 * scale)];
        assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2], "{sizes:?}");
        assert!(sizes[2] < 1e-4, "{sizes:?}");
    }

    #[test]
    fn outer_energy_never_increases() {
        let (model, params) = scene();
        let (z, raster) = coarse_depth(&model, &params, 48, 48).unwrap();
        let mut d = ScalarMap::filled(48, 48, 0.0);
        for i in raster.mask.indices() {
            let (_, y) = raster.mask.xy(i);
            d.data[i] = 1.5 * (y as f64 * 0.9).sin();
        }
        let img = render_with(&model, &params, &z, &d);
        let res = refine_displacement(&img, &z, &params, &model, &RefineConfig::default()).unwrap();
        assert!(res.trace.windows(2).all(|w| w[1].total <= w[0].total));
        assert!(res.field.d.data.iter().zip(&res.field.mask.data).all(|(v, &m)| m || *v == 0.0));
    }
}

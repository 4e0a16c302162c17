//! Labeled training data: pose and expression variants of a fitted face,
//! and simulated previous frames for tracking.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{invalid, Error, Result};
use crate::image::{masked_rmse, Mask, RgbImage};
use crate::model::{assemble_albedo, assemble_shape, FaceParams, MorphableModel};
use crate::pipeline::InverseRendering;
use crate::raster::{
    rasterize, render_face, render_pncc, triangle_normals, AlbedoSource, NormalSource, RasterMap, RenderedImage,
};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub const fn symmetric(half: f64) -> Self {
        Interval { lo: -half, hi: half }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return invalid(format!("{what} range [{}, {}] is not a finite interval", self.lo, self.hi));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling ranges for pose/expression augmentation. Angles are absolute
/// radians, expression coefficients are multiples of each mode's sigma,
/// scale multiplies the fitted scale and translation offsets are fractions
/// of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub pitch: Interval,
    pub yaw: Interval,
    pub roll: Interval,
    pub scale: Interval,
    pub translation: Interval,
    pub expression: Interval,
    pub variants: usize,
    /// Draws per variant before the variant is skipped.
    pub max_retries: usize,
    /// Smallest face region, in pixels, for a variant to count as on-screen.
    pub min_face_pixels: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            pitch: Interval::symmetric(30f64.to_radians()),
            yaw: Interval::symmetric(60f64.to_radians()),
            roll: Interval::symmetric(20f64.to_radians()),
            scale: Interval::new(0.9, 1.1),
            translation: Interval::symmetric(0.1),
            expression: Interval::symmetric(2.0),
            variants: 20,
            max_retries: 10,
            min_face_pixels: 16,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        self.pitch.validate("pitch")?;
        self.yaw.validate("yaw")?;
        self.roll.validate("roll")?;
        self.scale.validate("scale")?;
        self.translation.validate("translation")?;
        self.expression.validate("expression")?;
        if self.scale.lo <= 0.0 {
            return invalid("scale range must be positive");
        }
        if self.variants == 0 {
            return invalid("variants must be at least 1");
        }
        if self.max_retries == 0 {
            return invalid("max_retries must be at least 1");
        }
        Ok(())
    }
}

/// How the background behind a rendered face was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// The original image, not warped to the new pose.
    UnwarpedOriginal,
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: RgbImage,
    pub mask: Mask,
    pub params: FaceParams,
    /// Per-vertex albedo the image was rendered with, when it differs from
    /// the model albedo of `params`.
    pub vertex_albedo: Option<DVector<f64>>,
    pub background: RgbImage,
    pub background_mode: BackgroundMode,
    pub pncc: Option<RgbImage>,
    pub prev_params: Option<FaceParams>,
    /// Draws rejected as off-screen before this sample was accepted.
    pub retries: usize,
}

impl LabeledSample {
    /// Re-renders the stored labels and returns the RMSE to the stored image.
    pub fn rerender_rmse(&self, model: &MorphableModel) -> Result<f64> {
        let re = render_sample(model, &self.params, self.vertex_albedo.as_ref(), &self.background)?;
        let all = Mask::filled(self.image.width, self.image.height, true);
        masked_rmse(&re.image, &self.image, &all)
    }
}

/// Flat-shaded render of `params` over `background`, with `vertex_albedo`
/// replacing the model albedo when given.
pub fn render_sample(
    model: &MorphableModel,
    params: &FaceParams,
    vertex_albedo: Option<&DVector<f64>>,
    background: &RgbImage,
) -> Result<RenderedImage> {
    params.validate_for(model)?;
    let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
    let own;
    let albedo = match vertex_albedo {
        Some(a) => {
            if a.len() != 3 * model.n_vertices {
                return invalid("vertex albedo length does not match the model");
            }
            a
        }
        None => {
            own = assemble_albedo(model, &params.alpha_alb)?;
            &own
        }
    };
    let raster = rasterize(&shape, &params.pose, &model.triangles, background.width, background.height);
    let normals = triangle_normals(&shape, &params.pose.rotation(), &model.triangles);
    render_face(
        &raster,
        &model.triangles,
        AlbedoSource::PerVertex(albedo),
        NormalSource::PerTriangle(&normals),
        &params.illum,
        Some(background),
    )
}

/// Moves a per-pixel albedo image onto the mesh: each vertex takes the model
/// albedo plus the barycentric-weighted mean residual of the pixels it
/// touches. Vertices touching no pixel keep the model albedo.
pub fn vertex_albedo_from_image(
    raster: &RasterMap,
    triangles: &[[u32; 3]],
    model_albedo: &DVector<f64>,
    pixel_albedo: &RgbImage,
) -> Result<DVector<f64>> {
    raster.mask.check_size(pixel_albedo, "albedo image")?;
    let n = model_albedo.len() / 3;
    let mut sum = vec![[0.0; 3]; n];
    let mut weight = vec![0.0; n];
    let interp = raster.interpolate(triangles, model_albedo);
    for i in raster.face_pixels() {
        let tri = triangles[raster.tri_index[i] as usize];
        let w = raster.bary[i];
        for k in 0..3 {
            let v = tri[k] as usize;
            weight[v] += w[k];
            for c in 0..3 {
                sum[v][c] += w[k] * (pixel_albedo.data[i][c] - interp[i][c]);
            }
        }
    }
    let mut out = model_albedo.clone();
    for v in 0..n {
        if weight[v] > 1e-9 {
            for c in 0..3 {
                out[3 * v + c] += sum[v][c] / weight[v];
            }
        }
    }
    Ok(out)
}

/// Draws one variant's parameters from `spec` around `base`.
pub fn sample_variant<R: Rng>(
    model: &MorphableModel,
    base: &FaceParams,
    spec: &AugmentationSpec,
    width: usize,
    height: usize,
    rng: &mut R,
) -> FaceParams {
    let mut p = base.clone();
    p.pose = Pose::new(
        spec.pitch.sample(rng),
        spec.yaw.sample(rng),
        spec.roll.sample(rng),
        base.pose.scale * spec.scale.sample(rng),
        [
            base.pose.t[0] + spec.translation.sample(rng) * width as f64,
            base.pose.t[1] + spec.translation.sample(rng) * height as f64,
        ],
    );
    p.alpha_exp = model.sigma_exp.iter().map(|s| s * spec.expression.sample(rng)).collect();
    p
}

/// Per-sample generator: stream `index` of the ChaCha20 generator keyed by
/// `seed`, so samples can be drawn in any order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Pose and expression variants of a fitted face, re-rendered with its
/// blended albedo and original lighting over the original image. Variant
/// `v` uses stream `first_stream + v`; `None` marks skipped variants.
pub fn augment_sample(
    model: &MorphableModel,
    fitted: &InverseRendering,
    spec: &AugmentationSpec,
    seed: u64,
    first_stream: u64,
) -> Result<Vec<Option<LabeledSample>>> {
    spec.validate()?;
    let params = fitted.params();
    let model_albedo = assemble_albedo(model, &params.alpha_alb)?;
    let albedo = vertex_albedo_from_image(&fitted.raster, &model.triangles, &model_albedo, &fitted.blended_albedo)?;
    (0..spec.variants)
        .map(|v| augment_variant(model, params, &albedo, &fitted.image, spec, sample_rng(seed, first_stream + v as u64)))
        .collect()
}

/// One augmentation variant drawn from `rng`.
pub fn augment_variant(
    model: &MorphableModel,
    params: &FaceParams,
    vertex_albedo: &DVector<f64>,
    background: &RgbImage,
    spec: &AugmentationSpec,
    mut rng: ChaCha20Rng,
) -> Result<Option<LabeledSample>> {
    let (w, h) = (background.width, background.height);
    for attempt in 0..spec.max_retries {
        let p = sample_variant(model, params, spec, w, h, &mut rng);
        let r = render_sample(model, &p, Some(vertex_albedo), background)?;
        if r.mask.count() < spec.min_face_pixels {
            continue;
        }
        return Ok(Some(LabeledSample {
            image: r.image,
            mask: r.mask,
            params: p,
            vertex_albedo: Some(vertex_albedo.clone()),
            background: background.clone(),
            background_mode: BackgroundMode::UnwarpedOriginal,
            pncc: None,
            prev_params: None,
            retries: attempt,
        }));
    }
    log::warn!("augmentation variant skipped after {} off-screen draws", spec.max_retries);
    Ok(None)
}

/// Normal distribution of one pose component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Gaussian { mean, sd }
    }
}

/// Distribution of the frame-to-frame pose change `chi^{k-1} - chi^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoseDistribution {
    pub pitch: Gaussian,
    pub yaw: Gaussian,
    pub roll: Gaussian,
    pub tx: Gaussian,
    pub ty: Gaussian,
    pub scale: Gaussian,
    /// True for the built-in placeholder values.
    #[serde(default)]
    pub placeholder: bool,
}

impl Default for DeltaPoseDistribution {
    fn default() -> Self {
        DeltaPoseDistribution {
            pitch: Gaussian::new(0.0, 0.02),
            yaw: Gaussian::new(0.0, 0.03),
            roll: Gaussian::new(0.0, 0.015),
            tx: Gaussian::new(0.0, 2.0),
            ty: Gaussian::new(0.0, 2.0),
            scale: Gaussian::new(0.0, 0.005),
            placeholder: true,
        }
    }
}

impl DeltaPoseDistribution {
    pub fn zero() -> Self {
        let z = Gaussian::new(0.0, 0.0);
        DeltaPoseDistribution { pitch: z, yaw: z, roll: z, tx: z, ty: z, scale: z, placeholder: false }
    }

    /// Components in (pitch, yaw, roll, tx, ty, scale) order.
    pub fn components(&self) -> [Gaussian; 6] {
        [self.pitch, self.yaw, self.roll, self.tx, self.ty, self.scale]
    }

    pub fn from_components(c: [Gaussian; 6]) -> Self {
        DeltaPoseDistribution {
            pitch: c[0],
            yaw: c[1],
            roll: c[2],
            tx: c[3],
            ty: c[4],
            scale: c[5],
            placeholder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in self.components() {
            if !g.mean.is_finite() || !g.sd.is_finite() || g.sd < 0.0 {
                return invalid("delta-pose distribution needs finite means and non-negative sds");
            }
        }
        Ok(())
    }
}

/// Pose in (pitch, yaw, roll, tx, ty, scale) order.
pub fn pose_components(p: &Pose) -> [f64; 6] {
    [p.pitch, p.yaw, p.roll, p.t[0], p.t[1], p.scale]
}

fn pose_from_components(c: [f64; 6]) -> Pose {
    Pose::new(c[0], c[1], c[2], c[5], [c[3], c[4]])
}

/// Mean and unbiased sd of consecutive differences `pose[k-1] - pose[k]`.
pub fn fit_delta_distribution(poses: &[Pose]) -> Result<DeltaPoseDistribution> {
    if poses.len() < 2 {
        return invalid("fit_delta_distribution needs at least 2 frames");
    }
    let deltas: Vec<[f64; 6]> = poses
        .windows(2)
        .map(|w| {
            let (a, b) = (pose_components(&w[0]), pose_components(&w[1]));
            std::array::from_fn(|j| a[j] - b[j])
        })
        .collect();
    let n = deltas.len() as f64;
    let comps = std::array::from_fn(|j| {
        let mean = deltas.iter().map(|d| d[j]).sum::<f64>() / n;
        let sd = if deltas.len() > 1 {
            (deltas.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Gaussian::new(mean, sd)
    });
    Ok(DeltaPoseDistribution::from_components(comps))
}

/// Simulated previous frame: the current pose plus a Gaussian draw per
/// component, and the PNCC of the mean face at that pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedFrame {
    pub pose: Pose,
    pub pncc: RenderedImage,
}

/// Draws `pose + delta` from `rng`. Draws giving a non-positive scale are
/// repeated; after 32 tries the current scale is kept.
pub fn draw_prev_pose<R: Rng>(current: &Pose, dist: &DeltaPoseDistribution, rng: &mut R) -> Result<Pose> {
    dist.validate()?;
    let cur = pose_components(current);
    let draw = |g: Gaussian, rng: &mut R| -> Result<f64> {
        if g.sd == 0.0 {
            return Ok(g.mean);
        }
        let n = Normal::new(g.mean, g.sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(n.sample(rng))
    };
    let comps = dist.components();
    let mut out = [0.0; 6];
    for j in 0..5 {
        out[j] = cur[j] + draw(comps[j], rng)?;
    }
    out[5] = cur[5];
    for _ in 0..32 {
        let s = cur[5] + draw(comps[5], rng)?;
        if s > 0.0 {
            out[5] = s;
            break;
        }
    }
    Ok(pose_from_components(out))
}

pub fn simulate_prev_frame(
    model: &MorphableModel,
    current: &Pose,
    dist: &DeltaPoseDistribution,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<SimulatedFrame> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pose = draw_prev_pose(current, dist, &mut rng)?;
    let pncc = render_pncc(model, &pose, width, height);
    Ok(SimulatedFrame { pose, pncc })
}

/// A tracking training pair: `params` rendered over `background`, plus
/// the simulated previous pose and its PNCC.
pub fn simulate_pair(
    model: &MorphableModel,
    params: &FaceParams,
    background: &RgbImage,
    dist: &DeltaPoseDistribution,
    rng: &mut ChaCha20Rng,
) -> Result<LabeledSample> {
    let r = render_sample(model, params, None, background)?;
    let pose = draw_prev_pose(&params.pose, dist, rng)?;
    let pncc = render_pncc(model, &pose, background.width, background.height);
    let mut prev = params.clone();
    prev.pose = pose;
    Ok(LabeledSample {
        image: r.image,
        mask: r.mask,
        params: params.clone(),
        vertex_albedo: None,
        background: background.clone(),
        background_mode: BackgroundMode::Flat,
        pncc: Some(pncc.image),
        prev_params: Some(prev),
        retries: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lighting::Illumination;
    use crate::raster::render_params;
    use crate::synthetic::{generate_synthetic_model, random_scene, SceneRanges};

    fn model() -> MorphableModel {
        generate_synthetic_model(2, 300, 5, 4, 5).unwrap()
    }

    #[test]
    fn zero_width_ranges_reproduce_the_original() {
        let m = model();
        let pose = Pose::new(0.1, -0.2, 0.05, m.default_pose(48, 48).scale, m.default_pose(48, 48).t);
        let p = FaceParams::neutral(&m, pose, Illumination::dc(3.0));
        let spec = AugmentationSpec {
            pitch: Interval::point(0.1),
            yaw: Interval::point(-0.2),
            roll: Interval::point(0.05),
            scale: Interval::point(1.0),
            translation: Interval::point(0.0),
            expression: Interval::point(0.0),
            variants: 1,
            ..Default::default()
        };
        let bg = RgbImage::filled(48, 48, [0.2; 3]);
        let albedo = assemble_albedo(&m, &p.alpha_alb).unwrap();
        let s = augment_variant(&m, &p, &albedo, &bg, &spec, sample_rng(1, 0)).unwrap().unwrap();
        let direct = render_params(&m, &p, 48, 48, Some(&bg)).unwrap();
        assert_eq!(s.params, p);
        assert_eq!(s.image, direct.rendered.image);
    }

    #[test]
    fn variants_stay_in_range_and_rerender() {
        let m = model();
        let p = FaceParams::neutral(&m, m.default_pose(48, 48), Illumination::dc(3.0));
        let spec = AugmentationSpec::default();
        let bg = RgbImage::filled(48, 48, [0.1, 0.2, 0.3]);
        let albedo = assemble_albedo(&m, &p.alpha_alb).unwrap().map(|v| v * 0.9);
        for v in 0..20 {
            let s = augment_variant(&m, &p, &albedo, &bg, &spec, sample_rng(9, v)).unwrap().unwrap();
            for (a, sd) in s.params.alpha_exp.iter().zip(m.sigma_exp.iter()) {
                assert!(spec.expression.contains(a / sd));
            }
            assert!(spec.yaw.contains(s.params.pose.yaw));
            assert!(s.rerender_rmse(&m).unwrap() < 1e-12);
        }
    }

    #[test]
    fn off_screen_variants_are_skipped() {
        let m = model();
        let p = FaceParams::neutral(&m, m.default_pose(32, 32), Illumination::dc(3.0));
        let spec = AugmentationSpec { translation: Interval::point(5.0), max_retries: 3, ..Default::default() };
        let albedo = assemble_albedo(&m, &p.alpha_alb).unwrap();
        let bg = RgbImage::filled(32, 32, [0.0; 3]);
        assert!(augment_variant(&m, &p, &albedo, &bg, &spec, sample_rng(0, 0)).unwrap().is_none());
    }

    #[test]
    fn streams_are_order_independent() {
        let a: Vec<u64> = (0..4).map(|i| sample_rng(5, i).random()).collect();
        let b: Vec<u64> = (0..4).rev().map(|i| sample_rng(5, i).random()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn vertex_albedo_round_trips_model_albedo() {
        let m = model();
        let p = FaceParams::neutral(&m, m.default_pose(48, 48), Illumination::dc(3.0));
        let r = render_params(&m, &p, 48, 48, None).unwrap();
        let pix = RgbImage::from_vec(48, 48, r.raster.interpolate(&m.triangles, &r.albedo)).unwrap();
        let v = vertex_albedo_from_image(&r.raster, &m.triangles, &r.albedo, &pix).unwrap();
        assert!((v - &r.albedo).amax() < 1e-12);
    }

    fn pose(c: [f64; 6]) -> Pose {
        pose_from_components(c)
    }

    #[test]
    fn constant_sequence_has_zero_delta() {
        let seq = vec![pose([0.1, 0.2, 0.3, 4.0, 5.0, 0.5]); 5];
        let d = fit_delta_distribution(&seq).unwrap();
        assert!(d.components().iter().all(|g| g.mean == 0.0 && g.sd == 0.0));
    }

    #[test]
    fn arithmetic_yaw_sequence() {
        let c = 0.01;
        let seq: Vec<Pose> = (0..10).map(|k| pose([0.0, k as f64 * c, 0.0, 0.0, 0.0, 1.0])).collect();
        let d = fit_delta_distribution(&seq).unwrap();
        assert!((d.yaw.mean + c).abs() < 1e-15);
        assert!(d.yaw.sd < 1e-15);
    }

    #[test]
    fn random_walk_matches_two_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut cur = [0.0, 0.0, 0.0, 32.0, 32.0, 1.0];
        let mut seq = vec![pose(cur)];
        for _ in 0..200 {
            for v in cur.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            seq.push(pose(cur));
        }
        let d = fit_delta_distribution(&seq).unwrap();
        let comps = d.components();
        for j in 0..6 {
            let diffs: Vec<f64> =
                seq.windows(2).map(|w| pose_components(&w[0])[j] - pose_components(&w[1])[j]).collect();
            let mut mean = 0.0;
            for x in &diffs {
                mean += x;
            }
            mean /= diffs.len() as f64;
            let mut var = 0.0;
            for x in &diffs {
                var += (x - mean) * (x - mean);
            }
            let sd = (var / (diffs.len() - 1) as f64).sqrt();
            assert!((comps[j].mean - mean).abs() < 1e-12);
            assert!((comps[j].sd - sd).abs() < 1e-12);
        }
        assert!(fit_delta_distribution(&seq[..1]).is_err());
    }

    #[test]
    fn zero_distribution_keeps_the_pose() {
        let m = model();
        let cur = m.default_pose(40, 40);
        let f = simulate_prev_frame(&m, &cur, &DeltaPoseDistribution::zero(), 11, 40, 40).unwrap();
        assert_eq!(f.pose, cur);
        assert_eq!(f.pncc, render_pncc(&m, &cur, 40, 40));
    }

    #[test]
    fn simulation_is_deterministic() {
        let m = model();
        let cur = m.default_pose(40, 40);
        let d = DeltaPoseDistribution::default();
        let a = simulate_prev_frame(&m, &cur, &d, 5, 40, 40).unwrap();
        let b = simulate_prev_frame(&m, &cur, &d, 5, 40, 40).unwrap();
        assert_eq!(a, b);
        assert!(a.pncc.image.data.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn simulated_pair_rerenders() {
        let m = model();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let p = random_scene(&m, &mut rng, 48, 48, &SceneRanges::default());
        let bg = RgbImage::filled(48, 48, [0.5; 3]);
        let s = simulate_pair(&m, &p, &bg, &DeltaPoseDistribution::default(), &mut rng).unwrap();
        assert!(s.rerender_rmse(&m).unwrap() < 1e-12);
        assert_ne!(s.prev_params.unwrap().pose, p.pose);
    }
}

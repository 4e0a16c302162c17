//! Deterministic synthetic morphable models and scenes, standing in for
//! real scanned face models in tests and demos.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::Pose;
use crate::error::{invalid, Result};
use crate::image::{Mask, ScalarMap};
use crate::lighting::{Illumination, SH_COEFFS};
use crate::model::{FaceParams, LandmarkLayout, MorphableModel};

const FACE_WIDTH: f64 = 140.0;
const FACE_HEIGHT: f64 = 180.0;
const FACE_DEPTH: f64 = 60.0;
/// Cosine modes per axis used to build smooth basis fields.
const MODES: usize = 4;

struct Grid {
    cols: usize,
    n: usize,
}

impl Grid {
    fn rows(&self) -> usize {
        self.n.div_ceil(self.cols)
    }

    fn index(&self, r: usize, c: usize) -> Option<usize> {
        let i = r * self.cols + c;
        (c < self.cols && i < self.n).then_some(i)
    }

    /// Normalized (u, v) in [0, 1] of vertex `i`.
    fn uv(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.cols, i % self.cols);
        let u = c as f64 / (self.cols - 1) as f64;
        let v = r as f64 / (self.rows() - 1) as f64;
        (u, v)
    }
}

/// Builds a deterministic face-like model: a convex ellipsoidal height-field
/// patch (y pointing down the face, z toward the viewer) with smooth
/// orthonormal bases.
pub fn generate_synthetic_model(
    seed: u64,
    n_vertices: usize,
    k_id: usize,
    k_exp: usize,
    k_alb: usize,
) -> Result<MorphableModel> {
    if n_vertices < 4 {
        return invalid("synthetic model needs at least 4 vertices");
    }
    let m = 3 * n_vertices;
    for (name, k) in [("K_id", k_id), ("K_exp", k_exp), ("K_alb", k_alb)] {
        if k == 0 {
            return invalid(format!("{name} must be at least 1"));
        }
        if k > m {
            return invalid(format!("{name} = {k} exceeds 3n = {m}"));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let grid = Grid { cols: (n_vertices as f64).sqrt().ceil() as usize, n: n_vertices };

    let mut mean_shape = DVector::zeros(m);
    let (ax, ay) = (0.5 * FACE_WIDTH * 1.35, 0.5 * FACE_HEIGHT * 1.35);
    for i in 0..n_vertices {
        let (u, v) = grid.uv(i);
        let x = (u - 0.5) * FACE_WIDTH;
        let y = (v - 0.5) * FACE_HEIGHT;
        let h = 1.0 - (x / ax).powi(2) - (y / ay).powi(2);
        mean_shape[3 * i] = x;
        mean_shape[3 * i + 1] = y;
        mean_shape[3 * i + 2] = FACE_DEPTH * h.max(0.0).sqrt();
    }

    let mut triangles = Vec::new();
    for r in 0..grid.rows().saturating_sub(1) {
        for c in 0..grid.cols - 1 {
            let quad = (
                grid.index(r, c),
                grid.index(r, c + 1),
                grid.index(r + 1, c),
                grid.index(r + 1, c + 1),
            );
            if let (Some(a), Some(b), Some(d), Some(e)) = quad {
                // Counter-clockwise in the y-down image plane: normals face +z.
                triangles.push([a as u32, b as u32, d as u32]);
                triangles.push([b as u32, e as u32, d as u32]);
            }
        }
    }

    let uvs: Vec<(f64, f64)> = (0..n_vertices).map(|i| grid.uv(i)).collect();
    let root = (m as f64).sqrt();
    let id_basis = smooth_orthonormal_basis(&mut rng, &uvs, k_id, [1.0, 1.0, 1.5]);
    let exp_basis = smooth_orthonormal_basis(&mut rng, &uvs, k_exp, [1.0, 1.0, 1.0]);
    let alb_basis = smooth_orthonormal_basis(&mut rng, &uvs, k_alb, [1.0, 1.0, 1.0]);
    let sigma_id = decaying_sigmas(&mut rng, k_id, 2.5 * root);
    let sigma_exp = decaying_sigmas(&mut rng, k_exp, 2.0 * root);
    let sigma_alb = decaying_sigmas(&mut rng, k_alb, 0.04 * root);

    let tint = [0.72, 0.55, 0.45];
    let mut mean_albedo = DVector::zeros(m);
    let phase: f64 = rng.random_range(0.0..PI);
    for (i, &(u, v)) in uvs.iter().enumerate() {
        let wobble = 0.04 * (2.0 * PI * u + phase).sin() * (PI * v).cos();
        for c in 0..3 {
            mean_albedo[3 * i + c] = tint[c] + wobble;
        }
    }

    let used: Vec<bool> = {
        let mut used = vec![false; n_vertices];
        triangles.iter().flatten().for_each(|&v| used[v as usize] = true);
        used
    };
    let pick = |fu: f64, fv: f64| -> usize {
        // nearest used vertex to the normalized position
        let mut best = (f64::INFINITY, 0);
        for (i, &(u, v)) in uvs.iter().enumerate() {
            if used[i] {
                let d = (u - fu).powi(2) + (v - fv).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
        }
        best.1
    };
    let brows: Vec<usize> =
        [0.15, 0.28, 0.40, 0.60, 0.72, 0.85].iter().map(|&u| pick(u, 0.28)).collect();
    let eye_corners: Vec<usize> = [0.12, 0.40, 0.60, 0.88].iter().map(|&u| pick(u, 0.40)).collect();
    let mut landmarks: Vec<usize> = brows.iter().chain(&eye_corners).copied().collect();
    let extra = [
        (0.5, 0.55),
        (0.5, 0.65),
        (0.4, 0.65),
        (0.6, 0.65),
        (0.35, 0.8),
        (0.5, 0.8),
        (0.65, 0.8),
        (0.5, 0.75),
        (0.5, 0.85),
    ];
    landmarks.extend(extra.iter().map(|&(u, v)| pick(u, v)));
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        landmarks.extend([pick(f, 0.0), pick(f, 1.0), pick(0.0, f), pick(1.0, f)]);
    }
    let mut seen = vec![false; n_vertices];
    landmarks.retain(|&v| !std::mem::replace(&mut seen[v], true));
    let mut layout = LandmarkLayout { brows, eye_corners };
    layout.brows.dedup();
    if layout.eye_corners.windows(2).any(|w| w[0] == w[1]) {
        // too coarse a grid to place distinct eye corners
        layout.eye_corners.clear();
    }

    let model = MorphableModel {
        n_vertices,
        mean_shape,
        id_basis,
        exp_basis,
        mean_albedo,
        alb_basis,
        sigma_id,
        sigma_exp,
        sigma_alb,
        triangles,
        landmark_indices: landmarks,
        landmark_layout: layout,
    };
    model.validate()?;
    Ok(model)
}

fn decaying_sigmas(rng: &mut ChaCha20Rng, k: usize, first: f64) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|i| first * 0.85f64.powi(i as i32) * rng.random_range(0.8..1.2)))
}

/// Random smooth fields over the (u, v) patch, orthonormalized with QR.
fn smooth_orthonormal_basis(
    rng: &mut ChaCha20Rng,
    uvs: &[(f64, f64)],
    k: usize,
    axis_gain: [f64; 3],
) -> DMatrix<f64> {
    let m = 3 * uvs.len();
    let mut raw = DMatrix::zeros(m, k);
    for col in 0..k {
        let mut coeffs = [[[0.0; MODES]; MODES]; 3];
        for (axis, plane) in coeffs.iter_mut().enumerate() {
            for (a, row) in plane.iter_mut().enumerate() {
                for (b, c) in row.iter_mut().enumerate() {
                    let g: f64 = StandardNormal.sample(rng);
                    *c = g * axis_gain[axis] * 0.5f64.powi((a + b) as i32);
                }
            }
        }
        for (i, &(u, v)) in uvs.iter().enumerate() {
            for axis in 0..3 {
                let mut acc = 0.0;
                for a in 0..MODES {
                    for b in 0..MODES {
                        acc += coeffs[axis][a][b] * (PI * a as f64 * u).cos() * (PI * b as f64 * v).cos();
                    }
                }
                let jitter: f64 = StandardNormal.sample(rng);
                raw[(3 * i + axis, col)] = acc + 1e-3 * jitter;
            }
        }
    }
    let q = raw.qr().q();
    q.columns(0, k).into_owned()
}

/// Sampling ranges for [`random_scene`].
#[derive(Debug, Clone, Copy)]
pub struct SceneRanges {
    /// Coefficient magnitude bound in units of sigma.
    pub coeff_sigmas: f64,
    pub max_pitch: f64,
    pub max_yaw: f64,
    pub max_roll: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        SceneRanges {
            coeff_sigmas: 2.0,
            max_pitch: 30f64.to_radians(),
            max_yaw: 60f64.to_radians(),
            max_roll: 20f64.to_radians(),
        }
    }
}

/// Random plausible lighting: a DC term, a dominant frontal-ish direction
/// and weak second-order terms.
pub fn random_illumination<R: Rng>(rng: &mut R) -> Illumination {
    let mut il = Illumination::zeros();
    let dir = Vector3::new(
        rng.random_range(-0.7..0.7),
        rng.random_range(-0.7..0.3),
        rng.random_range(0.3..1.0),
    )
    .normalize();
    let strength = rng.random_range(0.6..1.1);
    let dc = rng.random_range(2.7..3.3);
    for c in 0..3 {
        let gain = rng.random_range(0.9..1.1);
        let ch = &mut il.coeffs[c * SH_COEFFS..(c + 1) * SH_COEFFS];
        ch[0] = dc * gain;
        ch[1] = strength * gain * dir.y;
        ch[2] = strength * gain * dir.z;
        ch[3] = strength * gain * dir.x;
        for v in ch.iter_mut().skip(4) {
            *v = rng.random_range(-0.12..0.12);
        }
    }
    il
}

/// Random face parameters: coefficients uniform within `coeff_sigmas`, a
/// pose within the angle bounds around the model's framing pose.
pub fn random_scene<R: Rng>(
    model: &MorphableModel,
    rng: &mut R,
    width: usize,
    height: usize,
    ranges: &SceneRanges,
) -> FaceParams {
    let mut draw = |sigma: &DVector<f64>| -> Vec<f64> {
        sigma
            .iter()
            .map(|s| s * rng.random_range(-ranges.coeff_sigmas..=ranges.coeff_sigmas))
            .collect()
    };
    let alpha_id = draw(&model.sigma_id);
    let alpha_exp = draw(&model.sigma_exp);
    let alpha_alb = draw(&model.sigma_alb);
    let base = model.default_pose(width, height);
    let scale = base.scale * rng.random_range(0.9..1.05);
    let pose = Pose::new(
        rng.random_range(-ranges.max_pitch..=ranges.max_pitch),
        rng.random_range(-ranges.max_yaw..=ranges.max_yaw),
        rng.random_range(-ranges.max_roll..=ranges.max_roll),
        scale,
        [
            width as f64 * 0.5 + rng.random_range(-0.05..0.05) * width as f64,
            height as f64 * 0.5 + rng.random_range(-0.05..0.05) * height as f64,
        ],
    );
    let mut p = FaceParams { alpha_id, alpha_exp, alpha_alb, pose, illum: random_illumination(rng) };
    // Center the assembled face rather than the mean face.
    if let Ok(shape) = crate::model::assemble_shape(model, &p.alpha_id, &p.alpha_exp) {
        let r = p.pose.rotation();
        let (mut cx, mut cy) = (0.0, 0.0);
        for v in shape.as_slice().chunks_exact(3) {
            let c = r * Vector3::new(v[0], v[1], v[2]);
            cx += c.x;
            cy += c.y;
        }
        let n = model.n_vertices as f64;
        let jitter = [p.pose.t[0] - width as f64 * 0.5, p.pose.t[1] - height as f64 * 0.5];
        p.pose.t = [
            width as f64 * 0.5 - scale * cx / n + jitter[0],
            height as f64 * 0.5 - scale * cy / n + jitter[1],
        ];
    }
    p
}

/// A horizontal sinusoidal ridge pattern on the upper part of a face mask.
#[derive(Debug, Clone)]
pub struct WrinkleBand {
    pub displacement: ScalarMap,
    /// Pixels carrying the pattern.
    pub band: Vec<usize>,
}

/// Ridges of `amplitude` (model units) and `period` (pixels) over a band
/// starting 12% down the face and covering a quarter of its height, kept
/// 3 px inside the row extent of `mask`.
pub fn wrinkle_band(mask: &Mask, amplitude: f64, period: f64) -> WrinkleBand {
    let (w, h) = (mask.width, mask.height);
    let mut displacement = ScalarMap::filled(w, h, 0.0);
    let mut band = Vec::new();
    let idx = mask.indices();
    if idx.is_empty() {
        return WrinkleBand { displacement, band };
    }
    let ymin = idx.iter().map(|&i| i / w).min().unwrap_or(0);
    let ymax = idx.iter().map(|&i| i / w).max().unwrap_or(0);
    let y0 = ymin as f64 + 0.12 * (ymax - ymin) as f64;
    let height = 0.25 * (ymax - ymin) as f64;
    let mut extent = vec![(usize::MAX, 0usize); h];
    for &i in &idx {
        let (x, y) = (i % w, i / w);
        extent[y] = (extent[y].0.min(x), extent[y].1.max(x));
    }
    for &i in &idx {
        let (x, y) = (i % w, i / w);
        let fy = y as f64 - y0;
        let (xl, xr) = extent[y];
        if (0.0..=height).contains(&fy) && x > xl + 3 && x + 3 < xr {
            displacement.data[i] = amplitude * (2.0 * PI * fy / period).sin();
            band.push(i);
        }
    }
    WrinkleBand { displacement, band }
}

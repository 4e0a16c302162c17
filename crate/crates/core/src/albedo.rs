//! Stage 3: fine per-pixel albedo by inverting the shading, blended with
//! the coarse model albedo using region-dependent weights.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fitting::LandmarkSet;
use crate::image::{Mask, NormalMap, RgbImage, ScalarMap};
use crate::lighting::{sh_basis_unit, Illumination};
use crate::model::{LandmarkLayout, MorphableModel};
use crate::raster::RasterMap;

/// Shading denominators smaller than this in magnitude are clamped.
pub const MIN_SHADING: f64 = 1e-4;
pub const BETA_DETAIL: f64 = 0.65;
pub const BETA_BASE: f64 = 0.35;
pub const DEFAULT_TRANSITION_WIDTH: f64 = 8.0;
/// Forehead band height as a fraction of the inter-ocular distance.
pub const FOREHEAD_HEIGHT: f64 = 0.35;
/// Eye-corner disk radius as a fraction of the inter-ocular distance.
pub const EYE_CORNER_RADIUS: f64 = 0.12;

#[derive(Debug, Clone, PartialEq)]
pub struct FineAlbedo {
    pub albedo: RgbImage,
    /// Pixels where some channel's shading was clamped.
    pub low_confidence: Mask,
    pub mask: Mask,
}

/// `b_f = I / (r^T phi(n))` per channel on `mask`.
pub fn fine_albedo(image: &RgbImage, normals: &NormalMap, illum: &Illumination, mask: &Mask) -> Result<FineAlbedo> {
    image.check_size(normals, "normals")?;
    image.check_size(mask, "mask")?;
    let mut albedo = RgbImage::filled(image.width, image.height, [0.0; 3]);
    let mut low = Mask::filled(image.width, image.height, false);
    for i in mask.indices() {
        let s = illum.shading(&sh_basis_unit(&normals.data[i]));
        for c in 0..3 {
            let mut den = s[c];
            if den.abs() < MIN_SHADING {
                den = if den < 0.0 { -MIN_SHADING } else { MIN_SHADING };
                low.data[i] = true;
            }
            albedo.data[i][c] = image.data[i][c] / den;
        }
    }
    Ok(FineAlbedo { albedo, low_confidence: low, mask: mask.clone() })
}

/// Per-vertex albedo interpolated onto the face pixels.
pub fn coarse_albedo(raster: &RasterMap, model: &MorphableModel, vertex_albedo: &nalgebra::DVector<f64>) -> RgbImage {
    let data = raster.interpolate(&model.triangles, vertex_albedo);
    RgbImage { width: raster.width, height: raster.height, data }
}

/// Per-pixel blend weight on the coarse albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeightMap {
    pub beta: ScalarMap,
    pub mask: Mask,
    /// Pixels inside a detail region.
    pub detail: Mask,
    pub transition_width: f64,
    /// Set when no landmarks were available and the map is uniform.
    pub missing_landmarks: bool,
}

impl BlendWeightMap {
    pub fn uniform(mask: &Mask, beta: f64) -> Self {
        BlendWeightMap {
            beta: ScalarMap::filled(mask.width, mask.height, beta),
            mask: mask.clone(),
            detail: Mask::filled(mask.width, mask.height, false),
            transition_width: 0.0,
            missing_landmarks: false,
        }
    }
}

/// `beta b_c + (1 - beta) b_f` on the mask; low-confidence pixels keep `b_c`.
pub fn blend_albedo(coarse: &RgbImage, fine: &FineAlbedo, beta: &BlendWeightMap) -> Result<RgbImage> {
    coarse.check_size(&fine.albedo, "fine albedo")?;
    if fine.mask != beta.mask {
        return invalid("blend weight mask does not match the albedo mask");
    }
    let mut out = RgbImage::filled(coarse.width, coarse.height, [0.0; 3]);
    for i in fine.mask.indices() {
        let b = if fine.low_confidence.data[i] { 1.0 } else { beta.beta.data[i] };
        for c in 0..3 {
            out.data[i][c] = b * coarse.data[i][c] + (1.0 - b) * fine.albedo.data[i][c];
        }
    }
    Ok(out)
}

/// Image positions of the landmarks that define the detail regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailLandmarks {
    pub brows: Vec<[f64; 2]>,
    /// `[left outer, left inner, right inner, right outer]`.
    pub eye_corners: [[f64; 2]; 4],
}

impl DetailLandmarks {
    /// Picks the layout's landmarks out of a landmark set; `None` when any
    /// is missing.
    pub fn from_layout(layout: &LandmarkLayout, landmarks: &LandmarkSet) -> Option<Self> {
        if layout.brows.is_empty() || layout.eye_corners.len() != 4 {
            return None;
        }
        let brows = layout
            .brows
            .iter()
            .map(|&v| landmarks.point_of(v).map(|p| [p.x, p.y]))
            .collect::<Option<Vec<_>>>()?;
        let mut eye_corners = [[0.0; 2]; 4];
        for (k, &v) in layout.eye_corners.iter().enumerate() {
            let p = landmarks.point_of(v)?;
            eye_corners[k] = [p.x, p.y];
        }
        Some(DetailLandmarks { brows, eye_corners })
    }

    /// Distance between the two eye centers.
    pub fn inter_ocular(&self) -> f64 {
        let e = self.eye_corners.map(|p| Vector2::new(p[0], p[1]));
        ((e[0] + e[1]) * 0.5 - (e[2] + e[3]) * 0.5).norm()
    }

    /// Forehead polygon: the brow polyline and its copy raised by
    /// `FOREHEAD_HEIGHT` inter-ocular distances.
    pub fn forehead_polygon(&self) -> Vec<Vector2<f64>> {
        let lift = FOREHEAD_HEIGHT * self.inter_ocular();
        let mut brows: Vec<Vector2<f64>> = self.brows.iter().map(|p| Vector2::new(p[0], p[1])).collect();
        brows.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mut poly = brows.clone();
        poly.extend(brows.iter().rev().map(|p| Vector2::new(p.x, p.y - lift)));
        poly
    }
}

fn point_in_polygon(p: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Distance from `p` to the union of detail regions (0 inside).
fn region_distance(p: &Vector2<f64>, forehead: &[Vector2<f64>], disks: &[(Vector2<f64>, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    if forehead.len() >= 3 {
        if point_in_polygon(p, forehead) {
            return 0.0;
        }
        for i in 0..forehead.len() {
            best = best.min(segment_distance(p, &forehead[i], &forehead[(i + 1) % forehead.len()]));
        }
    }
    for (c, r) in disks {
        best = best.min(((p - c).norm() - r).max(0.0));
    }
    best
}

/// Blend weights: `BETA_DETAIL` inside the forehead band and eye-corner
/// disks, falling linearly to `BETA_BASE` over `transition_width` pixels.
/// Without landmarks the map is uniformly `BETA_BASE` and flagged.
pub fn build_beta_map(landmarks: Option<&DetailLandmarks>, mask: &Mask, transition_width: f64) -> Result<BlendWeightMap> {
    if !(transition_width > 0.0) {
        return invalid("transition width must be positive");
    }
    let mut map = BlendWeightMap::uniform(mask, BETA_BASE);
    map.transition_width = transition_width;
    let Some(lm) = landmarks else {
        log::warn!("no detail landmarks; using a uniform blend weight");
        map.missing_landmarks = true;
        return Ok(map);
    };
    let iod = lm.inter_ocular();
    let forehead = lm.forehead_polygon();
    let disks: Vec<(Vector2<f64>, f64)> =
        lm.eye_corners.iter().map(|p| (Vector2::new(p[0], p[1]), EYE_CORNER_RADIUS * iod)).collect();
    for i in mask.indices() {
        let (x, y) = mask.xy(i);
        let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let dist = region_distance(&p, &forehead, &disks);
        map.detail.data[i] = dist == 0.0;
        map.beta.data[i] = beta_at_distance(dist, transition_width);
    }
    Ok(map)
}

/// Weight at distance `dist` from a detail region.
pub fn beta_at_distance(dist: f64, transition_width: f64) -> f64 {
    BETA_DETAIL - (BETA_DETAIL - BETA_BASE) * (dist / transition_width).min(1.0)
}

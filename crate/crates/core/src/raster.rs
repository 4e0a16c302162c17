//! Software rasterization of the face mesh into per-pixel correspondence
//! maps, shaded images, PNCC codes and depth-derived normals.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};

use crate::camera::{project_with, Pose};
use crate::error::{invalid, Error, Result};
use crate::image::{Mask, NormalMap, RgbImage, ScalarMap};
use crate::lighting::{sh_basis_unit, Illumination};
use crate::model::{assemble_albedo, assemble_shape, bbox, vertex, FaceParams, MorphableModel};

pub const SENTINEL_EMPTY: u32 = u32::MAX;

/// Per-pixel triangle id, barycentric weights and camera depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    pub width: usize,
    pub height: usize,
    pub tri_index: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

impl RasterMap {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RasterMap {
            width,
            height,
            tri_index: vec![SENTINEL_EMPTY; n],
            bary: vec![[0.0; 3]; n],
            depth: vec![f64::NEG_INFINITY; n],
            mask: Mask::filled(width, height, false),
        }
    }

    pub fn face_pixels(&self) -> Vec<usize> {
        self.mask.indices()
    }

    pub fn face_count(&self) -> usize {
        self.mask.count()
    }

    /// Depth map with zeros off the face.
    pub fn depth_map(&self) -> ScalarMap {
        let data = self
            .depth
            .iter()
            .zip(&self.mask.data)
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        ScalarMap { width: self.width, height: self.height, data }
    }

    /// Barycentric interpolation of a per-vertex xyz/rgb attribute.
    pub fn interpolate(&self, triangles: &[[u32; 3]], attr: &DVector<f64>) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.width * self.height];
        for i in self.face_pixels() {
            let tri = triangles[self.tri_index[i] as usize];
            let w = self.bary[i];
            for c in 0..3 {
                out[i][c] = (0..3).map(|k| w[k] * attr[3 * tri[k] as usize + c]).sum();
            }
        }
        out
    }
}

/// Edge function `(v - u) x (p - u)`; positive on the interior side of a
/// counter-clockwise (y-down) edge.
#[inline]
fn edge(u: &Vector2<f64>, v: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (v.x - u.x) * (p.y - u.y) - (v.y - u.y) * (p.x - u.x)
}

/// Tie rule for pixel centers exactly on an edge: exactly one of two
/// triangles sharing an edge owns it.
#[inline]
fn owns_edge(u: &Vector2<f64>, v: &Vector2<f64>) -> bool {
    let d = v - u;
    d.y > 0.0 || (d.y == 0.0 && d.x < 0.0)
}

/// Projected 2-D positions and camera depths of all vertices.
pub fn project_all(positions: &DVector<f64>, pose: &Pose) -> (Vec<Vector2<f64>>, Vec<f64>) {
    let r = pose.rotation();
    positions
        .as_slice()
        .chunks_exact(3)
        .map(|p| {
            let pr = project_with(&r, pose.scale, pose.t, &Vector3::new(p[0], p[1], p[2]));
            (pr.q, pr.depth)
        })
        .unzip()
}

/// Z-buffered rasterization. Back-facing and zero-area triangles are
/// skipped; closer (larger depth) wins, ties go to the lower triangle index.
pub fn rasterize(
    positions: &DVector<f64>,
    pose: &Pose,
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
) -> RasterMap {
    let (q, z) = project_all(positions, pose);
    rasterize_projected(&q, &z, triangles, width, height)
}

pub fn rasterize_projected(
    q: &[Vector2<f64>],
    z: &[f64],
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
) -> RasterMap {
    let mut map = RasterMap::empty(width, height);
    if width == 0 || height == 0 {
        return map;
    }
    for (t, tri) in triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|v| q[v as usize]);
        let area = edge(&a, &b, &c);
        if !(area > 0.0) || !area.is_finite() {
            continue;
        }
        let [za, zb, zc] = tri.map(|v| z[v as usize]);
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (own_bc, own_ca, own_ab) = (owns_edge(&b, &c), owns_edge(&c, &a), owns_edge(&a, &b));
        for py in y0 as usize..=y1 as usize {
            for px in x0 as usize..=x1 as usize {
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let e0 = edge(&b, &c, &p);
                let e1 = edge(&c, &a, &p);
                let e2 = edge(&a, &b, &p);
                let inside = (e0 > 0.0 || (e0 == 0.0 && own_bc))
                    && (e1 > 0.0 || (e1 == 0.0 && own_ca))
                    && (e2 > 0.0 || (e2 == 0.0 && own_ab));
                if !inside {
                    continue;
                }
                let w = [e0 / area, e1 / area, e2 / area];
                let d = w[0] * za + w[1] * zb + w[2] * zc;
                let i = py * width + px;
                if d > map.depth[i] {
                    map.depth[i] = d;
                    map.tri_index[i] = t as u32;
                    map.bary[i] = w;
                    map.mask.data[i] = true;
                }
            }
        }
    }
    map
}

/// Unit camera-space normals of every triangle (zero for degenerate ones).
pub fn triangle_normals(positions: &DVector<f64>, rotation: &Matrix3<f64>, triangles: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|v| vertex(positions, v as usize));
            let n = rotation * (b - a).cross(&(c - a));
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::zeros()
            }
        })
        .collect()
}

pub enum AlbedoSource<'a> {
    /// Interleaved per-vertex RGB, interpolated barycentrically.
    PerVertex(&'a DVector<f64>),
    PerPixel(&'a RgbImage),
}

pub enum NormalSource<'a> {
    /// Flat shading from per-triangle camera-space normals.
    PerTriangle(&'a [Vector3<f64>]),
    PerPixel(&'a NormalMap),
}

/// Shaded image plus the face mask it was rendered with.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image: RgbImage,
    pub mask: Mask,
}

/// Shades every face pixel with the SH irradiance model; other pixels take
/// the background (black when none is given).
pub fn render_face(
    raster: &RasterMap,
    triangles: &[[u32; 3]],
    albedo: AlbedoSource<'_>,
    normals: NormalSource<'_>,
    illum: &Illumination,
    background: Option<&RgbImage>,
) -> Result<RenderedImage> {
    let (w, h) = (raster.width, raster.height);
    let mut image = match background {
        Some(bg) => {
            raster.mask.check_size(bg, "background")?;
            bg.clone()
        }
        None => RgbImage::filled(w, h, [0.0; 3]),
    };
    if let AlbedoSource::PerPixel(img) = &albedo {
        raster.mask.check_size(*img, "albedo image")?;
    }
    if let NormalSource::PerPixel(nm) = &normals {
        raster.mask.check_size(*nm, "normal map")?;
    }
    for i in raster.face_pixels() {
        let t = raster.tri_index[i] as usize;
        let b = match &albedo {
            AlbedoSource::PerVertex(v) => {
                let tri = triangles[t];
                let wts = raster.bary[i];
                let mut b = [0.0; 3];
                for (c, bc) in b.iter_mut().enumerate() {
                    *bc = (0..3).map(|k| wts[k] * v[3 * tri[k] as usize + c]).sum();
                }
                b
            }
            AlbedoSource::PerPixel(img) => img.data[i],
        };
        let n = match &normals {
            NormalSource::PerTriangle(ns) => ns[t],
            NormalSource::PerPixel(nm) => nm.data[i],
        };
        let s = illum.shading(&sh_basis_unit(&n));
        image.data[i] = [b[0] * s[0], b[1] * s[1], b[2] * s[2]];
    }
    Ok(RenderedImage { image, mask: raster.mask.clone() })
}

/// Everything produced by rendering a parameter set with flat shading.
#[derive(Debug, Clone)]
pub struct CoarseRender {
    pub shape: DVector<f64>,
    pub albedo: DVector<f64>,
    pub raster: RasterMap,
    /// Camera-space unit normal per triangle.
    pub normals: Vec<Vector3<f64>>,
    pub rendered: RenderedImage,
}

/// Assembles, rasterizes and flat-shades `params` at `width x height`.
pub fn render_params(
    model: &MorphableModel,
    params: &FaceParams,
    width: usize,
    height: usize,
    background: Option<&RgbImage>,
) -> Result<CoarseRender> {
    params.validate_for(model)?;
    let shape = assemble_shape(model, &params.alpha_id, &params.alpha_exp)?;
    let albedo = assemble_albedo(model, &params.alpha_alb)?;
    let raster = rasterize(&shape, &params.pose, &model.triangles, width, height);
    let normals = triangle_normals(&shape, &params.pose.rotation(), &model.triangles);
    let rendered = render_face(
        &raster,
        &model.triangles,
        AlbedoSource::PerVertex(&albedo),
        NormalSource::PerTriangle(&normals),
        &params.illum,
        background,
    )?;
    Ok(CoarseRender { shape, albedo, raster, normals, rendered })
}

/// Projected Normalized Coordinate Code: the mean face rendered with its
/// bounding-box-normalized coordinates as color.
pub fn render_pncc(model: &MorphableModel, pose: &Pose, width: usize, height: usize) -> RenderedImage {
    let raster = rasterize(&model.mean_shape, pose, &model.triangles, width, height);
    let (lo, hi) = bbox(&model.mean_shape);
    let span = (hi - lo).map(|s| if s > 0.0 { s } else { 1.0 });
    let points = raster.interpolate(&model.triangles, &model.mean_shape);
    let mut image = RgbImage::filled(width, height, [0.0; 3]);
    for i in raster.face_pixels() {
        for c in 0..3 {
            image.data[i][c] = ((points[i][c] - lo[c]) / span[c]).clamp(0.0, 1.0);
        }
    }
    RenderedImage { image, mask: raster.mask }
}

/// For each masked pixel, the pixel whose forward-difference triangle
/// supplies its normal: itself when its right and lower neighbors are on
/// the mask, otherwise the nearest such interior pixel.
#[derive(Debug, Clone)]
pub struct NormalSupport {
    pub source: Vec<Option<usize>>,
}

impl NormalSupport {
    pub fn new(mask: &Mask) -> Result<Self> {
        let (w, h) = (mask.width, mask.height);
        if mask.count() == 0 {
            return invalid("normals from depth: mask is empty");
        }
        let is_interior = |i: usize| {
            let (x, y) = (i % w, i / w);
            mask.data[i] && x + 1 < w && y + 1 < h && mask.data[i + 1] && mask.data[i + w]
        };
        let interior: Vec<usize> = (0..w * h).filter(|&i| is_interior(i)).collect();
        if interior.is_empty() {
            return Err(Error::EmptyRegion("mask has no pixel with forward neighbors".into()));
        }
        let mut source = vec![None; w * h];
        for i in mask.indices() {
            if is_interior(i) {
                source[i] = Some(i);
                continue;
            }
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let mut best = (i64::MAX, 0usize);
            for &j in &interior {
                let (jx, jy) = ((j % w) as i64, (j / w) as i64);
                let d = (jx - x).pow(2) + (jy - y).pow(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            source[i] = Some(best.1);
        }
        Ok(NormalSupport { source })
    }
}

/// Unnormalized normal `(-k dz/dx, -k dz/dy, 1)` of the forward triangle at
/// `s`, where `k` converts depth units to pixels.
#[inline]
pub(crate) fn forward_normal(depth: &[f64], width: usize, s: usize, k: f64) -> Vector3<f64> {
    let dx = depth[s + 1] - depth[s];
    let dy = depth[s + width] - depth[s];
    Vector3::new(-k * dx, -k * dy, 1.0)
}

/// Per-pixel unit normals of the depth surface `p(i, j) = [i, j, k z(i, j)]`
/// built from the triangle `(p(i,j), p(i+1,j), p(i,j+1))`, oriented toward
/// the viewer. `pixels_per_unit` (`k`) is the pose scale when depth is in
/// model units, or 1 for depth already in pixels.
pub fn normals_from_depth(depth: &ScalarMap, mask: &Mask, pixels_per_unit: f64) -> Result<NormalMap> {
    depth.check_size(mask, "normals mask")?;
    let support = NormalSupport::new(mask)?;
    Ok(normals_with_support(depth, &support, pixels_per_unit))
}

pub fn normals_with_support(depth: &ScalarMap, support: &NormalSupport, pixels_per_unit: f64) -> NormalMap {
    let mut out = NormalMap::filled(depth.width, depth.height, Vector3::zeros());
    for (i, src) in support.source.iter().enumerate() {
        if let Some(s) = *src {
            let mut n = forward_normal(&depth.data, depth.width, s, pixels_per_unit).normalize();
            if n.z < 0.0 {
                n = -n;
            }
            out.data[i] = n;
        }
    }
    out
}

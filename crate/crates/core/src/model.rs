//! Linear morphable face model: geometry and albedo assembled from PCA
//! coefficients.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{invalid, Result};
use crate::lighting::Illumination;

/// Named landmark roles used to place detail regions on the image.
///
/// Entries are vertex indices and must also appear in
/// [`MorphableModel::landmark_indices`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkLayout {
    /// Brow landmarks, any order.
    #[serde(default)]
    pub brows: Vec<usize>,
    /// Eye corners as `[left outer, left inner, right inner, right outer]`.
    #[serde(default)]
    pub eye_corners: Vec<usize>,
}

/// Morphable model. Per-vertex vectors are interleaved `x0 y0 z0 x1 ...`;
/// bases are `3n x K`, one mode per column. Shape is in millimeters, albedo
/// in linear RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub n_vertices: usize,
    pub mean_shape: DVector<f64>,
    pub id_basis: DMatrix<f64>,
    pub exp_basis: DMatrix<f64>,
    pub mean_albedo: DVector<f64>,
    pub alb_basis: DMatrix<f64>,
    pub sigma_id: DVector<f64>,
    pub sigma_exp: DVector<f64>,
    pub sigma_alb: DVector<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub landmark_indices: Vec<usize>,
    pub landmark_layout: LandmarkLayout,
}

impl MorphableModel {
    pub fn k_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn k_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn k_alb(&self) -> usize {
        self.alb_basis.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = 3 * self.n_vertices;
        if self.n_vertices == 0 {
            return invalid("model has no vertices");
        }
        if self.mean_shape.len() != m || self.mean_albedo.len() != m {
            return invalid("mean shape/albedo length must be 3 * n_vertices");
        }
        for (name, basis, sigma) in [
            ("identity", &self.id_basis, &self.sigma_id),
            ("expression", &self.exp_basis, &self.sigma_exp),
            ("albedo", &self.alb_basis, &self.sigma_alb),
        ] {
            if basis.nrows() != m {
                return invalid(format!("{name} basis has {} rows, expected {m}", basis.nrows()));
            }
            if basis.ncols() != sigma.len() {
                return invalid(format!("{name} basis/sigma length mismatch"));
            }
            if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return invalid(format!("{name} sigma must be positive"));
            }
        }
        if self.triangles.iter().flatten().any(|&v| v as usize >= self.n_vertices) {
            return invalid("triangle index out of range");
        }
        if self.landmark_indices.iter().any(|&v| v >= self.n_vertices) {
            return invalid("landmark index out of range");
        }
        let layout = self.landmark_layout.brows.iter().chain(&self.landmark_layout.eye_corners);
        for v in layout {
            if !self.landmark_indices.contains(v) {
                return invalid(format!("layout vertex {v} is not a landmark"));
            }
        }
        if !self.landmark_layout.eye_corners.is_empty() && self.landmark_layout.eye_corners.len() != 4 {
            return invalid("eye_corners must list exactly 4 vertices");
        }
        Ok(())
    }

    /// A pose framing the mean face in a `width x height` image.
    pub fn default_pose(&self, width: usize, height: usize) -> Pose {
        let (lo, hi) = bbox(&self.mean_shape);
        let extent_x = (hi.x - lo.x).max(1e-9);
        let extent_y = (hi.y - lo.y).max(1e-9);
        let scale = 0.8 * (width as f64 / extent_x).min(height as f64 / extent_y);
        let center = (lo + hi) * 0.5;
        Pose::new(
            0.0,
            0.0,
            0.0,
            scale,
            [width as f64 * 0.5 - scale * center.x, height as f64 * 0.5 - scale * center.y],
        )
    }

    /// Builds the mesh for a parameter set.
    pub fn mesh(&self, params: &FaceParams) -> Result<Mesh> {
        Ok(Mesh {
            positions: assemble_shape(self, &params.alpha_id, &params.alpha_exp)?,
            colors: assemble_albedo(self, &params.alpha_alb)?,
            triangles: self.triangles.clone(),
        })
    }
}

/// Axis-aligned bounds of an interleaved xyz vector.
pub fn bbox(v: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in v.as_slice().chunks_exact(3) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

#[inline]
pub fn vertex(v: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])
}

/// The full parameter set: geometry, albedo, pose and lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub alpha_id: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub alpha_alb: Vec<f64>,
    pub pose: Pose,
    pub illum: Illumination,
}

impl FaceParams {
    /// Mean face (all coefficients zero) under the given pose and lighting.
    pub fn neutral(model: &MorphableModel, pose: Pose, illum: Illumination) -> Self {
        FaceParams {
            alpha_id: vec![0.0; model.k_id()],
            alpha_exp: vec![0.0; model.k_exp()],
            alpha_alb: vec![0.0; model.k_alb()],
            pose,
            illum,
        }
    }

    pub fn validate_for(&self, model: &MorphableModel) -> Result<()> {
        if self.alpha_id.len() != model.k_id()
            || self.alpha_exp.len() != model.k_exp()
            || self.alpha_alb.len() != model.k_alb()
        {
            return invalid(format!(
                "coefficient lengths ({}, {}, {}) do not match model ({}, {}, {})",
                self.alpha_id.len(),
                self.alpha_exp.len(),
                self.alpha_alb.len(),
                model.k_id(),
                model.k_exp(),
                model.k_alb()
            ));
        }
        let coeffs = self.alpha_id.iter().chain(&self.alpha_exp).chain(&self.alpha_alb);
        if coeffs.into_iter().any(|v| !v.is_finite()) {
            return invalid("non-finite coefficient");
        }
        self.pose.validate()?;
        self.illum.validate()
    }
}

/// Triangle mesh with per-vertex colors. Colors are stored unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub positions: DVector<f64>,
    pub colors: DVector<f64>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.positions.len() / 3
    }
}

fn affine(mean: &DVector<f64>, terms: &[(&DMatrix<f64>, &[f64])]) -> Result<DVector<f64>> {
    let mut out = mean.clone();
    for (basis, coeffs) in terms {
        if basis.ncols() != coeffs.len() {
            return invalid(format!(
                "expected {} coefficients, got {}",
                basis.ncols(),
                coeffs.len()
            ));
        }
        let a = DVector::from_column_slice(coeffs);
        out.gemv(1.0, basis, &a, 1.0);
    }
    Ok(out)
}

/// `p = mean_shape + A_id alpha_id + A_exp alpha_exp`.
pub fn assemble_shape(model: &MorphableModel, alpha_id: &[f64], alpha_exp: &[f64]) -> Result<DVector<f64>> {
    affine(&model.mean_shape, &[(&model.id_basis, alpha_id), (&model.exp_basis, alpha_exp)])
}

/// `b = mean_albedo + A_alb alpha_alb`.
pub fn assemble_albedo(model: &MorphableModel, alpha_alb: &[f64]) -> Result<DVector<f64>> {
    affine(&model.mean_albedo, &[(&model.alb_basis, alpha_alb)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> MorphableModel {
        generate_synthetic_model(5, 12, 4, 3, 5).unwrap()
    }

    fn dense_oracle(mean: &DVector<f64>, basis: &DMatrix<f64>, a: &[f64]) -> Vec<f64> {
        (0..mean.len())
            .map(|r| {
                let mut acc = mean[r];
                for (k, ak) in a.iter().enumerate() {
                    acc += basis[(r, k)] * ak;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let m = small_model();
        let p = assemble_shape(&m, &[0.0; 4], &[0.0; 3]).unwrap();
        assert_eq!(p, m.mean_shape);
        let b = assemble_albedo(&m, &[0.0; 5]).unwrap();
        assert_eq!(b, m.mean_albedo);
    }

    #[test]
    fn unit_coefficient_adds_basis_column() {
        let m = small_model();
        let mut e = vec![0.0; 4];
        e[2] = 1.0;
        let p = assemble_shape(&m, &e, &[0.0; 3]).unwrap();
        let expect = &m.mean_shape + m.id_basis.column(2);
        assert!((p - expect).amax() < 1e-15);
        let mut e = vec![0.0; 5];
        e[4] = 1.0;
        let b = assemble_albedo(&m, &e).unwrap();
        assert!((b - (&m.mean_albedo + m.alb_basis.column(4))).amax() < 1e-15);
    }

    #[test]
    fn random_coefficients_match_dense_oracle() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a_id: Vec<f64> = (0..4).map(|_| rng.random_range(-300.0..300.0)).collect();
            let a_exp: Vec<f64> = (0..3).map(|_| rng.random_range(-300.0..300.0)).collect();
            let a_alb: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = assemble_shape(&m, &a_id, &a_exp).unwrap();
            let id_part = dense_oracle(&m.mean_shape, &m.id_basis, &a_id);
            let zero = DVector::zeros(m.mean_shape.len());
            let exp_part = dense_oracle(&zero, &m.exp_basis, &a_exp);
            for r in 0..p.len() {
                let want = id_part[r] + exp_part[r];
                assert!((p[r] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            let b = assemble_albedo(&m, &a_alb).unwrap();
            let want = dense_oracle(&m.mean_albedo, &m.alb_basis, &a_alb);
            for r in 0..b.len() {
                assert!((b[r] - want[r]).abs() <= 1e-12 * want[r].abs().max(1.0));
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_invalid_argument() {
        let m = small_model();
        assert!(matches!(
            assemble_shape(&m, &[0.0; 3], &[0.0; 3]),
            Err(crate::Error::InvalidArgument(_))
        ));
        assert!(assemble_albedo(&m, &[0.0; 6]).is_err());
    }

    proptest! {
        #[test]
        fn assembly_is_linear(seed in 0u64..1000, scale in 0.1f64..100.0) {
            let m = small_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
            let (a1, e1, a2, e2) = (draw(4), draw(3), draw(4), draw(3));
            let sum_id: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let sum_exp: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| x + y).collect();
            let lhs = assemble_shape(&m, &sum_id, &sum_exp).unwrap();
            let rhs = assemble_shape(&m, &a1, &e1).unwrap() + assemble_shape(&m, &a2, &e2).unwrap() - &m.mean_shape;
            prop_assert!((lhs - rhs).amax() < 1e-10 * scale.max(1.0));
            prop_assert_eq!(assemble_shape(&m, &a1, &e1).unwrap().len(), 3 * m.n_vertices);
        }
    }
}

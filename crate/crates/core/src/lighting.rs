//! Second-order spherical-harmonics irradiance for Lambertian shading.
//!
//! Basis order: `[Y00, Y1-1 (y), Y10 (z), Y11 (x), Y2-2 (xy), Y2-1 (yz),
//! Y20, Y21 (xz), Y22]` with the real-SH normalization constants.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SH_COEFFS: usize = 9;
pub const ILLUM_COEFFS: usize = 3 * SH_COEFFS;

const C0: f64 = 0.282_094_791_773_878_1;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C3: f64 = 0.315_391_565_252_520_0;
const C4: f64 = 0.546_274_215_296_039_6;

/// Per-channel SH lighting coefficients, `[r; 9] ++ [g; 9] ++ [b; 9]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    #[serde(with = "coeff_array")]
    pub coeffs: [f64; ILLUM_COEFFS],
}

impl Illumination {
    pub fn zeros() -> Self {
        Illumination { coeffs: [0.0; ILLUM_COEFFS] }
    }

    /// Constant (DC-only) lighting with the same coefficient on every channel.
    pub fn dc(gamma0: f64) -> Self {
        Self::dc_rgb([gamma0; 3])
    }

    pub fn dc_rgb(gamma0: [f64; 3]) -> Self {
        let mut il = Self::zeros();
        for c in 0..3 {
            il.coeffs[c * SH_COEFFS] = gamma0[c];
        }
        il
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.coeffs[c * SH_COEFFS..(c + 1) * SH_COEFFS]
    }

    pub fn validate(&self) -> Result<()> {
        if self.coeffs.iter().any(|v| !v.is_finite()) {
            return invalid("illumination has non-finite coefficients");
        }
        Ok(())
    }

    /// Per-channel irradiance factor `gamma_c . phi`.
    pub fn shading(&self, phi: &[f64; SH_COEFFS]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.channel(c).iter().zip(phi).map(|(g, p)| g * p).sum();
        }
        out
    }
}

/// The constant basis value `phi_1`.
pub const fn sh_dc() -> f64 {
    C0
}

/// SH basis at a normal assumed to be unit length.
pub fn sh_basis_unit(n: &Vector3<f64>) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ]
}

/// SH basis at `n`, renormalizing when `n` is not unit length.
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; SH_COEFFS]> {
    let len = n.norm();
    if !(len > 0.0) || !len.is_finite() {
        return invalid("normal has zero or non-finite length");
    }
    if (len - 1.0).abs() > 1e-6 {
        return Ok(sh_basis_unit(&(n / len)));
    }
    Ok(sh_basis_unit(n))
}

/// Gradient of each basis polynomial w.r.t. the normal components.
///
/// Only the tangential part is meaningful on the sphere; callers contract it
/// with tangent perturbations of a unit normal.
pub fn sh_basis_gradient(n: &Vector3<f64>) -> [Vector3<f64>; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vector3::zeros(),
        Vector3::new(0.0, C1, 0.0),
        Vector3::new(0.0, 0.0, C1),
        Vector3::new(C1, 0.0, 0.0),
        Vector3::new(C2 * y, C2 * x, 0.0),
        Vector3::new(0.0, C2 * z, C2 * y),
        Vector3::new(0.0, 0.0, 6.0 * C3 * z),
        Vector3::new(C2 * z, 0.0, C2 * x),
        Vector3::new(2.0 * C4 * x, -2.0 * C4 * y, 0.0),
    ]
}

/// Lambertian irradiance `b_c * sum_k gamma_{c,k} phi_k(n)`, unclamped.
pub fn shade(albedo: [f64; 3], n: &Vector3<f64>, illum: &Illumination) -> Result<[f64; 3]> {
    let phi = sh_basis(n)?;
    let s = illum.shading(&phi);
    Ok([albedo[0] * s[0], albedo[1] * s[1], albedo[2] * s[2]])
}

mod coeff_array {
    use super::ILLUM_COEFFS;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; ILLUM_COEFFS], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; ILLUM_COEFFS], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| D::Error::custom(format!("expected 27 SH coefficients, got {}", v.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_has_nine_terms_and_z_axis_symmetry() {
        let phi = sh_basis(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(phi.len(), 9);
        // y, x, xy, yz, xz, x^2-y^2 vanish on the z axis
        for k in [1, 3, 4, 5, 7, 8] {
            assert_eq!(phi[k], 0.0, "term {k}");
        }
        assert!((phi[0] - 0.282095).abs() < 1e-6);
        assert!((phi[2] - 0.488603).abs() < 1e-6);
    }

    #[test]
    fn zero_normal_is_rejected() {
        assert!(sh_basis(&Vector3::zeros()).is_err());
    }

    #[test]
    fn non_unit_normal_is_renormalized() {
        let a = sh_basis(&Vector3::new(0.0, 3.0, 4.0)).unwrap();
        let b = sh_basis(&Vector3::new(0.0, 0.6, 0.8)).unwrap();
        for k in 0..9 {
            assert!((a[k] - b[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn dc_lighting_is_normal_independent() {
        let il = Illumination::dc(2.0);
        let b = [0.3, 0.5, 0.7];
        let ref_val = shade(b, &Vector3::new(0.0, 0.0, 1.0), &il).unwrap();
        let other = shade(b, &Vector3::new(0.6, -0.48, 0.64), &il).unwrap();
        for c in 0..3 {
            assert!((ref_val[c] - b[c] * 2.0 * C0).abs() < 1e-15);
            assert!((ref_val[c] - other[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_albedo_is_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut il = Illumination::zeros();
        il.coeffs.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let out = shade([0.0; 3], &Vector3::new(0.0, 1.0, 0.0), &il).unwrap();
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn shade_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut il = Illumination::zeros();
            il.coeffs.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
            let n = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let b = [rng.random(), rng.random(), rng.random()];
            let (x, y, z) = (n.x, n.y, n.z);
            let terms = [
                0.282095,
                0.488603 * y,
                0.488603 * z,
                0.488603 * x,
                1.092548 * x * y,
                1.092548 * y * z,
                0.315392 * (3.0 * z * z - 1.0),
                1.092548 * x * z,
                0.546274 * (x * x - y * y),
            ];
            let got = shade(b, &n, &il).unwrap();
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..9 {
                    acc += il.coeffs[c * 9 + k] * terms[k];
                }
                // reference constants are rounded to 6 digits
                assert!((got[c] - b[c] * acc).abs() < 1e-5 * (1.0 + acc.abs()));
            }
            // exact-constant reference
            let phi = sh_basis_unit(&n);
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..9 {
                    acc += il.coeffs[c * 9 + k] * phi[k];
                }
                assert!((got[c] - b[c] * acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = Vector3::new(0.3, -0.4, 0.7);
        let g = sh_basis_gradient(&n);
        let h = 1e-6;
        for axis in 0..3 {
            let mut np = n;
            let mut nm = n;
            np[axis] += h;
            nm[axis] -= h;
            let (fp, fm) = (sh_basis_unit(&np), sh_basis_unit(&nm));
            for k in 0..9 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn serde_rejects_wrong_length() {
        let bad = r#"{"coeffs":[1.0,2.0]}"#;
        assert!(serde_json::from_str::<Illumination>(bad).is_err());
        let il = Illumination::dc(1.5);
        let back: Illumination = serde_json::from_str(&serde_json::to_string(&il).unwrap()).unwrap();
        assert_eq!(back, il);
    }
}

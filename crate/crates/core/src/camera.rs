//! Weak-perspective camera.
//!
//! Camera space shares the image axes: x to the right, y down, and depth
//! pointing toward the viewer, so a larger depth value is closer. A model
//! point `p` lands at `q = s * (R p)_xy + t` and has depth `(R p)_z`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Scaled-orthographic pose: Euler angles in radians, scale in pixels per
/// model unit, translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub scale: f64,
    pub t: [f64; 2],
}

impl Pose {
    pub const PARAMS: usize = 6;

    pub fn new(pitch: f64, yaw: f64, roll: f64, scale: f64, t: [f64; 2]) -> Self {
        Pose { pitch, yaw, roll, scale, t }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.pitch, self.yaw, self.roll, self.scale, self.t[0], self.t[1]];
        if vals.iter().any(|v| !v.is_finite()) {
            return invalid("pose has non-finite entries");
        }
        if self.scale <= 0.0 {
            return invalid(format!("pose scale must be positive, got {}", self.scale));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.pitch, self.yaw, self.roll)
    }

    /// Packs as `[pitch, yaw, roll, scale, tx, ty]`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.pitch, self.yaw, self.roll, self.scale, self.t[0], self.t[1]]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose { pitch: a[0], yaw: a[1], roll: a[2], scale: a[3], t: [a[4], a[5]] }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projected {
        project_with(&self.rotation(), self.scale, self.t, p)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose { pitch: 0.0, yaw: 0.0, roll: 0.0, scale: 1.0, t: [0.0, 0.0] }
    }
}

/// Image-plane position plus camera-space depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub q: Vector2<f64>,
    pub depth: f64,
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    rot_z(roll) * rot_y(yaw) * rot_x(pitch)
}

/// Partial derivatives of the rotation w.r.t. (pitch, yaw, roll).
pub fn rotation_derivatives(pitch: f64, yaw: f64, roll: f64) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(pitch), rot_y(yaw), rot_z(roll));
    [
        rz * ry * drot_x(pitch),
        rz * drot_y(yaw) * rx,
        drot_z(roll) * ry * rx,
    ]
}

pub fn project_with(r: &Matrix3<f64>, scale: f64, t: [f64; 2], p: &Vector3<f64>) -> Projected {
    let c = r * p;
    Projected {
        q: Vector2::new(scale * c.x + t[0], scale * c.y + t[1]),
        depth: c.z,
    }
}

/// Projects a single model-space point under `pose`.
pub fn project_vertex(pose: &Pose, p: &Vector3<f64>) -> Projected {
    pose.project(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(rotation_from_euler(0.0, 0.0, 0.0), Matrix3::identity());
    }

    #[test]
    fn rotation_matches_explicit_axis_product() {
        let (p, y, r) = (0.1f64, -0.2f64, 0.3f64);
        // Written out element by element, independent of rot_x/rot_y/rot_z.
        let rx = [[1.0, 0.0, 0.0], [0.0, p.cos(), -p.sin()], [0.0, p.sin(), p.cos()]];
        let ry = [[y.cos(), 0.0, y.sin()], [0.0, 1.0, 0.0], [-y.sin(), 0.0, y.cos()]];
        let rz = [[r.cos(), -r.sin(), 0.0], [r.sin(), r.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        };
        let expect = mul(mul(rz, ry), rx);
        let got = rotation_from_euler(p, y, r);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let a = [0.3, -0.7, 1.1];
        let d = rotation_derivatives(a[0], a[1], a[2]);
        let h = 1e-6;
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (rotation_from_euler(ap[0], ap[1], ap[2])
                - rotation_from_euler(am[0], am[1], am[2]))
                / (2.0 * h);
            assert!((fd - d[k]).abs().max() < 1e-9);
        }
    }

    #[test]
    fn identity_projection_drops_depth() {
        let pose = Pose::default();
        let pr = project_vertex(&pose, &Vector3::new(1.5, -2.0, 7.0));
        assert_eq!(pr.q, Vector2::new(1.5, -2.0));
        assert_eq!(pr.depth, 7.0);
    }

    #[test]
    fn scaled_translated_projection() {
        let pose = Pose::new(0.0, 0.0, 0.0, 2.0, [3.0, 4.0]);
        let pr = project_vertex(&pose, &Vector3::new(1.0, 1.0, 5.0));
        assert_eq!(pr.q, Vector2::new(5.0, 6.0));
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(Pose::new(0.0, 0.0, 0.0, 0.0, [0.0, 0.0]).validate().is_err());
        assert!(Pose::new(f64::NAN, 0.0, 0.0, 1.0, [0.0, 0.0]).validate().is_err());
    }
}

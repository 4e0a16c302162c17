//! Second-order spherical-harmonics shading: basis orthonormality and a
//! face lit by a few lighting setups.

use std::f64::consts::PI;

use faceforge::lighting::{sh_basis_unit, Illumination, SH_COEFFS};
use faceforge::model::FaceParams;
use faceforge::raster::render_params;
use faceforge::synthetic::generate_synthetic_model;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let n = 200_000;
    let mut diag = [0.0; SH_COEFFS];
    for _ in 0..n {
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        let y = sh_basis_unit(&Vector3::new(r * phi.cos(), r * phi.sin(), z));
        for (d, v) in diag.iter_mut().zip(y) {
            *d += 4.0 * PI * v * v / n as f64;
        }
    }
    println!("basis norms {:.3?}", diag);

    let model = generate_synthetic_model(1, 500, 10, 5, 10)?;
    let pose = model.default_pose(64, 64);
    let mut side = Illumination::dc(3.0);
    for c in 0..3 {
        side.coeffs[c * SH_COEFFS + 3] = 1.0;
    }
    for (name, illum) in [("ambient", Illumination::dc(3.0)), ("side", side)] {
        let r = render_params(&model, &FaceParams::neutral(&model, pose, illum), 64, 64, None)?;
        let lum: Vec<f64> = r.raster.face_pixels().iter().map(|&i| r.rendered.image.data[i][0]).collect();
        let (lo, hi) = lum.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!("{name}: red channel range [{lo:.4}, {hi:.4}] over {} pixels", lum.len());
    }
    Ok(())
}

//! Recovers a ridge pattern from shading with the L1-regularized depth
//! refinement.

use faceforge::lighting::{Illumination, SH_COEFFS};
use faceforge::model::FaceParams;
use faceforge::refine::{coarse_depth, refine_displacement, render_refined, DepthField, RefineConfig};
use faceforge::synthetic::{generate_synthetic_model, wrinkle_band};

fn main() -> faceforge::Result<()> {
    let model = generate_synthetic_model(42, 500, 10, 5, 10)?;
    let size = 96;
    let mut illum = Illumination::dc(3.0);
    for c in 0..3 {
        illum.coeffs[c * SH_COEFFS + 1] = -0.6;
        illum.coeffs[c * SH_COEFFS + 2] = 0.5;
        illum.coeffs[c * SH_COEFFS + 3] = 0.7;
    }
    let params = FaceParams::neutral(&model, model.default_pose(size, size), illum);
    let (z, raster) = coarse_depth(&model, &params, size, size)?;
    let band = wrinkle_band(&raster.mask, 0.8, 8.0);
    let mut field = DepthField::new(z.clone(), raster.mask.clone())?;
    field.d = band.displacement.clone();
    let image = render_refined(&model, &params, &field, None)?.image;

    let res = refine_displacement(&image, &z, &params, &model, &RefineConfig::default())?;
    for (k, e) in res.trace.iter().enumerate() {
        println!("outer {k:2}: total {:.5} (data {:.5}, |Ld|_1 {:.3})", e.total, e.e_con, e.lap_l1);
    }
    let err: f64 = band.band.iter().map(|&i| (res.field.d.data[i] - band.displacement.data[i]).powi(2)).sum::<f64>();
    println!("ridge band rmse {:.4} over {} pixels", (err / band.band.len() as f64).sqrt(), band.band.len());
    Ok(())
}

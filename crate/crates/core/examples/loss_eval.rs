//! Pose, geometry and color losses of a perturbed estimate, and the depth
//! error of a refined reconstruction.

use faceforge::loss::{depth_error, evaluate_losses};
use faceforge::raster::render_params;
use faceforge::refine::coarse_depth;
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let model = generate_synthetic_model(8, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let truth = random_scene(&model, &mut rng, 96, 96, &SceneRanges::default());
    let frame = render_params(&model, &truth, 96, 96, None)?.rendered.image;

    let mut estimate = truth.clone();
    estimate.pose.yaw += 0.05;
    estimate.alpha_id[0] += model.sigma_id[0];
    estimate.illum.coeffs[0] *= 0.9;
    let report = evaluate_losses(&model, "perturbed", &truth, &estimate, 96, 96, Some(&frame))?;
    println!("{}", faceforge::io::to_json_string(&report)?);

    let (z_true, raster) = coarse_depth(&model, &truth, 96, 96)?;
    let (z_est, _) = coarse_depth(&model, &estimate, 96, 96)?;
    println!("{:?}", depth_error(&z_est, &z_true, &raster.mask)?);
    Ok(())
}

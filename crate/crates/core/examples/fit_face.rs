//! Stage-1 analysis by synthesis: fits a rendered face from its landmarks.

use faceforge::fitting::{fit_model, landmark_error, photometric_rmse, FittingConfig, LandmarkSet};
use faceforge::raster::render_params;
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let model = generate_synthetic_model(42, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let truth = random_scene(&model, &mut rng, 96, 96, &SceneRanges::default());
    let image = render_params(&model, &truth, 96, 96, None)?.rendered.image;
    let landmarks = LandmarkSet::project(&model, &truth)?;

    let fit = fit_model(&image, &landmarks, &model, &FittingConfig::default())?;
    let first = fit.trace[0].energy.e_total;
    println!("status {:?}, {} trace entries, energy {first:.4} -> {:.4}", fit.status, fit.trace.len(), fit.energy.e_total);
    println!(
        "landmark error {:.4} px, photometric rmse {:.5}",
        landmark_error(&landmarks, &fit.params, &model)?,
        photometric_rmse(&image, &fit.params, &model)?
    );
    println!(
        "yaw truth {:.4}, fitted {:.4}",
        truth.pose.yaw, fit.params.pose.yaw
    );
    Ok(())
}

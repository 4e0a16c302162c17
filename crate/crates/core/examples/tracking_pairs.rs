//! Fits a delta-pose distribution to a pose sequence and simulates
//! previous frames with their PNCC renders.

use faceforge::camera::Pose;
use faceforge::image::RgbImage;
use faceforge::synthesis::{fit_delta_distribution, sample_rng, simulate_pair};
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let model = generate_synthetic_model(6, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut pose = model.default_pose(96, 96);
    let mut sequence = vec![pose];
    for _ in 0..200 {
        pose.yaw += rng.random_range(-0.03..0.03);
        pose.pitch += rng.random_range(-0.01..0.01);
        pose.t[0] += rng.random_range(-1.0..1.0);
        sequence.push(pose);
    }
    let dist = fit_delta_distribution(&sequence)?;
    println!("yaw delta {:?}, tx delta {:?}", dist.yaw, dist.tx);

    let params = random_scene(&model, &mut rng, 96, 96, &SceneRanges::default());
    let background = RgbImage::filled(96, 96, [0.1, 0.1, 0.1]);
    for j in 0..3 {
        let pair = simulate_pair(&model, &params, &background, &dist, &mut sample_rng(1, j))?;
        let prev: Pose = pair.prev_params.as_ref().map(|p| p.pose).unwrap_or(params.pose);
        let pncc_pixels = pair.pncc.as_ref().map_or(0, |p| p.data.iter().filter(|v| v.iter().any(|&c| c > 0.0)).count());
        println!("pair {j}: yaw {:.4} -> {:.4}, {pncc_pixels} pncc pixels", prev.yaw, params.pose.yaw);
    }
    Ok(())
}

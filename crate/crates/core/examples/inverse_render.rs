//! The three-stage pipeline on a wrinkled synthetic face, written to disk.
//!
//! `cargo run --example inverse_render -- [out_dir]`

use std::path::PathBuf;

use faceforge::fitting::LandmarkSet;
use faceforge::io;
use faceforge::pipeline::{inverse_render, InverseRenderingConfig};
use faceforge::refine::{coarse_depth, render_refined, DepthField};
use faceforge::synthetic::{generate_synthetic_model, random_scene, wrinkle_band, SceneRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("faceforge-invrender"));
    let model = generate_synthetic_model(4, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let ranges = SceneRanges { max_yaw: 0.3, max_pitch: 0.1, max_roll: 0.1, ..Default::default() };
    let truth = random_scene(&model, &mut rng, 96, 96, &ranges);
    let (z, raster) = coarse_depth(&model, &truth, 96, 96)?;
    let mut field = DepthField::new(z, raster.mask.clone())?;
    field.d = wrinkle_band(&raster.mask, 0.8, 8.0).displacement;
    let image = render_refined(&model, &truth, &field, None)?.image;
    let landmarks = LandmarkSet::project(&model, &truth)?;

    let ir = inverse_render(&image, &landmarks, &model, &InverseRenderingConfig::default(), None)?;
    let summary = io::write_inverse_rendering(&out, &model, &ir)?;
    println!("{}", io::to_json_string(&summary)?);
    println!("outputs in {}", out.display());
    Ok(())
}

//! Generates a small morphable model, draws a random scene and renders it.
//!
//! `cargo run --example render_synthetic -- [out_dir]`

use std::path::PathBuf;

use faceforge::fitting::LandmarkSet;
use faceforge::io;
use faceforge::raster::render_params;
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("faceforge-render"));
    let model = generate_synthetic_model(1, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let params = random_scene(&model, &mut rng, 128, 128, &SceneRanges::default());
    let r = render_params(&model, &params, 128, 128, None)?;

    io::write_model(&out.join("model"), &model)?;
    io::write_params(&out.join("params.json"), &params)?;
    io::write_image_pair(&out, "render", &r.rendered.image)?;
    io::write_landmarks(&out.join("landmarks.json"), &LandmarkSet::project(&model, &params)?)?;
    println!("{} face pixels, {} triangles -> {}", r.raster.face_count(), model.triangles.len(), out.display());
    Ok(())
}

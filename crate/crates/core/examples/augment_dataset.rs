//! Pose and expression augmentation of an inverse-rendered face, written as
//! a dataset and verified by re-rendering every sample.
//!
//! `cargo run --example augment_dataset -- [out_dir]`

use std::path::PathBuf;

use faceforge::fitting::LandmarkSet;
use faceforge::io::dataset::{verify_dataset, write_augment_dataset};
use faceforge::pipeline::{inverse_render, InverseRenderingConfig};
use faceforge::raster::render_params;
use faceforge::synthesis::AugmentationSpec;
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> faceforge::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("faceforge-augment"));
    let model = generate_synthetic_model(5, 500, 10, 5, 10)?;
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let truth = random_scene(&model, &mut rng, 64, 64, &SceneRanges::default());
    let image = render_params(&model, &truth, 64, 64, None)?.rendered.image;
    let landmarks = LandmarkSet::project(&model, &truth)?;
    let ir = inverse_render(&image, &landmarks, &model, &InverseRenderingConfig::default(), None)?;

    let spec = AugmentationSpec { variants: 8, ..Default::default() };
    let manifest = write_augment_dataset(&out, &model, &[("face".into(), ir)], &spec, 17, None)?;
    let report = verify_dataset(&out, &model, 1e-6)?;
    println!(
        "{} samples, {} skipped, {} consistent (max re-render rmse {:.2e}) -> {}",
        manifest.samples.len(),
        manifest.skipped.len(),
        report.consistent,
        report.max_rmse,
        out.display()
    );
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use faceforge::error::{Error, Result};
use faceforge::fitting::{fit_model, fit_model_from, LandmarkSet};
use faceforge::image::{Mask, RgbImage};
use faceforge::io::config::{PipelineConfig, THREADS_ENV};
use faceforge::io::dataset::{with_threads, write_augment_dataset, write_pairs_dataset};
use faceforge::io::{self, pfm, png};
use faceforge::loss::{depth_error, evaluate_losses};
use faceforge::model::MorphableModel;
use faceforge::pipeline::{albedo_stage, inverse_render, refined_normals, render_detailed, InverseRendering};
use faceforge::raster::{render_params, render_pncc};
use faceforge::refine::{coarse_depth, refine_displacement, DepthField};
use faceforge::synthesis::{fit_delta_distribution, DeltaPoseDistribution};
use faceforge::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
use faceforge::transfer::{euler_lagrange_residual, sample_scale, synthesize_detail_sample, TransferConfig};

/// Inverse rendering of parametric 3D faces and synthetic face datasets.
#[derive(Parser)]
#[command(name = "faceforge", version)]
struct Cli {
    /// JSON configuration document; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for dataset commands.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a parameter set.
    Render(RenderArgs),
    /// Fit model, pose and lighting to an image (Stage 1).
    Fit(FitArgs),
    /// Recover a per-pixel displacement on top of a fit (Stage 2).
    Refine(RefineArgs),
    /// Extract and blend fine albedo (Stage 3).
    Albedo(AlbedoArgs),
    /// Run all three stages.
    Invrender(InvrenderArgs),
    /// Transfer detail from a source face onto a target face.
    Transfer(TransferArgs),
    /// Pose and expression variants of fitted images.
    Augment(AugmentArgs),
    /// Tracking pairs with simulated previous frames.
    SimulatePairs(PairsArgs),
    /// Projected normalized coordinate code image.
    Pncc(PnccArgs),
    /// Evaluate the training losses of an estimate against the truth.
    EvalLoss(EvalLossArgs),
    /// RMSE and MAE between two depth maps.
    DepthError(DepthErrorArgs),
    /// Generate a synthetic morphable model.
    GenModel(GenModelArgs),
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Output image (.pfm or .png).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Also write the projected model landmarks.
    #[arg(long)]
    landmarks_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    /// Initial parameters (params or fit file).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output fit file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    render_out: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Fit or params file from Stage 1.
    #[arg(long)]
    fit: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlbedoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    /// Displacement map from Stage 2 (zero when omitted).
    #[arg(long)]
    displacement: Option<PathBuf>,
    /// Landmarks locating the detail regions (uniform blend when omitted).
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvrenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    target_image: PathBuf,
    #[arg(long)]
    target_landmarks: PathBuf,
    #[arg(long)]
    source_image: PathBuf,
    #[arg(long)]
    source_landmarks: PathBuf,
    /// Gradient scale in [0.7, 1.3]; drawn from the seed when omitted.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input images; each needs a matching --landmarks file.
    #[arg(long, num_args = 1.., required = true)]
    image: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    landmarks: Vec<PathBuf>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Current-frame parameter files.
    #[arg(long, num_args = 1.., required = true)]
    params: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pairs_per_input: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Delta-pose distribution file.
    #[arg(long, conflicts_with = "fit_sequence")]
    delta: Option<PathBuf>,
    /// Fit the delta-pose distribution to this ordered sequence of parameter files.
    #[arg(long, num_args = 2..)]
    fit_sequence: Vec<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PnccArgs {
    #[arg(long)]
    model: PathBuf,
    /// Parameters supplying the pose.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Output (.pfm floats or .png raw codes).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalLossArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Input frame; adds the color loss and tracking total.
    #[arg(long)]
    frame: Option<PathBuf>,
    #[arg(long, default_value = "sample")]
    sample: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DepthErrorArgs {
    #[arg(long)]
    reconstructed: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Valid-pixel mask; all pixels when omitted.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 500)]
    vertices: usize,
    #[arg(long, default_value_t = 10)]
    k_id: usize,
    #[arg(long, default_value_t = 5)]
    k_exp: usize,
    #[arg(long, default_value_t = 10)]
    k_alb: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write a random scene (parameters) for the model.
    #[arg(long)]
    scene_out: Option<PathBuf>,
    /// Frame size the scene is composed for.
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => io::write_json(p, value),
        None => {
            print!("{}", io::to_json_string(value)?);
            Ok(())
        }
    }
}

fn load_fitted(model: &MorphableModel, image: &Path, landmarks: &Path, cfg: &PipelineConfig) -> Result<InverseRendering> {
    let img = io::read_image(image)?;
    let lms = io::read_landmarks(landmarks)?;
    inverse_render(&img, &lms, model, &cfg.inverse_rendering(), None)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    match cli.command {
        Command::GenModel(a) => {
            let m = generate_synthetic_model(cfg.seed, a.vertices, a.k_id, a.k_exp, a.k_alb)?;
            io::write_model(&a.out, &m)?;
            if let Some(p) = &a.scene_out {
                let m = io::read_model(&a.out)?;
                let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
                io::write_params(p, &random_scene(&m, &mut rng, a.width, a.height, &SceneRanges::default()))?;
            }
        }
        Command::Render(a) => {
            let model = io::read_model(&a.model)?;
            let params = io::read_params(&a.params)?;
            let bg = a.background.as_deref().map(io::read_image).transpose()?;
            let r = render_params(&model, &params, a.width, a.height, bg.as_ref())?;
            if r.raster.face_count() == 0 {
                return Err(Error::FaceOffScreen);
            }
            io::write_image(&a.out, &r.rendered.image)?;
            if let Some(p) = &a.mask_out {
                png::write_mask(p, &r.rendered.mask)?;
            }
            if let Some(p) = &a.landmarks_out {
                io::write_landmarks(p, &LandmarkSet::project(&model, &params)?)?;
            }
        }
        Command::Fit(a) => {
            let model = io::read_model(&a.model)?;
            let img = io::read_image(&a.image)?;
            let lms = io::read_landmarks(&a.landmarks)?;
            let fit = match &a.init {
                Some(p) => fit_model_from(&img, &lms, &model, &cfg.fitting, &io::read_params(p)?)?,
                None => fit_model(&img, &lms, &model, &cfg.fitting)?,
            };
            io::write_fit(&a.out, &fit)?;
            if let Some(p) = &a.render_out {
                io::write_image(p, &render_params(&model, &fit.params, img.width, img.height, Some(&img))?.rendered.image)?;
            }
        }
        Command::Refine(a) => {
            let model = io::read_model(&a.model)?;
            let img = io::read_image(&a.image)?;
            let params = io::read_params(&a.fit)?;
            let (z, raster) = coarse_depth(&model, &params, img.width, img.height)?;
            let r = refine_displacement(&img, &z, &params, &model, &cfg.refine)?;
            std::fs::create_dir_all(&a.out)?;
            let mask = &raster.mask;
            png::write_mask(&a.out.join("mask.png"), mask)?;
            pfm::write_scalar(&a.out.join("depth.pfm"), &io::masked_scalar(&r.field.z, mask))?;
            pfm::write_scalar(&a.out.join("displacement.pfm"), &io::masked_scalar(&r.field.d, mask))?;
            pfm::write_scalar(&a.out.join("refined_depth.pfm"), &io::masked_scalar(&r.field.refined(), mask))?;
            io::write_json(&a.out.join("refine_trace.json"), &r.trace)?;
        }
        Command::Albedo(a) => {
            let model = io::read_model(&a.model)?;
            let img = io::read_image(&a.image)?;
            let params = io::read_params(&a.fit)?;
            let (z, raster) = coarse_depth(&model, &params, img.width, img.height)?;
            let mut field = DepthField::new(z, raster.mask.clone())?;
            if let Some(p) = &a.displacement {
                let d = pfm::read_scalar(p)?;
                field.z.check_size(&d, "displacement")?;
                for (i, v) in d.data.iter().enumerate() {
                    field.d.data[i] = if raster.mask.data[i] && v.is_finite() { *v } else { 0.0 };
                }
            }
            let lms = a.landmarks.as_deref().map(io::read_landmarks).transpose()?;
            let normals = refined_normals(&field, params.pose.scale)?;
            let st = albedo_stage(&img, &model, &params, &raster, &normals, lms.as_ref(), cfg.transition_width)?;
            std::fs::create_dir_all(&a.out)?;
            pfm::write_rgb(&a.out.join("albedo_coarse.pfm"), &st.coarse)?;
            pfm::write_rgb(&a.out.join("albedo_fine.pfm"), &st.fine.albedo)?;
            png::write_mask(&a.out.join("low_confidence.png"), &st.fine.low_confidence)?;
            pfm::write_scalar(&a.out.join("beta.pfm"), &st.beta.beta)?;
            io::write_image_pair(&a.out, "albedo", &st.blended)?;
            io::write_image_pair(&a.out, "render", &render_detailed(&raster, &st.blended, &normals, &params, Some(&img))?)?;
        }
        Command::Invrender(a) => {
            let model = io::read_model(&a.model)?;
            let img = io::read_image(&a.image)?;
            let lms = io::read_landmarks(&a.landmarks)?;
            let init = a.init.as_deref().map(io::read_params).transpose()?;
            let ir = inverse_render(&img, &lms, &model, &cfg.inverse_rendering(), init.as_ref())?;
            let summary = io::write_inverse_rendering(&a.out, &model, &ir)?;
            emit(None, &summary)?;
        }
        Command::Transfer(a) => {
            let model = io::read_model(&a.model)?;
            let target = load_fitted(&model, &a.target_image, &a.target_landmarks, &cfg)?;
            let source = load_fitted(&model, &a.source_image, &a.source_landmarks, &cfg)?;
            let scale = match a.scale {
                Some(s) => s,
                None => sample_scale(&mut ChaCha20Rng::seed_from_u64(cfg.seed)),
            };
            let tc = TransferConfig { scale, ..cfg.transfer };
            let s = synthesize_detail_sample(&model, &target, &source, &tc, Some(cfg.seed))?;
            std::fs::create_dir_all(&a.out)?;
            io::write_image_pair(&a.out, "image", &s.image)?;
            png::write_mask(&a.out.join("mask.png"), &s.mask)?;
            pfm::write_scalar(&a.out.join("depth.pfm"), &io::masked_scalar(&s.coarse_depth, &s.mask))?;
            pfm::write_scalar(&a.out.join("displacement.pfm"), &io::masked_scalar(&s.displacement, &s.mask))?;
            png::write_mask(&a.out.join("omega.png"), &s.correspondence.omega)?;
            io::write_params(&a.out.join("params.json"), &s.params)?;
            #[derive(Serialize)]
            struct Meta<'a> {
                #[serde(flatten)]
                meta: &'a faceforge::transfer::DetailMeta,
                euler_lagrange_residual: f64,
            }
            let el = euler_lagrange_residual(&s.displacement, &source.field.d, &s.correspondence, scale);
            io::write_json(&a.out.join("meta.json"), &Meta { meta: &s.meta, euler_lagrange_residual: el })?;
        }
        Command::Augment(a) => {
            if a.image.len() != a.landmarks.len() {
                return Err(Error::InvalidArgument("each --image needs one --landmarks file".into()));
            }
            let model = io::read_model(&a.model)?;
            let mut spec = cfg.augmentation;
            if let Some(v) = a.variants {
                spec.variants = v;
            }
            spec.validate()?;
            let jobs: Vec<(&PathBuf, &PathBuf)> = a.image.iter().zip(&a.landmarks).collect();
            let fitted: Vec<Result<(String, InverseRendering)>> = with_threads(cfg.threads, || {
                use rayon::prelude::*;
                jobs.par_iter()
                    .map(|(i, l)| Ok((i.display().to_string(), load_fitted(&model, i, l, &cfg)?)))
                    .collect()
            })?;
            let fitted: Vec<(String, InverseRendering)> = fitted.into_iter().collect::<Result<_>>()?;
            let m = write_augment_dataset(&a.out, &model, &fitted, &spec, cfg.seed, cfg.threads)?;
            log::info!("{} samples written, {} skipped", m.samples.len(), m.skipped.len());
        }
        Command::SimulatePairs(a) => {
            let model = io::read_model(&a.model)?;
            let inputs: Vec<_> = a
                .params
                .iter()
                .map(|p| Ok((p.display().to_string(), io::read_params(p)?)))
                .collect::<Result<_>>()?;
            let dist = if let Some(p) = &a.delta {
                io::read_json::<DeltaPoseDistribution>(p)?
            } else if !a.fit_sequence.is_empty() {
                let poses: Vec<_> = a.fit_sequence.iter().map(|p| Ok(io::read_params(p)?.pose)).collect::<Result<_>>()?;
                fit_delta_distribution(&poses)?
            } else {
                cfg.delta_distribution()
            };
            let bg = match &a.background {
                Some(p) => io::read_image(p)?,
                None => RgbImage::filled(a.width, a.height, [0.0; 3]),
            };
            write_pairs_dataset(&a.out, &model, &inputs, a.pairs_per_input, &dist, &bg, cfg.seed, cfg.threads)?;
        }
        Command::Pncc(a) => {
            let model = io::read_model(&a.model)?;
            let params = io::read_params(&a.params)?;
            params.pose.validate()?;
            let r = render_pncc(&model, &params.pose, a.width, a.height);
            match a.out.extension().and_then(|e| e.to_str()) {
                Some("png") => png::write_rgb_raw(&a.out, &r.image)?,
                _ => pfm::write_rgb(&a.out, &r.image)?,
            }
        }
        Command::EvalLoss(a) => {
            let model = io::read_model(&a.model)?;
            let truth = io::read_params(&a.truth)?;
            let est = io::read_params(&a.estimate)?;
            let frame = a.frame.as_deref().map(io::read_image).transpose()?;
            let r = evaluate_losses(&model, &a.sample, &truth, &est, a.width, a.height, frame.as_ref())?;
            emit(a.out.as_deref(), &r)?;
        }
        Command::DepthError(a) => {
            let rec = pfm::read_scalar(&a.reconstructed)?;
            let reference = pfm::read_scalar(&a.reference)?;
            let mask = match &a.mask {
                Some(p) => png::read_mask(p)?,
                None => Mask::filled(rec.width, rec.height, true),
            };
            emit(a.out.as_deref(), &depth_error(&rec, &reference, &mask)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = io::ErrorReport::from_error(&e);
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(1)
        }
    }
}

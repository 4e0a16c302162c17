//! Dataset directories: `manifest.json` plus one directory per sample under
//! `samples/`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::model::{assemble_albedo, FaceParams, MorphableModel};
use crate::pipeline::InverseRendering;
use crate::synthesis::{
    augment_variant, sample_rng, simulate_pair, vertex_albedo_from_image, AugmentationSpec, BackgroundMode,
    DeltaPoseDistribution, LabeledSample,
};

use super::pfm::Pfm;
use super::{pfm, png, read_json, read_params, write_json, write_params};

pub const DATASET_FORMAT: &str = "faceforge-ds/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Augment,
    SimulatePairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Index into the manifest's `inputs`.
    pub source: usize,
    pub stream: u64,
    pub retries: usize,
    pub background: BackgroundMode,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub inputs: Vec<String>,
    pub augmentation: Option<AugmentationSpec>,
    pub delta_pose: Option<DeltaPoseDistribution>,
    pub samples: Vec<SampleEntry>,
    /// Streams whose variant was skipped as off-screen.
    pub skipped: Vec<u64>,
}

pub const MANIFEST: &str = "manifest.json";

/// Runs `f` on a pool of `threads` workers, or the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => invalid("thread count must be at least 1"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn sample_id(stream: u64) -> String {
    format!("{stream:06}")
}

fn write_vertex_albedo(path: &Path, v: &DVector<f64>) -> Result<()> {
    let p = Pfm { width: v.len() / 3, height: 1, channels: 3, data: v.iter().map(|&x| x as f32).collect() };
    fs::write(path, p.encode())?;
    Ok(())
}

fn read_vertex_albedo(path: &Path) -> Result<DVector<f64>> {
    let p = pfm::read(path)?;
    if p.channels != 3 || p.height != 1 {
        return Err(Error::Format(format!("{} is not a vertex albedo map", path.display())));
    }
    Ok(DVector::from_iterator(p.data.len(), p.data.iter().map(|&x| x as f64)))
}

/// Writes one sample directory; returns the file names written.
pub fn write_sample(dir: &Path, sample: &LabeledSample) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = vec!["image.pfm", "image.png", "mask.png", "params.json", "background.pfm"];
    pfm::write_rgb(&dir.join("image.pfm"), &sample.image)?;
    png::write_rgb(&dir.join("image.png"), &sample.image)?;
    png::write_mask(&dir.join("mask.png"), &sample.mask)?;
    write_params(&dir.join("params.json"), &sample.params)?;
    pfm::write_rgb(&dir.join("background.pfm"), &sample.background)?;
    if let Some(v) = &sample.vertex_albedo {
        write_vertex_albedo(&dir.join("vertex_albedo.pfm"), v)?;
        files.push("vertex_albedo.pfm");
    }
    if let Some(p) = &sample.pncc {
        pfm::write_rgb(&dir.join("pncc.pfm"), p)?;
        png::write_rgb_raw(&dir.join("pncc.png"), p)?;
        files.extend(["pncc.pfm", "pncc.png"]);
    }
    if let Some(p) = &sample.prev_params {
        write_params(&dir.join("prev_params.json"), p)?;
        files.push("prev_params.json");
    }
    Ok(files.into_iter().map(String::from).collect())
}

/// Reads a sample directory back (the mask comes from `mask.png`).
pub fn read_sample(dir: &Path) -> Result<LabeledSample> {
    let opt = |name: &str| -> Option<PathBuf> {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    Ok(LabeledSample {
        image: pfm::read_rgb(&dir.join("image.pfm"))?,
        mask: png::read_mask(&dir.join("mask.png"))?,
        params: read_params(&dir.join("params.json"))?,
        vertex_albedo: opt("vertex_albedo.pfm").map(|p| read_vertex_albedo(&p)).transpose()?,
        background: pfm::read_rgb(&dir.join("background.pfm"))?,
        background_mode: BackgroundMode::Flat,
        pncc: opt("pncc.pfm").map(|p| pfm::read_rgb(&p)).transpose()?,
        prev_params: opt("prev_params.json").map(|p| read_params(&p)).transpose()?,
        retries: 0,
    })
}

fn finish(out: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_json(&out.join(MANIFEST), manifest)
}

/// Pose/expression variants of every fitted input. Input `i`, variant `v`
/// draws from stream `i * variants + v` of `seed`.
pub fn write_augment_dataset(
    out: &Path,
    model: &MorphableModel,
    inputs: &[(String, InverseRendering)],
    spec: &AugmentationSpec,
    seed: u64,
    threads: Option<usize>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let Some((_, first)) = inputs.first() else {
        return invalid("augment needs at least one input");
    };
    let (w, h) = (first.image.width, first.image.height);
    fs::create_dir_all(out.join("samples"))?;
    let albedos: Vec<DVector<f64>> = inputs
        .iter()
        .map(|(_, f)| {
            let b = assemble_albedo(model, &f.params().alpha_alb)?;
            vertex_albedo_from_image(&f.raster, &model.triangles, &b, &f.blended_albedo)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..inputs.len())
        .flat_map(|i| (0..spec.variants).map(move |v| (i, (i * spec.variants + v) as u64)))
        .collect();
    let results: Vec<Result<Option<SampleEntry>>> = with_threads(threads, || {
        jobs.par_iter()
            .map(|&(i, stream)| {
                let fitted = &inputs[i].1;
                let s = augment_variant(model, fitted.params(), &albedos[i], &fitted.image, spec, sample_rng(seed, stream))?;
                let Some(s) = s else { return Ok(None) };
                let id = sample_id(stream);
                let files = write_sample(&out.join("samples").join(&id), &s)?;
                Ok(Some(SampleEntry { id, source: i, stream, retries: s.retries, background: s.background_mode, files }))
            })
            .collect()
    })?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        kind: DatasetKind::Augment,
        seed,
        width: w,
        height: h,
        inputs: inputs.iter().map(|(n, _)| n.clone()).collect(),
        augmentation: Some(*spec),
        delta_pose: None,
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    for (r, &(_, stream)) in results.into_iter().zip(&jobs) {
        match r? {
            Some(e) => manifest.samples.push(e),
            None => manifest.skipped.push(stream),
        }
    }
    finish(out, &manifest)?;
    Ok(manifest)
}

/// Tracking pairs: `per_input` simulated previous frames for each input
/// parameter set, rendered over `background`. Pair `j` of input `i` uses
/// stream `i * per_input + j`.
pub fn write_pairs_dataset(
    out: &Path,
    model: &MorphableModel,
    inputs: &[(String, FaceParams)],
    per_input: usize,
    dist: &DeltaPoseDistribution,
    background: &RgbImage,
    seed: u64,
    threads: Option<usize>,
) -> Result<DatasetManifest> {
    dist.validate()?;
    if inputs.is_empty() || per_input == 0 {
        return invalid("simulate-pairs needs at least one input and one pair per input");
    }
    for (_, p) in inputs {
        p.validate_for(model)?;
    }
    fs::create_dir_all(out.join("samples"))?;
    let jobs: Vec<(usize, u64)> =
        (0..inputs.len()).flat_map(|i| (0..per_input).map(move |j| (i, (i * per_input + j) as u64))).collect();
    let results: Vec<Result<SampleEntry>> = with_threads(threads, || {
        jobs.par_iter()
            .map(|&(i, stream)| {
                let mut rng = sample_rng(seed, stream);
                let s = simulate_pair(model, &inputs[i].1, background, dist, &mut rng)?;
                let id = sample_id(stream);
                let files = write_sample(&out.join("samples").join(&id), &s)?;
                Ok(SampleEntry { id, source: i, stream, retries: 0, background: s.background_mode, files })
            })
            .collect()
    })?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        kind: DatasetKind::SimulatePairs,
        seed,
        width: background.width,
        height: background.height,
        inputs: inputs.iter().map(|(n, _)| n.clone()).collect(),
        augmentation: None,
        delta_pose: Some(*dist),
        samples: results.into_iter().collect::<Result<_>>()?,
        skipped: Vec::new(),
    };
    finish(out, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub samples: usize,
    pub consistent: usize,
    pub pncc_checked: usize,
    pub pncc_in_range: usize,
    pub max_rmse: f64,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty() && self.consistent == self.samples && self.pncc_in_range == self.pncc_checked
    }
}

/// Re-renders every sample from its stored labels and checks the RMSE to
/// the stored image against `tolerance`, and that PNCC values lie in [0, 1].
pub fn verify_dataset(root: &Path, model: &MorphableModel, tolerance: f64) -> Result<VerifyReport> {
    let manifest: DatasetManifest = read_json(&root.join(MANIFEST))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format '{}'", manifest.format)));
    }
    let mut report = VerifyReport {
        samples: manifest.samples.len(),
        consistent: 0,
        pncc_checked: 0,
        pncc_in_range: 0,
        max_rmse: 0.0,
        failures: Vec::new(),
    };
    for e in &manifest.samples {
        let s = read_sample(&root.join("samples").join(&e.id))?;
        let rmse = s.rerender_rmse(model)?;
        report.max_rmse = report.max_rmse.max(rmse);
        if rmse < tolerance {
            report.consistent += 1;
        } else {
            report.failures.push(format!("{}: re-render rmse {rmse:e}", e.id));
        }
        if let Some(p) = &s.pncc {
            report.pncc_checked += 1;
            if p.data.iter().flatten().all(|v| (0.0..=1.0).contains(v)) {
                report.pncc_in_range += 1;
            } else {
                report.failures.push(format!("{}: pncc outside [0, 1]", e.id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic_model, random_scene, SceneRanges};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(m: &MorphableModel) -> Vec<(String, FaceParams)> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..2).map(|i| (format!("p{i}"), random_scene(m, &mut rng, 40, 40, &SceneRanges::default()))).collect()
    }

    #[test]
    fn pairs_dataset_verifies_and_regenerates_identically() {
        let m = generate_synthetic_model(6, 200, 4, 3, 4).unwrap();
        let bg = RgbImage::filled(40, 40, [0.3; 3]);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let d = DeltaPoseDistribution::default();
        let ma = write_pairs_dataset(a.path(), &m, &inputs(&m), 3, &d, &bg, 4, Some(2)).unwrap();
        write_pairs_dataset(b.path(), &m, &inputs(&m), 3, &d, &bg, 4, Some(1)).unwrap();
        assert_eq!(ma.samples.len(), 6);
        assert_eq!(fs::read(a.path().join(MANIFEST)).unwrap(), fs::read(b.path().join(MANIFEST)).unwrap());
        for e in &ma.samples {
            for f in &e.files {
                let p = Path::new("samples").join(&e.id).join(f);
                assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap(), "{p:?}");
            }
        }
        let r = verify_dataset(a.path(), &m, 1e-6).unwrap();
        assert!(r.all_passed(), "{r:?}");
        assert_eq!(r.pncc_checked, 6);
    }

    #[test]
    fn tampered_labels_fail_verification() {
        let m = generate_synthetic_model(6, 200, 4, 3, 4).unwrap();
        let bg = RgbImage::filled(40, 40, [0.3; 3]);
        let dir = tempfile::tempdir().unwrap();
        let man = write_pairs_dataset(dir.path(), &m, &inputs(&m), 1, &DeltaPoseDistribution::zero(), &bg, 0, None).unwrap();
        let p = dir.path().join("samples").join(&man.samples[0].id).join("params.json");
        let mut params = read_params(&p).unwrap();
        params.pose.yaw += 0.2;
        write_params(&p, &params).unwrap();
        let r = verify_dataset(dir.path(), &m, 1e-6).unwrap();
        assert!(!r.all_passed());
        assert_eq!(r.consistent, 1);
    }
}

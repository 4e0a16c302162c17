//! The three-stage inverse rendering pipeline: coarse fit, depth
//! refinement, albedo blending.

use serde::{Deserialize, Serialize};

use crate::albedo::{
    blend_albedo, build_beta_map, coarse_albedo, fine_albedo, BlendWeightMap, DetailLandmarks, FineAlbedo,
    DEFAULT_TRANSITION_WIDTH,
};
use crate::error::Result;
use crate::fitting::{fit_model, fit_model_from, FitResult, FittingConfig, LandmarkSet};
use crate::image::{masked_rmse, NormalMap, RgbImage};
use crate::model::{assemble_albedo, FaceParams, MorphableModel};
use crate::raster::{normals_with_support, render_face, render_params, AlbedoSource, NormalSource, NormalSupport, RasterMap};
use crate::refine::{coarse_depth, refine_displacement, DepthField, RefineConfig, RefineEnergy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseRenderingConfig {
    pub fitting: FittingConfig,
    pub refine: RefineConfig,
    /// Width in pixels of the blend-weight ramp around detail regions.
    pub transition_width: f64,
}

impl Default for InverseRenderingConfig {
    fn default() -> Self {
        InverseRenderingConfig {
            fitting: FittingConfig::default(),
            refine: RefineConfig::default(),
            transition_width: DEFAULT_TRANSITION_WIDTH,
        }
    }
}

/// Face-region RMSE of the re-render after each stage, all measured on the
/// Stage-1 face mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageErrors {
    pub coarse: f64,
    pub refined: f64,
    pub blended: f64,
}

#[derive(Debug, Clone)]
pub struct InverseRendering {
    pub image: RgbImage,
    pub fit: FitResult,
    pub raster: RasterMap,
    pub field: DepthField,
    pub refine_trace: Vec<RefineEnergy>,
    pub normals: NormalMap,
    pub coarse_albedo: RgbImage,
    pub fine: FineAlbedo,
    pub beta: BlendWeightMap,
    pub blended_albedo: RgbImage,
    pub errors: StageErrors,
}

impl InverseRendering {
    pub fn params(&self) -> &FaceParams {
        &self.fit.params
    }

    /// Re-render with refined normals and blended albedo over the input.
    pub fn render(&self) -> Result<RgbImage> {
        render_detailed(&self.raster, &self.blended_albedo, &self.normals, self.params(), Some(&self.image))
    }
}

/// Shades the face pixels of `raster` from per-pixel albedo and normals.
pub fn render_detailed(
    raster: &RasterMap,
    albedo: &RgbImage,
    normals: &NormalMap,
    params: &FaceParams,
    background: Option<&RgbImage>,
) -> Result<RgbImage> {
    Ok(render_face(raster, &[], AlbedoSource::PerPixel(albedo), NormalSource::PerPixel(normals), &params.illum, background)?.image)
}

/// Stage-3 outputs for one image.
#[derive(Debug, Clone)]
pub struct AlbedoStage {
    pub coarse: RgbImage,
    pub fine: FineAlbedo,
    pub beta: BlendWeightMap,
    pub blended: RgbImage,
}

/// Normals of `z + d` on the face mask.
pub fn refined_normals(field: &DepthField, pixels_per_unit: f64) -> Result<NormalMap> {
    let support = NormalSupport::new(&field.mask)?;
    Ok(normals_with_support(&field.refined(), &support, pixels_per_unit))
}

/// Coarse, fine and blended albedo for a fitted face with refined normals.
/// Without landmarks the blend weight is uniform.
pub fn albedo_stage(
    image: &RgbImage,
    model: &MorphableModel,
    params: &FaceParams,
    raster: &RasterMap,
    normals: &NormalMap,
    landmarks: Option<&LandmarkSet>,
    transition_width: f64,
) -> Result<AlbedoStage> {
    let vertex_albedo = assemble_albedo(model, &params.alpha_alb)?;
    let coarse = coarse_albedo(raster, model, &vertex_albedo);
    let fine = fine_albedo(image, normals, &params.illum, &raster.mask)?;
    let detail = landmarks.and_then(|l| DetailLandmarks::from_layout(&model.landmark_layout, l));
    let beta = build_beta_map(detail.as_ref(), &raster.mask, transition_width)?;
    let blended = blend_albedo(&coarse, &fine, &beta)?;
    Ok(AlbedoStage { coarse, fine, beta, blended })
}

/// Runs all three stages. Without `init`, Stage 1 starts from the mean face
/// and a landmark pose estimate.
pub fn inverse_render(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    config: &InverseRenderingConfig,
    init: Option<&FaceParams>,
) -> Result<InverseRendering> {
    let fit = match init {
        Some(p) => fit_model_from(image, landmarks, model, &config.fitting, p)?,
        None => fit_model(image, landmarks, model, &config.fitting)?,
    };
    let params = &fit.params;
    let coarse = render_params(model, params, image.width, image.height, None)?;
    let (z, raster) = coarse_depth(model, params, image.width, image.height)?;
    let refined = refine_displacement(image, &z, params, model, &config.refine)?;
    let normals = refined_normals(&refined.field, params.pose.scale)?;
    let stage = albedo_stage(image, model, params, &raster, &normals, Some(landmarks), config.transition_width)?;

    let mask = &raster.mask;
    let errors = StageErrors {
        coarse: masked_rmse(&coarse.rendered.image, image, mask)?,
        refined: masked_rmse(&render_detailed(&raster, &stage.coarse, &normals, params, None)?, image, mask)?,
        blended: masked_rmse(&render_detailed(&raster, &stage.blended, &normals, params, None)?, image, mask)?,
    };
    Ok(InverseRendering {
        image: image.clone(),
        fit,
        raster,
        field: refined.field,
        refine_trace: refined.trace,
        normals,
        coarse_albedo: stage.coarse,
        fine: stage.fine,
        beta: stage.beta,
        blended_albedo: stage.blended,
        errors,
    })
}

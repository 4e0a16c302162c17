//! Single-document JSON configuration for the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fitting::FittingConfig;
use crate::pipeline::InverseRenderingConfig;
use crate::refine::RefineConfig;
use crate::synthesis::{AugmentationSpec, DeltaPoseDistribution};
use crate::transfer::TransferConfig;

pub const THREADS_ENV: &str = "FACEFORGE_THREADS";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub landmarks: Vec<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub fitting: FittingConfig,
    pub refine: RefineConfig,
    pub transfer: TransferConfig,
    pub augmentation: AugmentationSpec,
    /// Replaces the built-in delta-pose placeholder when set.
    pub delta_pose: Option<DeltaPoseDistribution>,
    pub transition_width: f64,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ir = InverseRenderingConfig::default();
        PipelineConfig {
            paths: Paths::default(),
            fitting: ir.fitting,
            refine: ir.refine,
            transfer: TransferConfig::default(),
            augmentation: AugmentationSpec::default(),
            delta_pose: None,
            transition_width: ir.transition_width,
            seed: 0,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: PipelineConfig = super::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.fitting.validate()?;
        self.refine.validate()?;
        self.transfer.validate()?;
        self.augmentation.validate()?;
        if let Some(d) = &self.delta_pose {
            d.validate()?;
        }
        if !(self.transition_width >= 0.0) {
            return invalid("transition_width must be non-negative");
        }
        if self.threads == Some(0) {
            return invalid("threads must be at least 1");
        }
        Ok(())
    }

    pub fn inverse_rendering(&self) -> InverseRenderingConfig {
        InverseRenderingConfig { fitting: self.fitting, refine: self.refine, transition_width: self.transition_width }
    }

    pub fn delta_distribution(&self) -> DeltaPoseDistribution {
        self.delta_pose.unwrap_or_default()
    }
}

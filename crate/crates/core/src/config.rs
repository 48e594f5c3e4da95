//! The run configuration file: one JSON document with a section per stage.
//! Every field has a default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Architecture, TrainHyper};
use crate::error::{Error, Result};
use crate::hyperband::{FinalizeOptions, HyperBandParams, SearchSpace};
use crate::phantom::DatasetSpec;
use crate::stream::StreamOptions;
use crate::trajgen::{
    assemble_trajectory, radial_trajectory, uniform_spiral, GradientSystem, SpiralConfig, Trajectory,
};

/// Radial spokes per frame at the spiral's temporal resolution.
pub const RADIAL_SPOKES: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Variable-density spiral from `spiral`.
    Spiral,
    /// Uniform-density spiral with the spiral's TR and ordering.
    Uniform,
    Radial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub kind: TrajectoryKind,
    pub spiral: SpiralConfig,
    pub radial_spokes: usize,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        TrajectorySection { kind: TrajectoryKind::Spiral, spiral: SpiralConfig::optimized(), radial_spokes: RADIAL_SPOKES }
    }
}

impl TrajectorySection {
    pub fn build(&self, sys: &GradientSystem, n_frames: usize) -> Result<Trajectory> {
        build_trajectory(self.kind, &self.spiral, self.radial_spokes, sys, n_frames)
    }
}

/// The spiral, or one of the two baselines matched to it.
pub fn build_trajectory(
    kind: TrajectoryKind,
    spiral: &SpiralConfig,
    radial_spokes: usize,
    sys: &GradientSystem,
    n_frames: usize,
) -> Result<Trajectory> {
    match kind {
        TrajectoryKind::Spiral => {
            spiral.validate()?;
            assemble_trajectory(spiral, sys, n_frames)
        }
        TrajectoryKind::Uniform => uniform_spiral(sys, spiral.tr_ms, spiral.t_acq_ms, spiral.ordering, n_frames),
        TrajectoryKind::Radial => radial_trajectory(sys, radial_spokes, n_frames),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub arch: Architecture,
    pub hyper: TrainHyper,
    /// Epochs for `train` and for the final retraining after a search.
    pub final_training: FinalizeOptions,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            arch: Architecture::default(),
            hyper: TrainHyper { windows_per_series: Some(2), crop: Some(32), ..Default::default() },
            final_training: FinalizeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperBandSection {
    pub params: HyperBandParams,
    pub space: SearchSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: GradientSystem,
    pub dataset: DatasetSpec,
    pub trajectory: TrajectorySection,
    pub training: TrainingSection,
    pub hyperband: HyperBandSection,
    pub stream: StreamOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: GradientSystem::desk(96),
            dataset: DatasetSpec::default(),
            trajectory: TrajectorySection::default(),
            training: TrainingSection::default(),
            hyperband: HyperBandSection::default(),
            stream: StreamOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.system.matrix != self.dataset.matrix {
            return Err(Error::Config(format!(
                "system.matrix {} differs from dataset.matrix {}",
                self.system.matrix, self.dataset.matrix
            )));
        }
        if self.dataset.matrix % 4 != 0 {
            return Err(Error::IndivisibleDims { h: self.dataset.matrix, w: self.dataset.matrix });
        }
        self.training.hyper.validate()?;
        self.hyperband.params.validate()?;
        if self.trajectory.kind == TrajectoryKind::Spiral {
            self.trajectory.spiral.validate()?;
        }
        Ok(())
    }
}

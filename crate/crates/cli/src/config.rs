use std::path::Path;

use serde::{Deserialize, Serialize};
use virtual_markers::archetypal::FitOptions;
use virtual_markers::dataset::SynthConfig;
use virtual_markers::heatmap::VoxelGrid;
use virtual_markers::reconstruction::AdapterTrainConfig;
use virtual_markers::Point3;

use crate::CliError;

/// Parameters for every command, read from one JSON file. Missing sections and
/// fields take their defaults. The global seed replaces the seeds inside `fit`
/// and `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub fit: FitOptions,
    pub ablation: AblationConfig,
    pub heatmap: HeatmapConfig,
    pub train: AdapterTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub k_values: Vec<usize>,
    /// Random marker sets drawn per K.
    pub random_sets: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            k_values: vec![8, 16, 32, 64],
            random_sets: 5,
        }
    }
}

/// Heatmap simulation used to produce marker estimates from ground truth.
/// Lengths in voxels are converted with the grid's voxel size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub grid_dim: usize,
    /// Edge length of the cubic grid in mm.
    pub extent_mm: f64,
    pub center: Point3,
    pub sigma_voxels: f64,
    /// Fraction of markers corrupted in every sample.
    pub corrupt_fraction: f64,
    pub offset_voxels: f64,
    pub lambda_flat: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            grid_dim: 64,
            extent_mm: 2000.0,
            center: [0.0; 3],
            sigma_voxels: 2.0,
            corrupt_fraction: 0.25,
            offset_voxels: 2.0,
            lambda_flat: 0.5,
        }
    }
}

impl HeatmapConfig {
    pub fn grid(&self) -> Result<VoxelGrid, CliError> {
        Ok(VoxelGrid::cube(self.grid_dim, self.extent_mm, self.center)?)
    }

    pub fn voxel_mm(&self) -> f64 {
        self.extent_mm / self.grid_dim as f64
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.grid()?;
        let bad = |what: &str| Err(CliError::Usage(format!("heatmap.{what} out of range")));
        if !(self.sigma_voxels > 0.0 && self.sigma_voxels.is_finite()) {
            return bad("sigma_voxels");
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return bad("corrupt_fraction");
        }
        if !(self.offset_voxels >= 0.0 && self.offset_voxels.is_finite()) {
            return bad("offset_voxels");
        }
        if !(0.0..=1.0).contains(&self.lambda_flat) {
            return bad("lambda_flat");
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fit.seed = seed;
        self.train.seed = seed;
        self
    }
}

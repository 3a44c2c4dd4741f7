use virtual_markers::archetypal::ReconstructionError;
use virtual_markers::dataset::MeshDataset;
use virtual_markers::heatmap::{estimate_markers, CorruptionSpec, MarkerEstimate};
use virtual_markers::markers::MarkerSet;
use virtual_markers::reconstruction::TrainSample;
use virtual_markers::Point3;

use crate::config::HeatmapConfig;
use crate::CliError;

/// Samples with `index % 5 == 0` are held out for evaluation.
pub fn is_eval_index(n: usize) -> bool {
    n.is_multiple_of(5)
}

/// Per-sample seed for heatmap corruption; equals the sample index for seed 0.
pub fn sample_seed(seed: u64, n: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(n as u64)
}

pub fn marker_positions(set: &MarkerSet, vertices: &[Point3]) -> Vec<Point3> {
    set.vertex_indices.iter().map(|&i| vertices[i]).collect()
}

/// Exact marker positions with full confidence.
pub fn gt_estimates(dataset: &MeshDataset, set: &MarkerSet) -> Vec<MarkerEstimate> {
    dataset
        .samples
        .iter()
        .map(|s| MarkerEstimate {
            p: marker_positions(set, &s.vertices),
            c: vec![1.0; set.k()],
        })
        .collect()
}

/// Decodes one simulated heatmap set per sample, corrupting a seeded subset of
/// markers in each.
pub fn heatmap_estimates(
    dataset: &MeshDataset,
    set: &MarkerSet,
    hm: &HeatmapConfig,
    seed: u64,
) -> Result<Vec<MarkerEstimate>, CliError> {
    hm.validate()?;
    let grid = hm.grid()?;
    let voxel = hm.voxel_mm();
    let k = set.k();
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let s_seed = sample_seed(seed, n);
            let corruption = if hm.corrupt_fraction > 0.0 {
                CorruptionSpec::random_subset(k, hm.corrupt_fraction, hm.offset_voxels * voxel, hm.lambda_flat, s_seed)
            } else {
                CorruptionSpec::none()
            };
            let gt = marker_positions(set, &s.vertices);
            Ok(estimate_markers(&gt, &grid, hm.sigma_voxels * voxel, &corruption, s_seed)?)
        })
        .collect()
}

/// Splits estimates and meshes into (train, eval) by sample index.
pub fn split_samples(dataset: &MeshDataset, estimates: &[MarkerEstimate]) -> (Vec<TrainSample>, Vec<TrainSample>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (n, (est, mesh)) in estimates.iter().zip(&dataset.samples).enumerate() {
        let s = TrainSample {
            estimate: est.clone(),
            mesh: mesh.clone(),
        };
        if is_eval_index(n) {
            eval.push(s);
        } else {
            train.push(s);
        }
    }
    (train, eval)
}

/// Root-mean-square per-vertex distance in mm for a Frobenius error over
/// `n_samples` meshes of `m` vertices.
pub fn rms_mm(frobenius_sq: f64, n_samples: usize, m: usize) -> f64 {
    (frobenius_sq / (n_samples * m) as f64).sqrt()
}

pub fn rms_of(err: &ReconstructionError, n_samples: usize, m: usize) -> f64 {
    rms_mm(err.frobenius_sq, n_samples, m)
}

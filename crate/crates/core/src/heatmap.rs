//! Volumetric marker heatmaps: a Gaussian synthesizer with corruption
//! controls, center-of-mass decoding and confidence sampling.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seeded_rng, Point3};

/// Regular grid; voxel `(d, h, w)` has its center at
/// `origin + (d + 0.5, h + 0.5, w + 0.5) * voxel_size`, with d along x,
/// h along y and w along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub origin: Point3,
    pub voxel_size: Point3,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], origin: Point3, voxel_size: Point3) -> Result<Self> {
        let g = Self { dims, origin, voxel_size };
        g.validate()?;
        Ok(g)
    }

    /// Cubic grid of `dim³` voxels spanning `extent` mm, centered on `center`.
    pub fn cube(dim: usize, extent: f64, center: Point3) -> Result<Self> {
        let size = extent / dim as f64;
        Self::new(
            [dim; 3],
            [0, 1, 2].map(|c| center[c] - extent / 2.0),
            [size; 3],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Parameter(format!("grid dims must be >= 2, got {:?}", self.dims)));
        }
        if self.voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "voxel size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat_index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn center(&self, d: usize, h: usize, w: usize) -> Point3 {
        let idx = [d, h, w];
        [0, 1, 2].map(|c| self.origin[c] + (idx[c] as f64 + 0.5) * self.voxel_size[c])
    }

    /// Continuous voxel coordinate, integer at voxel centers.
    pub fn to_voxel(&self, p: &Point3) -> Point3 {
        [0, 1, 2].map(|c| (p[c] - self.origin[c]) / self.voxel_size[c] - 0.5)
    }

    pub fn from_voxel(&self, u: &Point3) -> Point3 {
        [0, 1, 2].map(|c| self.origin[c] + (u[c] + 0.5) * self.voxel_size[c])
    }

    /// Voxel containing `p`, clamped to the grid.
    pub fn containing_voxel(&self, p: &Point3) -> [usize; 3] {
        [0, 1, 2].map(|c| {
            let f = ((p[c] - self.origin[c]) / self.voxel_size[c]).floor();
            f.clamp(0.0, (self.dims[c] - 1) as f64) as usize
        })
    }

    /// Clamps `p` into the box spanned by the voxel centers; the flag reports
    /// whether anything moved.
    pub fn clamp_to_centers(&self, p: &Point3) -> (Point3, bool) {
        let mut moved = false;
        let out = [0, 1, 2].map(|c| {
            let lo = self.origin[c] + 0.5 * self.voxel_size[c];
            let hi = self.origin[c] + (self.dims[c] as f64 - 0.5) * self.voxel_size[c];
            let v = p[c].clamp(lo, hi);
            moved |= v != p[c];
            v
        });
        (out, moved)
    }
}

/// K normalized heatmaps over one grid, stored marker-major then d, h, w.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelHeatmapSet {
    pub grid: VoxelGrid,
    pub k: usize,
    pub data: Vec<f64>,
}

impl VoxelHeatmapSet {
    pub fn new(grid: VoxelGrid, k: usize, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != k * grid.n_voxels() {
            return Err(Error::Parameter(format!(
                "heatmap data has {} values, expected K * voxels = {}",
                data.len(),
                k * grid.n_voxels()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Parameter("heatmap values must be finite and non-negative".into()));
        }
        Ok(Self { grid, k, data })
    }

    pub fn marker(&self, k: usize) -> &[f64] {
        let v = self.grid.n_voxels();
        &self.data[k * v..(k + 1) * v]
    }

    pub fn marker_mut(&mut self, k: usize) -> &mut [f64] {
        let v = self.grid.n_voxels();
        &mut self.data[k * v..(k + 1) * v]
    }

    pub fn value(&self, k: usize, d: usize, h: usize, w: usize) -> f64 {
        self.marker(k)[self.grid.flat_index(d, h, w)]
    }
}

/// Which markers get displaced and which get blended toward uniform.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub offset_markers: Vec<usize>,
    /// Displacement length in mm; the direction is drawn per marker.
    pub offset_magnitude: f64,
    pub flatten_markers: Vec<usize>,
    /// Blend factor toward the uniform heatmap, in [0, 1].
    pub lambda_flat: f64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Offsets and flattens the same randomly drawn `fraction` of K markers.
    pub fn random_subset(k: usize, fraction: f64, offset_magnitude: f64, lambda_flat: f64, seed: u64) -> Self {
        let count = ((k as f64) * fraction).round().clamp(0.0, k as f64) as usize;
        let mut rng = seeded_rng(seed, 300);
        let mut subset = sample(&mut rng, k, count).into_vec();
        subset.sort_unstable();
        Self {
            offset_markers: subset.clone(),
            offset_magnitude,
            flatten_markers: subset,
            lambda_flat,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_flat) {
            return Err(Error::Parameter(format!("lambda_flat must lie in [0, 1], got {}", self.lambda_flat)));
        }
        if !(self.offset_magnitude >= 0.0 && self.offset_magnitude.is_finite()) {
            return Err(Error::Parameter("offset magnitude must be finite and >= 0".into()));
        }
        if let Some(&i) = self.offset_markers.iter().chain(&self.flatten_markers).find(|&&i| i >= k) {
            return Err(Error::Parameter(format!("corrupted marker {i} out of range for K = {k}")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        (self.offset_markers.is_empty() || self.offset_magnitude == 0.0)
            && (self.flatten_markers.is_empty() || self.lambda_flat == 0.0)
    }
}

/// Positions (mm) and confidences in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerEstimate {
    #[serde(rename = "P")]
    pub p: Vec<Point3>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
}

impl MarkerEstimate {
    pub fn k(&self) -> usize {
        self.p.len()
    }
}

/// Gaussian centers after offsets, before clamping.
fn corrupted_centers(gt: &[Point3], corruption: &CorruptionSpec, seed: u64) -> Vec<Point3> {
    let mut centers = gt.to_vec();
    if corruption.offset_magnitude > 0.0 && !corruption.offset_markers.is_empty() {
        let mut rng = seeded_rng(seed, 301);
        // one direction per marker index so the draw does not depend on the subset
        let dirs: Vec<Point3> = (0..gt.len())
            .map(|_| loop {
                let v: Point3 = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    break v.map(|c| c / n);
                }
            })
            .collect();
        for &i in &corruption.offset_markers {
            for c in 0..3 {
                centers[i][c] += corruption.offset_magnitude * dirs[i][c];
            }
        }
    }
    centers
}

fn gaussian_volume(grid: &VoxelGrid, center: &Point3, sigma: f64, lambda_flat: f64) -> Vec<f64> {
    // separable factors, each scaled to peak 1 so narrow Gaussians cannot underflow
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let e: Vec<f64> = (0..grid.dims[c])
                .map(|i| {
                    let x = grid.origin[c] + (i as f64 + 0.5) * grid.voxel_size[c];
                    -((x - center[c]) / sigma).powi(2) / 2.0
                })
                .collect();
            let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            e.iter().map(|v| (v - top).exp()).collect()
        })
        .collect();
    let [nd, nh, _] = grid.dims;
    let mut out = Vec::with_capacity(grid.n_voxels());
    for d in 0..nd {
        for h in 0..nh {
            let dh = axes[0][d] * axes[1][h];
            out.extend(axes[2].iter().map(|w| dh * w));
        }
    }
    let total: f64 = out.iter().sum();
    let uniform = 1.0 / out.len() as f64;
    for v in out.iter_mut() {
        *v = (1.0 - lambda_flat) * (*v / total) + lambda_flat * uniform;
    }
    out
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn prepared_centers(
    gt: &[Point3],
    grid: &VoxelGrid,
    sigma: f64,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<Vec<Point3>> {
    grid.validate()?;
    check_sigma(sigma)?;
    corruption.validate(gt.len())?;
    let centers = corrupted_centers(gt, corruption, seed);
    Ok(centers
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (q, moved) = grid.clamp_to_centers(p);
            if moved {
                log::warn!("marker {k} at {p:?} lies outside the grid, clamped to {q:?}");
            }
            q
        })
        .collect())
}

fn flat_factor(corruption: &CorruptionSpec, k: usize) -> f64 {
    if corruption.flatten_markers.contains(&k) {
        corruption.lambda_flat
    } else {
        0.0
    }
}

/// One normalized isotropic Gaussian per marker, optionally offset and
/// flattened as described by `corruption`.
pub fn synthesize_heatmap(
    gt: &[Point3],
    grid: &VoxelGrid,
    sigma: f64,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<VoxelHeatmapSet> {
    let centers = prepared_centers(gt, grid, sigma, corruption, seed)?;
    let data: Vec<f64> = centers
        .par_iter()
        .enumerate()
        .map(|(k, c)| gaussian_volume(grid, c, sigma, flat_factor(corruption, k)))
        .collect::<Vec<_>>()
        .concat();
    VoxelHeatmapSet::new(*grid, gt.len(), data)
}

/// Synthesizes and decodes marker by marker without holding all K volumes.
pub fn estimate_markers(
    gt: &[Point3],
    grid: &VoxelGrid,
    sigma: f64,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<MarkerEstimate> {
    let centers = prepared_centers(gt, grid, sigma, corruption, seed)?;
    let decoded: Vec<(Point3, f64)> = centers
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let vol = gaussian_volume(grid, c, sigma, flat_factor(corruption, k));
            let p = center_of_mass(grid, &vol);
            (p, confidence_of(grid, &vol, &p))
        })
        .collect();
    Ok(MarkerEstimate {
        p: decoded.iter().map(|d| d.0).collect(),
        c: decoded.iter().map(|d| d.1).collect(),
    })
}

fn center_of_mass(grid: &VoxelGrid, vol: &[f64]) -> Point3 {
    let [nd, nh, nw] = grid.dims;
    let mut marg = [vec![0.0; nd], vec![0.0; nh], vec![0.0; nw]];
    for d in 0..nd {
        for h in 0..nh {
            let row = &vol[(d * nh + h) * nw..(d * nh + h + 1) * nw];
            let s: f64 = row.iter().sum();
            marg[0][d] += s;
            marg[1][h] += s;
            for (w, v) in row.iter().enumerate() {
                marg[2][w] += v;
            }
        }
    }
    let u = [0, 1, 2].map(|c| {
        let total: f64 = marg[c].iter().sum();
        let moment: f64 = marg[c].iter().enumerate().map(|(i, m)| i as f64 * m).sum();
        if total > 0.0 {
            moment / total
        } else {
            (grid.dims[c] - 1) as f64 / 2.0
        }
    });
    grid.from_voxel(&u)
}

/// Center of mass of every marker heatmap, in mm.
pub fn soft_argmax(hm: &VoxelHeatmapSet) -> Vec<Point3> {
    (0..hm.k)
        .into_par_iter()
        .map(|k| center_of_mass(&hm.grid, hm.marker(k)))
        .collect()
}

fn trilinear(grid: &VoxelGrid, vol: &[f64], p: &Point3) -> f64 {
    let u = grid.to_voxel(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for c in 0..3 {
        let top = (grid.dims[c] - 1) as f64;
        let x = u[c].clamp(0.0, top);
        let i = x.floor().min(top - 1.0);
        base[c] = i as usize;
        frac[c] = x - i;
    }
    let mut s = 0.0;
    for corner in 0..8 {
        let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut wgt = 1.0;
        for c in 0..3 {
            wgt *= if off[c] == 1 { frac[c] } else { 1.0 - frac[c] };
        }
        if wgt != 0.0 {
            s += wgt * vol[grid.flat_index(base[0] + off[0], base[1] + off[1], base[2] + off[2])];
        }
    }
    s
}

fn confidence_of(grid: &VoxelGrid, vol: &[f64], p: &Point3) -> f64 {
    let top = vol.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0.0;
    }
    (trilinear(grid, vol, p) / top).clamp(0.0, 1.0)
}

/// Trilinearly interpolated heatmap value of marker `k` at `p`, positions
/// outside the voxel-center box being clamped onto it.
pub fn sample_raw_score(hm: &VoxelHeatmapSet, k: usize, p: &Point3) -> f64 {
    trilinear(&hm.grid, hm.marker(k), p)
}

/// Interpolated heatmap score at each position divided by that marker's peak
/// voxel value.
pub fn sample_confidence(hm: &VoxelHeatmapSet, p: &[Point3]) -> Result<Vec<f64>> {
    if p.len() != hm.k {
        return Err(Error::Parameter(format!("{} positions for {} heatmaps", p.len(), hm.k)));
    }
    Ok((0..hm.k)
        .into_par_iter()
        .map(|k| confidence_of(&hm.grid, hm.marker(k), &p[k]))
        .collect())
}

pub fn decode(hm: &VoxelHeatmapSet) -> MarkerEstimate {
    let p = soft_argmax(hm);
    let c = (0..hm.k)
        .into_par_iter()
        .map(|k| confidence_of(&hm.grid, hm.marker(k), &p[k]))
        .collect();
    MarkerEstimate { p, c }
}

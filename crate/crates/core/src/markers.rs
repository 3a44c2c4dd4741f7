//! Vertex-anchored virtual markers: snapping archetypes onto mesh vertices,
//! left/right symmetrization, coefficient refitting and the baselines used in
//! ablations.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archetypal::{factorization_error, indicator_matrix, ArchetypeModel, ReconstructionError};
use crate::dataset::{DataMatrix, MeshSample, Side, SymmetricPairing};
use crate::error::{Error, Result};
use crate::simplex::{solve_gram, SolverOptions};
use crate::vmat::{load_vmat, save_vmat};
use crate::{seeded_rng, Point3};

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    pub vertex_indices: Vec<usize>,
    /// M×K indicator matrix, column j selects `vertex_indices[j]`.
    pub b_sym: DMatrix<f64>,
    /// K×M coefficients, columns in Δ_K.
    pub a_sym: DMatrix<f64>,
    pub template_positions: Vec<Point3>,
    /// Marker vertices lying on the midline of the template.
    pub midline: Vec<usize>,
}

impl MarkerSet {
    pub fn k(&self) -> usize {
        self.vertex_indices.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.a_sym.ncols()
    }

    /// Marker trajectories `X B`, one 3N-column per marker.
    pub fn trajectories(&self, x: &DataMatrix) -> DMatrix<f64> {
        x.x.select_columns(&self.vertex_indices)
    }

    /// Error of reconstructing `X` from the marker trajectories with `A_sym`.
    pub fn refit_error(&self, x: &DataMatrix) -> Result<ReconstructionError> {
        check_indices(&self.vertex_indices, x.n_vertices)?;
        factorization_error(x, &self.trajectories(x), &self.a_sym)
    }

    fn from_parts(indices: Vec<usize>, a: DMatrix<f64>, template: &MeshSample, midline: Vec<usize>) -> Self {
        let m = a.ncols();
        Self {
            b_sym: indicator_matrix(m, &indices),
            template_positions: indices.iter().map(|&i| template.vertices[i]).collect(),
            vertex_indices: indices,
            a_sym: a,
            midline,
        }
    }
}

fn check_indices(indices: &[usize], m: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Parameter("marker set is empty".into()));
    }
    let mut seen = vec![false; m];
    for &i in indices {
        if i >= m {
            return Err(Error::Parameter(format!("marker vertex {i} out of range for M = {m}")));
        }
        if seen[i] {
            return Err(Error::Parameter(format!("marker vertex {i} appears twice")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Nearest vertex trajectory for every archetype. A vertex already claimed by
/// an earlier archetype is skipped in favor of the next-nearest one.
pub fn snap_to_vertices(model: &ArchetypeModel, x: &DataMatrix) -> Vec<usize> {
    let m = x.n_vertices;
    let mut claimed = vec![false; m];
    let mut out = Vec::with_capacity(model.n_markers);
    for z in model.z.column_iter() {
        let mut dist: Vec<(f64, usize)> = (0..m).map(|i| ((x.x.column(i) - z).norm_squared(), i)).collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some(&(_, i)) = dist.iter().find(|(_, i)| !claimed[*i]) {
            claimed[i] = true;
            out.push(i);
        }
    }
    out
}

fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// Makes a marker list mirror-closed under `pairing`, keeping its length and
/// slot order.
///
/// Markers whose partner is already present stay. Every right-side marker
/// without its partner is moved onto the mirror image of an unmatched left-side
/// marker, closest pairs first. Leftover unmatched markers on one side are paired among
/// themselves, and a final odd one goes to the nearest free midline vertex.
pub fn symmetrize_markers(
    indices: &[usize],
    pairing: &SymmetricPairing,
    template: &MeshSample,
) -> Result<Vec<usize>> {
    let m = pairing.n_vertices();
    check_indices(indices, m)?;
    if template.n_vertices() != m {
        return Err(Error::Parameter(format!(
            "template has {} vertices, pairing covers {m}",
            template.n_vertices()
        )));
    }
    let v = &template.vertices;
    let mut out = indices.to_vec();
    let mut present = vec![false; m];
    for &i in indices {
        present[i] = true;
    }

    let unmatched = |side: Side| -> Vec<usize> {
        (0..indices.len())
            .filter(|&s| pairing.side(indices[s]) == side && !present[pairing.partner(indices[s])])
            .collect()
    };
    let mut left = unmatched(Side::Left);
    let right = unmatched(Side::Right);

    // closest (right marker, mirrored left marker) pairs first
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(left.len() * right.len());
    for &r in &right {
        for &l in &left {
            let d = sq_dist(&v[indices[r]], &v[pairing.partner(indices[l])]);
            candidates.push((d, r, l));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut slot_done = vec![false; indices.len()];
    for &(_, r, l) in &candidates {
        if slot_done[r] || slot_done[l] {
            continue;
        }
        slot_done[r] = true;
        slot_done[l] = true;
        out[r] = pairing.partner(indices[l]);
    }
    left.retain(|&s| !slot_done[s]);
    let mut leftover_right: Vec<usize> = right.into_iter().filter(|&s| !slot_done[s]).collect();

    let mut odd = None;
    // left-only leftovers: slot b takes the partner of slot a
    while let Some(a) = (!left.is_empty()).then(|| left.remove(0)) {
        let target = v[pairing.partner(indices[a])];
        let nearest = left
            .iter()
            .enumerate()
            .min_by(|x, y| sq_dist(&target, &v[indices[*x.1]]).total_cmp(&sq_dist(&target, &v[indices[*y.1]])))
            .map(|(pos, _)| pos);
        match nearest {
            Some(pos) => {
                let b = left.remove(pos);
                out[b] = pairing.partner(indices[a]);
            }
            None => odd = Some(a),
        }
    }
    // right-only leftovers: slot a takes the partner of slot b
    while let Some(a) = (!leftover_right.is_empty()).then(|| leftover_right.remove(0)) {
        let here = v[indices[a]];
        let nearest = leftover_right
            .iter()
            .enumerate()
            .min_by(|x, y| {
                sq_dist(&here, &v[pairing.partner(indices[*x.1])])
                    .total_cmp(&sq_dist(&here, &v[pairing.partner(indices[*y.1])]))
            })
            .map(|(pos, _)| pos);
        match nearest {
            Some(pos) => {
                let b = leftover_right.remove(pos);
                out[a] = pairing.partner(indices[b]);
            }
            None => odd = Some(a),
        }
    }

    if let Some(slot) = odd {
        let here = v[indices[slot]];
        let used: Vec<bool> = {
            let mut u = vec![false; m];
            for &i in &out {
                u[i] = true;
            }
            u
        };
        let free = pairing
            .midline
            .iter()
            .copied()
            .filter(|&i| !used[i])
            .min_by(|&a, &b| sq_dist(&here, &v[a]).total_cmp(&sq_dist(&here, &v[b])).then(a.cmp(&b)));
        match free {
            Some(i) => out[slot] = i,
            None => {
                // every midline vertex is taken: give one midline slot to the partner
                let target = v[pairing.partner(out[slot])];
                let mid_slot = (0..out.len())
                    .filter(|&s| pairing.is_midline(out[s]))
                    .min_by(|&a, &b| sq_dist(&target, &v[out[a]]).total_cmp(&sq_dist(&target, &v[out[b]])))
                    .ok_or_else(|| {
                        Error::Internal("odd number of unpaired markers and no midline vertex".into())
                    })?;
                out[mid_slot] = pairing.partner(out[slot]);
            }
        }
    }
    debug_assert!(check_indices(&out, m).is_ok());
    Ok(out)
}

/// True when every non-midline marker's partner is also a marker.
pub fn is_mirror_closed(indices: &[usize], pairing: &SymmetricPairing) -> bool {
    indices.iter().all(|&i| indices.contains(&pairing.partner(i)))
}

/// Solves every vertex column against the selected marker trajectories.
pub fn refit_coefficients(x: &DataMatrix, indices: &[usize]) -> Result<DMatrix<f64>> {
    refit_with(x, indices, &SolverOptions::default())
}

pub fn refit_with(x: &DataMatrix, indices: &[usize], solver: &SolverOptions) -> Result<DMatrix<f64>> {
    check_indices(indices, x.n_vertices)?;
    solver.validate()?;
    let k = indices.len();
    let z = x.x.select_columns(indices);
    let q = z.tr_mul(&z);
    let zt_x = z.tr_mul(&x.x);
    let cols: Vec<Vec<f64>> = (0..x.n_vertices)
        .into_par_iter()
        .map(|i| {
            let c: Vec<f64> = zt_x.column(i).iter().copied().collect();
            if let Some(slot) = indices.iter().position(|&v| v == i) {
                let mut w = vec![0.0; k];
                w[slot] = 1.0;
                return w;
            }
            let start = (0..k)
                .min_by(|&a, &b| (q[(a, a)] - 2.0 * c[a]).total_cmp(&(q[(b, b)] - 2.0 * c[b])))
                .unwrap();
            let mut w0 = vec![0.0; k];
            w0[start] = 1.0;
            solve_gram(&q, &c, &w0, solver).w.into_inner()
        })
        .collect();
    Ok(DMatrix::from_fn(k, x.n_vertices, |j, i| cols[i][j]))
}

/// Snap, symmetrize and refit.
pub fn build_marker_set(
    model: &ArchetypeModel,
    x: &DataMatrix,
    pairing: &SymmetricPairing,
    template: &MeshSample,
) -> Result<MarkerSet> {
    if x.n_vertices != pairing.n_vertices() || model.z.nrows() != x.rows() {
        return Err(Error::Parameter("model, data matrix and pairing disagree in shape".into()));
    }
    let snapped = snap_to_vertices(model, x);
    let indices = symmetrize_markers(&snapped, pairing, template)?;
    marker_set_from_indices(x, indices, pairing, template)
}

/// Refits coefficients for a fixed list of marker vertices.
pub fn marker_set_from_indices(
    x: &DataMatrix,
    indices: Vec<usize>,
    pairing: &SymmetricPairing,
    template: &MeshSample,
) -> Result<MarkerSet> {
    let a = refit_coefficients(x, &indices)?;
    let midline = indices.iter().copied().filter(|&i| pairing.is_midline(i)).collect();
    Ok(MarkerSet::from_parts(indices, a, template, midline))
}

/// K distinct uniformly drawn marker vertices with refit coefficients, no
/// symmetrization.
pub fn baseline_random_markers(m: usize, k: usize, seed: u64, x: &DataMatrix) -> Result<MarkerSet> {
    if k == 0 || k > m || m != x.n_vertices {
        return Err(Error::Parameter(format!(
            "need 1 <= K <= M with M matching the data, got K = {k}, M = {m}"
        )));
    }
    let mut rng = seeded_rng(seed, 200);
    let indices = sample(&mut rng, m, k).into_vec();
    let a = refit_coefficients(x, &indices)?;
    let template = MeshSample::new((0..m).map(|i| x.vertex(0, i)).collect());
    Ok(MarkerSet::from_parts(indices, a, &template, Vec::new()))
}

/// Best rank-K reconstruction error of the mean-centered data matrix, the sum
/// of squared singular values beyond the K-th.
pub fn baseline_pca_error(x: &DataMatrix, k: usize) -> Result<f64> {
    if k > x.rows().min(x.n_vertices) {
        return Err(Error::Parameter(format!(
            "K = {k} exceeds min(3N, M) = {}",
            x.rows().min(x.n_vertices)
        )));
    }
    let mean = x.x.column_mean();
    let mut centered = x.x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    // eigenvalues of the smaller Gram matrix are the squared singular values
    let gram = if centered.nrows() <= centered.ncols() {
        &centered * centered.transpose()
    } else {
        centered.tr_mul(&centered)
    };
    let mut sv2: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|e| e.max(0.0)).collect();
    sv2.sort_by(|a, b| b.total_cmp(a));
    Ok(sv2.iter().skip(k).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
struct MarkerSetFile {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    vertex_indices: Vec<usize>,
    midline: Vec<usize>,
    #[serde(rename = "A_file")]
    a_file: String,
    template_positions: Vec<Point3>,
}

/// Writes the marker-set JSON and its coefficient matrix. `a_file` is resolved
/// relative to the JSON file's directory.
pub fn save_marker_set(set: &MarkerSet, json_path: impl AsRef<Path>, a_file: &str) -> Result<()> {
    let json_path = json_path.as_ref();
    let dir = json_path.parent().unwrap_or(Path::new(""));
    save_vmat(&set.a_sym, dir.join(a_file))?;
    let file = MarkerSetFile {
        version: 1,
        k: set.k(),
        vertex_indices: set.vertex_indices.clone(),
        midline: set.midline.clone(),
        a_file: a_file.to_string(),
        template_positions: set.template_positions.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))
}

pub fn load_marker_set(json_path: impl AsRef<Path>) -> Result<MarkerSet> {
    let json_path = json_path.as_ref();
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let file: MarkerSetFile =
        serde_json::from_str(&text).map_err(|e| Error::format(json_path, e.to_string()))?;
    if file.version != 1 {
        return Err(Error::format(json_path, format!("unsupported version {}", file.version)));
    }
    if file.k != file.vertex_indices.len() || file.k != file.template_positions.len() {
        return Err(Error::format(json_path, "K disagrees with the listed markers"));
    }
    let a_path: PathBuf = json_path.parent().unwrap_or(Path::new("")).join(&file.a_file);
    let a = load_vmat(&a_path)?;
    if a.nrows() != file.k {
        return Err(Error::format(
            &a_path,
            format!("coefficient matrix has {} rows, marker set has K = {}", a.nrows(), file.k),
        ));
    }
    check_indices(&file.vertex_indices, a.ncols()).map_err(|e| Error::format(json_path, e.to_string()))?;
    Ok(MarkerSet {
        b_sym: indicator_matrix(a.ncols(), &file.vertex_indices),
        vertex_indices: file.vertex_indices,
        a_sym: a,
        template_positions: file.template_positions,
        midline: file.midline,
    })
}

//! Archetypal analysis of the vertex-trajectory matrix.
//!
//! Minimizes `||X − X B A||²_F` over column-stochastic `B` (M×K) and `A` (K×M)
//! by block-coordinate descent: every column of `A` is a simplex least-squares
//! problem against the archetypes `Z = XB`, and every column of `B` is one
//! against the partial residual with the other archetypes held fixed
//! (cyclic Gauss–Seidel sweep). Both sub-solves run on Gram matrices so the
//! 3N-dimensional trajectories are touched only when the objective is
//! evaluated.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::simplex::{solve_gram, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    FurthestSum,
    RandomVertices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Number of archetypes K.
    pub k: usize,
    pub init_strategy: InitStrategy,
    pub seed: u64,
    /// Stop when the relative objective decrease of one sweep falls below this.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub restarts: usize,
    pub solver: SolverOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: 16,
            init_strategy: InitStrategy::FurthestSum,
            seed: 0,
            outer_tol: 1e-6,
            max_outer_iters: 200,
            restarts: 5,
            solver: SolverOptions::default(),
        }
    }
}

impl FitOptions {
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if self.k == 0 || self.k > n_vertices {
            return Err(Error::Parameter(format!(
                "K must satisfy 1 <= K <= M = {n_vertices}, got {}",
                self.k
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Parameter("restarts must be >= 1".into()));
        }
        if !(self.outer_tol >= 0.0) {
            return Err(Error::Parameter("outer_tol must be >= 0".into()));
        }
        self.solver.validate()
    }
}

/// Fitted factorization `X ≈ Z A` with `Z = X B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchetypeModel {
    /// M×K mixing matrix, columns in Δ_M.
    pub b: DMatrix<f64>,
    /// K×M coefficient matrix, columns in Δ_K.
    pub a: DMatrix<f64>,
    /// 3N×K archetype trajectories.
    pub z: DMatrix<f64>,
    pub n_markers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    /// `||X − XBA||²_F` after the initial A-step and after every sweep of the
    /// winning restart.
    pub objective_per_iter: Vec<f64>,
    pub converged: bool,
    /// Set when all columns of X coincide.
    pub degenerate: bool,
    pub best_restart: usize,
    pub restart_objectives: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    pub frobenius_sq: f64,
    /// Mean Euclidean distance (mm) between reconstructed and true vertices
    /// over all samples.
    pub mean_per_vertex_mm: f64,
}

/// Initial mixing matrix for restart 0.
pub fn initialize_archetypes(x: &DataMatrix, opts: &FitOptions) -> Result<DMatrix<f64>> {
    opts.validate(x.n_vertices)?;
    let gram = x.x.tr_mul(&x.x);
    let idx = initial_indices(&gram, opts, 0);
    Ok(indicator_matrix(x.n_vertices, &idx))
}

pub(crate) fn indicator_matrix(m: usize, idx: &[usize]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(m, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        b[(i, j)] = 1.0;
    }
    b
}

fn initial_indices(gram: &DMatrix<f64>, opts: &FitOptions, restart: usize) -> Vec<usize> {
    let m = gram.nrows();
    let mut rng = seeded_rng(opts.seed, 100 + restart as u64);
    match opts.init_strategy {
        InitStrategy::RandomVertices => sample(&mut rng, m, opts.k).into_vec(),
        InitStrategy::FurthestSum => {
            let start = sample(&mut rng, m, 1).index(0);
            furthest_sum(gram, opts.k, start)
        }
    }
}

/// Greedy selection maximizing the summed distance to the already selected
/// columns, followed by one pass that drops the random starting column and
/// reselects.
pub(crate) fn furthest_sum(gram: &DMatrix<f64>, k: usize, start: usize) -> Vec<usize> {
    let m = gram.nrows();
    let dist = |i: usize, j: usize| (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0).sqrt();
    let mut selected = vec![start];
    let mut chosen = vec![false; m];
    chosen[start] = true;
    let mut sums: Vec<f64> = (0..m).map(|i| dist(i, start)).collect();

    let argmax = |sums: &[f64], chosen: &[bool]| {
        let mut best: Option<usize> = None;
        for i in 0..sums.len() {
            if !chosen[i] && best.is_none_or(|b| sums[i] > sums[b]) {
                best = Some(i);
            }
        }
        best
    };

    while selected.len() < k {
        let Some(next) = argmax(&sums, &chosen) else { break };
        chosen[next] = true;
        selected.push(next);
        for (i, s) in sums.iter_mut().enumerate() {
            *s += dist(i, next);
        }
    }
    if k > 1 && selected.len() == k {
        let dropped = selected.remove(0);
        for (i, s) in sums.iter_mut().enumerate() {
            *s -= dist(i, dropped);
        }
        chosen[dropped] = false;
        // the dropped column stays a candidate
        if let Some(next) = argmax(&sums, &chosen) {
            chosen[next] = true;
            selected.push(next);
        }
    }
    selected
}

/// Fits archetypes with `opts.restarts` independent restarts and returns the
/// lowest-objective model (ties: lowest restart index).
pub fn fit_archetypes(x: &DataMatrix, opts: &FitOptions) -> Result<(ArchetypeModel, FitHistory)> {
    opts.validate(x.n_vertices)?;
    if x.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("data matrix has non-finite entries".into()));
    }
    let gram = x.x.tr_mul(&x.x);
    let degenerate = (1..x.n_vertices).all(|i| x.x.column(i) == x.x.column(0));
    if degenerate {
        log::warn!("all columns of the data matrix coincide; archetypes are not identifiable");
    }

    let runs: Vec<(ArchetypeModel, Vec<f64>, bool)> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let idx = initial_indices(&gram, opts, r);
            fit_single(&x.x, &gram, &idx, opts)
        })
        .collect();

    let restart_objectives: Vec<f64> = runs.iter().map(|r| *r.1.last().unwrap()).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| restart_objectives[a].total_cmp(&restart_objectives[b]).then(a.cmp(&b)))
        .unwrap();
    let (model, objective_per_iter, converged) = runs.into_iter().nth(best).unwrap();
    Ok((
        model,
        FitHistory {
            objective_per_iter,
            converged,
            degenerate,
            best_restart: best,
            restart_objectives,
        },
    ))
}

/// Dense columns of a column-stochastic matrix, with their supports.
struct SparseColumns {
    values: Vec<Vec<f64>>,
}

impl SparseColumns {
    fn support(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values[j]
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| (i, *v))
    }
}

fn fit_single(
    x: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    init: &[usize],
    opts: &FitOptions,
) -> (ArchetypeModel, Vec<f64>, bool) {
    let m = gram.nrows();
    let k = init.len();
    let mut b = SparseColumns {
        values: init
            .iter()
            .map(|&i| {
                let mut col = vec![0.0; m];
                col[i] = 1.0;
                col
            })
            .collect(),
    };
    // GB = G · B, one column per archetype
    let mut gb: Vec<Vec<f64>> = (0..k).map(|j| gram_times(gram, &b, j)).collect();
    let mut alphas: Vec<Vec<f64>> = Vec::new();

    a_step(&gb, &b, &mut alphas, &opts.solver);
    let mut history = vec![objective(x, &b, &alphas)];
    let mut converged = false;

    for _ in 0..opts.max_outer_iters {
        b_step(gram, &mut b, &mut gb, &alphas, &opts.solver);
        a_step(&gb, &b, &mut alphas, &opts.solver);
        let f = objective(x, &b, &alphas);
        let prev = *history.last().unwrap();
        history.push(f);
        if prev <= 0.0 || (prev - f) / prev < opts.outer_tol {
            converged = true;
            break;
        }
    }

    let bm = DMatrix::from_fn(m, k, |i, j| b.values[j][i]);
    let am = DMatrix::from_fn(k, m, |j, i| alphas[i][j]);
    let z = x * &bm;
    (
        ArchetypeModel {
            b: bm,
            a: am,
            z,
            n_markers: k,
        },
        history,
        converged,
    )
}

fn gram_times(gram: &DMatrix<f64>, b: &SparseColumns, j: usize) -> Vec<f64> {
    let m = gram.nrows();
    let mut out = vec![0.0; m];
    for (s, w) in b.support(j) {
        let col = gram.column(s);
        for i in 0..m {
            out[i] += col[i] * w;
        }
    }
    out
}

/// Solves every coefficient column against the current archetypes.
fn a_step(gb: &[Vec<f64>], b: &SparseColumns, alphas: &mut Vec<Vec<f64>>, solver: &SolverOptions) {
    let k = gb.len();
    let m = gb[0].len();
    // Q = BᵀGB
    let q = DMatrix::from_fn(k, k, |p, r| b.support(p).map(|(s, w)| w * gb[r][s]).sum::<f64>());
    let q = (&q + q.transpose()) * 0.5;
    let warm = std::mem::take(alphas);
    *alphas = (0..m)
        .into_par_iter()
        .map(|i| {
            // c_i = Zᵀ x_i = row i of GB
            let c: Vec<f64> = (0..k).map(|j| gb[j][i]).collect();
            let w0 = match warm.get(i) {
                Some(w) => w.clone(),
                None => {
                    let best = (0..k)
                        .min_by(|&p, &r| (q[(p, p)] - 2.0 * c[p]).total_cmp(&(q[(r, r)] - 2.0 * c[r])))
                        .unwrap();
                    let mut w = vec![0.0; k];
                    w[best] = 1.0;
                    w
                }
            };
            solve_gram(&q, &c, &w0, solver).w.into_inner()
        })
        .collect();
}

/// One Gauss–Seidel sweep over the archetypes.
fn b_step(
    gram: &DMatrix<f64>,
    b: &mut SparseColumns,
    gb: &mut [Vec<f64>],
    alphas: &[Vec<f64>],
    solver: &SolverOptions,
) {
    let k = gb.len();
    let m = gram.nrows();
    // AAᵀ
    let mut aat = DMatrix::<f64>::zeros(k, k);
    for alpha in alphas {
        for p in 0..k {
            if alpha[p] == 0.0 {
                continue;
            }
            for r in 0..k {
                aat[(p, r)] += alpha[p] * alpha[r];
            }
        }
    }
    for j in 0..k {
        let s = aat[(j, j)];
        if s <= 1e-12 {
            // unused archetype: the subproblem is flat
            continue;
        }
        let a_row: Vec<f64> = alphas.iter().map(|alpha| alpha[j]).collect();
        // c = (G a − Σ_{l≠j} G β_l (a_l · a_j)) / ||a_j||²
        let mut c = vec![0.0; m];
        for (i, &ai) in a_row.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let col = gram.column(i);
            for r in 0..m {
                c[r] += col[r] * ai;
            }
        }
        for l in 0..k {
            if l == j || aat[(l, j)] == 0.0 {
                continue;
            }
            let coef = aat[(l, j)];
            for r in 0..m {
                c[r] -= gb[l][r] * coef;
            }
        }
        for v in c.iter_mut() {
            *v /= s;
        }
        let sol = solve_gram(gram, &c, &b.values[j], solver);
        b.values[j] = sol.w.into_inner();
        gb[j] = gram_times(gram, b, j);
    }
}

fn objective(x: &DMatrix<f64>, b: &SparseColumns, alphas: &[Vec<f64>]) -> f64 {
    let rows = x.nrows();
    let k = b.values.len();
    let mut z = DMatrix::zeros(rows, k);
    for j in 0..k {
        for (s, w) in b.support(j) {
            z.column_mut(j).axpy(w, &x.column(s), 1.0);
        }
    }
    let mut total = 0.0;
    let mut recon = vec![0.0; rows];
    for (i, alpha) in alphas.iter().enumerate() {
        recon.iter_mut().for_each(|v| *v = 0.0);
        for (j, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let zc = z.column(j);
            for r in 0..rows {
                recon[r] += a * zc[r];
            }
        }
        let xc = x.column(i);
        total += (0..rows).map(|r| (xc[r] - recon[r]).powi(2)).sum::<f64>();
    }
    total
}

/// `||X − Z A||²_F` and the mean per-vertex Euclidean error of the factorization.
pub fn reconstruction_error(x: &DataMatrix, model: &ArchetypeModel) -> Result<ReconstructionError> {
    factorization_error(x, &model.z, &model.a)
}

/// Error of reconstructing `X` as `Z A` for any archetype trajectories `Z`.
pub fn factorization_error(x: &DataMatrix, z: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<ReconstructionError> {
    if z.nrows() != x.x.nrows() || a.ncols() != x.x.ncols() || z.ncols() != a.nrows() {
        return Err(Error::Parameter(format!(
            "shape mismatch: X is {}x{}, Z is {}x{}, A is {}x{}",
            x.x.nrows(),
            x.x.ncols(),
            z.nrows(),
            z.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    if !x.x.nrows().is_multiple_of(3) {
        return Err(Error::Parameter("data matrix rows must be a multiple of 3".into()));
    }
    let residual = &x.x - z * a;
    let frobenius_sq = residual.norm_squared();
    let n = residual.nrows() / 3;
    let m = residual.ncols();
    let mut sum = 0.0;
    for i in 0..m {
        for s in 0..n {
            let d = (0..3).map(|c| residual[(3 * s + c, i)].powi(2)).sum::<f64>();
            sum += d.sqrt();
        }
    }
    let count = (n * m).max(1) as f64;
    Ok(ReconstructionError {
        frobenius_sq,
        mean_per_vertex_mm: sum / count,
    })
}

//! Projection onto the probability simplex and simplex-constrained least squares.
//!
//! The least-squares solver is a primal active-set method working on the Gram
//! form `min wᵀQw − 2cᵀw` with `Q = DᵀD`, `c = Dᵀt`. Each iteration takes an
//! equality-constrained Newton step on the free (positive) coordinates, followed
//! by an exact line search that stops at the first coordinate hitting zero. When
//! the free set is stationary the coordinate with the most negative reduced
//! gradient is released. Singular reduced Hessians are handled by an eigen
//! decomposition: flat directions with a non-zero gradient are followed to the
//! boundary.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ w = 1` accepted by [`SimplexVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// A point of the probability simplex: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Parameter("simplex vector must be non-empty".into()));
        }
        if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::Parameter(format!(
                "simplex entries must be finite and non-negative, found {bad}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE * w.len().max(1) as f64 {
            return Err(Error::Parameter(format!(
                "simplex entries must sum to 1, found {sum}"
            )));
        }
        Ok(Self(w))
    }

    /// Barycenter of the simplex, `1/d` in every coordinate.
    pub fn uniform(d: usize) -> Self {
        assert!(d > 0, "simplex dimension must be positive");
        Self(vec![1.0 / d as f64; d])
    }

    /// Vertex `i` of the `d`-simplex.
    pub fn vertex(d: usize, i: usize) -> Self {
        assert!(i < d, "vertex index out of range");
        let mut w = vec![0.0; d];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Builds a simplex vector from a non-negative vector that sums to one up to
    /// rounding, clamping negatives and renormalizing.
    pub(crate) fn from_raw(mut w: Vec<f64>) -> Self {
        for x in w.iter_mut() {
            if *x < 0.0 || !x.is_finite() {
                *x = 0.0;
            }
        }
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            for x in w.iter_mut() {
                *x /= sum;
            }
        } else {
            let d = w.len();
            w.iter_mut().for_each(|x| *x = 1.0 / d as f64);
        }
        Self(w)
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(w: SimplexVector) -> Self {
        w.0
    }
}

/// Euclidean projection of `v` onto the probability simplex.
///
/// Sort-and-threshold construction: with `u` sorted descending, the threshold
/// is `θ = (Σ_{i≤ρ} u_i − 1)/ρ` for the largest `ρ` with `u_ρ > θ`.
pub fn project_to_simplex(v: &[f64]) -> SimplexVector {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable: descending value, then ascending index
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));

    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += v[i];
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v[i] - candidate > 0.0 {
            theta = candidate;
        }
    }
    let w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    SimplexVector::from_raw(w)
}

/// Stopping controls for [`simplex_ls`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Bound on the scaled KKT residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Parameter(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Outcome of a simplex-constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct SimplexLsResult {
    pub w: SimplexVector,
    /// `||t − D w||²`.
    pub objective: f64,
    /// Scaled violation of the KKT conditions, see [`kkt_residual`].
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every iteration, starting with the warm start.
    pub history: Vec<f64>,
}

/// KKT residual of `w` for a simplex-constrained problem with gradient `g`.
///
/// With `μ = min_{w_i>0} g_i` the residual is the largest of `|g_i − μ|` over the
/// support and `max(0, μ − g_i)` off the support, divided by
/// `max(1, max_i |g_i|)` so that it is invariant to the data's units.
pub fn kkt_residual(g: &[f64], w: &[f64]) -> f64 {
    let mu = g
        .iter()
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|(&gi, _)| gi)
        .fold(f64::INFINITY, f64::min);
    if !mu.is_finite() {
        return f64::INFINITY;
    }
    let mut r: f64 = 0.0;
    for (&gi, &wi) in g.iter().zip(w) {
        if wi > 0.0 {
            r = r.max((gi - mu).abs());
        } else {
            r = r.max(mu - gi);
        }
    }
    let scale = g.iter().fold(1.0_f64, |s, gi| s.max(gi.abs()));
    r / scale
}

/// Solves `min_{w ∈ Δ_d} ||t − D w||²`.
///
/// `w0` defaults to the barycenter. On non-convergence the best iterate is
/// returned with `converged == false`.
pub fn simplex_ls(
    d: &DMatrix<f64>,
    t: &DVector<f64>,
    w0: Option<&SimplexVector>,
    opts: &SolverOptions,
) -> Result<SimplexLsResult> {
    opts.validate()?;
    let dim = d.ncols();
    if dim == 0 {
        return Err(Error::Parameter("design matrix has no columns".into()));
    }
    if d.nrows() != t.len() {
        return Err(Error::Shape(format!(
            "design matrix has {} rows but target has {} entries",
            d.nrows(),
            t.len()
        )));
    }
    let start = match w0 {
        Some(w) if w.len() != dim => {
            return Err(Error::Shape(format!(
                "warm start has {} entries, expected {dim}",
                w.len()
            )))
        }
        Some(w) => w.clone(),
        None => SimplexVector::uniform(dim),
    };

    let q = d.tr_mul(d);
    let c = d.tr_mul(t);
    let tt = t.norm_squared();
    let sol = solve_gram(&q, c.as_slice(), start.as_slice(), opts);

    let w = DVector::from_column_slice(sol.w.as_slice());
    let residual = t - d * &w;
    let objective = residual.norm_squared();
    let history = sol.history.iter().map(|f| (f + tt).max(0.0)).collect();
    Ok(SimplexLsResult {
        w: sol.w,
        objective,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        converged: sol.converged,
        history,
    })
}

/// Solution of the Gram-form problem `min_{w ∈ Δ} wᵀQw − 2cᵀw`.
#[derive(Debug, Clone)]
pub(crate) struct GramSolution {
    pub w: SimplexVector,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `wᵀQw − 2cᵀw` per iteration (the constant `tᵀt` is not included).
    pub history: Vec<f64>,
}

/// Active-set solve of `min_{w ∈ Δ} wᵀQw − 2cᵀw` from the feasible start `w0`.
///
/// Only the support of the iterate enters the gradient computation, so sparse
/// warm starts keep the cost proportional to `d · |support|` per iteration.
pub(crate) fn solve_gram(
    q: &DMatrix<f64>,
    c: &[f64],
    w0: &[f64],
    opts: &SolverOptions,
) -> GramSolution {
    let dim = c.len();
    debug_assert_eq!(q.nrows(), dim);
    debug_assert_eq!(w0.len(), dim);

    let mut w = w0.to_vec();
    let mut free: Vec<usize> = (0..dim).filter(|&i| w[i] > 0.0).collect();
    if free.is_empty() {
        w = vec![1.0 / dim as f64; dim];
        free = (0..dim).collect();
    }

    let mut h = vec![0.0; dim];
    half_gradient(q, c, &w, &free, &mut h);
    let mut history = vec![objective_from_half_gradient(&w, &h, c, &free)];
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let scale = h.iter().fold(0.5_f64, |s, x| s.max(x.abs()));
        let threshold = 0.5 * opts.tol * scale;

        let (f_min, f_max) = free
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(h[i]), hi.max(h[i]))
            });

        let mut moved = false;
        let support_before = free.len();
        if !stalled && free.len() > 1 && f_max - f_min > threshold {
            if let Some(p) = newton_direction(q, &free, &w, &h) {
                moved = line_search_step(q, &mut w, &mut free, &h, &p);
            }
        }

        if !moved {
            // the free set is stationary: release the most attractive bound coordinate
            let mu = f_min;
            let mut best: Option<(usize, f64)> = None;
            for j in 0..dim {
                if w[j] > 0.0 || free.contains(&j) {
                    continue;
                }
                let gap = mu - h[j];
                if gap > threshold && best.is_none_or(|(_, g)| gap > g) {
                    best = Some((j, gap));
                }
            }
            match best {
                Some((j, _)) => {
                    free.push(j);
                    free.sort_unstable();
                    // a freed coordinate only moves with the next Newton step
                    if let Some(p) = newton_direction(q, &free, &w, &h) {
                        moved = line_search_step(q, &mut w, &mut free, &h, &p);
                    }
                    if !moved {
                        free.retain(|&i| w[i] > 0.0);
                        break;
                    }
                }
                None => break,
            }
        }

        half_gradient(q, c, &w, &free, &mut h);
        let f = objective_from_half_gradient(&w, &h, c, &free);
        let prev = *history.last().unwrap();
        // Newton steps that no longer decrease the objective are rounding noise
        stalled = free.len() >= support_before && prev - f <= 1e-15 * prev.abs().max(1.0);
        history.push(f);
    }

    let g: Vec<f64> = h.iter().map(|x| 2.0 * x).collect();
    let kkt = kkt_residual(&g, &w);
    GramSolution {
        w: SimplexVector::from_raw(w),
        kkt_residual: kkt,
        iterations,
        converged: kkt <= opts.tol,
        history,
    }
}

/// `h = Qw − c` using only the support of `w`.
fn half_gradient(q: &DMatrix<f64>, c: &[f64], w: &[f64], free: &[usize], h: &mut [f64]) {
    for (i, hi) in h.iter_mut().enumerate() {
        let mut s = -c[i];
        for &j in free {
            s += q[(i, j)] * w[j];
        }
        *hi = s;
    }
}

fn objective_from_half_gradient(w: &[f64], h: &[f64], c: &[f64], free: &[usize]) -> f64 {
    // wᵀQw − 2cᵀw = Σ w_i (h_i + c_i) − 2 Σ w_i c_i
    free.iter().map(|&i| w[i] * (h[i] - c[i])).sum()
}

/// Newton step on the free coordinates subject to `Σ p = 0`, returned as a
/// dense direction over `free` (same order). Eliminates the free coordinate
/// with the largest weight.
fn newton_direction(q: &DMatrix<f64>, free: &[usize], w: &[f64], h: &[f64]) -> Option<Vec<f64>> {
    let m = free.len();
    if m < 2 {
        return None;
    }
    let pivot_pos = (0..m)
        .max_by(|&a, &b| w[free[a]].total_cmp(&w[free[b]]).then(b.cmp(&a)))
        .unwrap();
    let pivot = free[pivot_pos];
    let others: Vec<usize> = free.iter().copied().filter(|&i| i != pivot).collect();
    let n = others.len();

    let qll = q[(pivot, pivot)];
    let hess = DMatrix::from_fn(n, n, |a, b| {
        let (ia, ib) = (others[a], others[b]);
        q[(ia, ib)] - q[(ia, pivot)] - q[(pivot, ib)] + qll
    });
    let r = DVector::from_fn(n, |a, _| h[others[a]] - h[pivot]);

    let diag_max = hess.diagonal().iter().fold(0.0_f64, |s, x| s.max(x.abs()));
    let z = match Cholesky::new(hess.clone()) {
        Some(chol) if chol.l().diagonal().iter().all(|x| *x * *x > 1e-13 * diag_max) => {
            -chol.solve(&r)
        }
        _ => {
            let eig = SymmetricEigen::new(hess);
            let lam_max = eig.eigenvalues.iter().fold(0.0_f64, |s, x| s.max(x.abs()));
            let cutoff = 1e-12 * lam_max.max(f64::MIN_POSITIVE);
            let mut z_range = DVector::zeros(n);
            let mut z_null = DVector::zeros(n);
            for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                let v = eig.eigenvectors.column(k);
                let coef = v.dot(&r);
                if lam > cutoff {
                    z_range -= v * (coef / lam);
                } else {
                    z_null -= v * coef;
                }
            }
            // a flat or negatively curved direction with non-zero slope is
            // followed to the boundary
            if z_null.norm() > 1e-12 * r.norm().max(f64::MIN_POSITIVE) {
                z_null
            } else {
                z_range
            }
        }
    };

    let mut p = vec![0.0; m];
    let mut pivot_step = 0.0;
    for (a, &i) in others.iter().enumerate() {
        let pos = free.iter().position(|&f| f == i).unwrap();
        p[pos] = z[a];
        pivot_step -= z[a];
    }
    p[pivot_pos] = pivot_step;
    if p.iter().all(|x| x.is_finite()) {
        Some(p)
    } else {
        None
    }
}

/// Exact line search along `p` (indexed like `free`), stopping at the first
/// coordinate reaching zero. Returns false when `p` is not a descent direction.
fn line_search_step(
    q: &DMatrix<f64>,
    w: &mut [f64],
    free: &mut Vec<usize>,
    h: &[f64],
    p: &[f64],
) -> bool {
    let slope: f64 = free.iter().zip(p).map(|(&i, &pi)| h[i] * pi).sum();
    if !(slope < 0.0) {
        return false;
    }
    let mut curvature = 0.0;
    for (a, &i) in free.iter().enumerate() {
        if p[a] == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (b, &j) in free.iter().enumerate() {
            s += q[(i, j)] * p[b];
        }
        curvature += p[a] * s;
    }
    let alpha_star = if curvature > 0.0 {
        -slope / curvature
    } else {
        f64::INFINITY
    };

    let mut alpha_max = f64::INFINITY;
    let mut blocking = None;
    for (a, &i) in free.iter().enumerate() {
        if p[a] < 0.0 {
            let ratio = -w[i] / p[a];
            if ratio < alpha_max {
                alpha_max = ratio;
                blocking = Some(i);
            }
        }
    }
    let (alpha, hit) = if alpha_max <= alpha_star {
        (alpha_max, blocking)
    } else {
        (alpha_star, None)
    };
    if !alpha.is_finite() {
        return false;
    }
    if alpha == 0.0 && hit.is_none() {
        return false;
    }

    for (a, &i) in free.iter().enumerate() {
        w[i] += alpha * p[a];
    }
    if let Some(b) = hit {
        w[b] = 0.0;
    }
    for &i in free.iter() {
        if w[i] < 0.0 {
            w[i] = 0.0;
        }
    }
    free.retain(|&i| w[i] > 0.0);
    let sum: f64 = free.iter().map(|&i| w[i]).sum();
    for &i in free.iter() {
        w[i] /= sum;
    }
    true
}

/// Exhaustive oracle for [`simplex_ls`] on small simplices (`d ≤ 4`).
///
/// Evaluates every point of the barycentric grid with spacing `grid_step`,
/// then polishes the best grid point with projected gradient descent. Meant
/// for verification only.
pub fn brute_force_simplex_ls(
    d: &DMatrix<f64>,
    t: &DVector<f64>,
    grid_step: f64,
) -> Result<SimplexLsResult> {
    let dim = d.ncols();
    if dim == 0 || dim > 4 {
        return Err(Error::Dimension(format!(
            "brute-force oracle supports 1 ≤ d ≤ 4, got d = {dim}"
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 1e-2) {
        return Err(Error::Parameter(format!(
            "grid_step must lie in (0, 1e-2], got {grid_step}"
        )));
    }
    if d.nrows() != t.len() {
        return Err(Error::Shape(format!(
            "design matrix has {} rows but target has {} entries",
            d.nrows(),
            t.len()
        )));
    }

    let eval = |w: &[f64]| -> f64 {
        (0..d.nrows())
            .map(|r| {
                let pred: f64 = (0..dim).map(|k| d[(r, k)] * w[k]).sum();
                (t[r] - pred).powi(2)
            })
            .sum()
    };

    let steps = (1.0 / grid_step).round() as usize;
    let mut best_w = vec![0.0; dim];
    best_w[0] = 1.0;
    let mut best_f = eval(&best_w);
    let mut counts = vec![0usize; dim];
    enumerate_compositions(steps, dim, 0, &mut counts, &mut |counts| {
        let w: Vec<f64> = counts.iter().map(|&k| k as f64 / steps as f64).collect();
        let f = eval(&w);
        if f < best_f {
            best_f = f;
            best_w = w;
        }
    });

    // projected-gradient polish with step 1 / L, L = 2 ||D||_F² ≥ 2 λ_max(DᵀD)
    let lipschitz = 2.0 * d.iter().map(|x| x * x).sum::<f64>();
    let mut w = best_w.clone();
    let mut iterations = 0;
    if lipschitz > 0.0 {
        for _ in 0..50_000 {
            iterations += 1;
            let grad = gradient_direct(d, t, &w);
            let step: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(wi, gi)| wi - gi / lipschitz)
                .collect();
            let next = project_to_simplex(&step).into_inner();
            let f = eval(&next);
            let change: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
            w = next;
            if f < best_f {
                best_f = f;
                best_w = w.clone();
            }
            if change < 1e-15 {
                break;
            }
        }
    }

    let grad = gradient_direct(d, t, &best_w);
    Ok(SimplexLsResult {
        kkt_residual: kkt_residual(&grad, &best_w),
        w: SimplexVector::from_raw(best_w),
        objective: best_f,
        iterations,
        converged: true,
        history: vec![best_f],
    })
}

fn gradient_direct(d: &DMatrix<f64>, t: &DVector<f64>, w: &[f64]) -> Vec<f64> {
    let dim = d.ncols();
    let resid: Vec<f64> = (0..d.nrows())
        .map(|r| (0..dim).map(|k| d[(r, k)] * w[k]).sum::<f64>() - t[r])
        .collect();
    (0..dim)
        .map(|k| 2.0 * (0..d.nrows()).map(|r| d[(r, k)] * resid[r]).sum::<f64>())
        .collect()
}

fn enumerate_compositions(
    remaining: usize,
    dim: usize,
    pos: usize,
    counts: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if pos + 1 == dim {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[pos] = k;
        enumerate_compositions(remaining - k, dim, pos + 1, counts, visit);
    }
}

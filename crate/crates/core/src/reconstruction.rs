//! Mesh recovery from marker positions, with a fixed coefficient matrix or a
//! confidence-conditioned adapter, and the adapter's training loop.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MeshDataset, MeshSample};
use crate::error::{Error, Result};
use crate::evaluation::{mesh_loss_grad, LossWeights, MeshTarget, MeshTerms};
use crate::heatmap::MarkerEstimate;
use crate::markers::{load_marker_set, MarkerSet};
use crate::vmat::{load_vmat, save_vmat};
use crate::{seeded_rng, Point3};

/// Vertex `i` is `Σ_j A[j, i] P[j]`.
pub fn reconstruct_fixed(p: &[Point3], a: &DMatrix<f64>) -> Result<MeshSample> {
    if a.nrows() != p.len() {
        return Err(Error::Parameter(format!(
            "{} marker positions for a coefficient matrix with {} rows",
            p.len(),
            a.nrows()
        )));
    }
    let vertices = a
        .column_iter()
        .map(|col| {
            let mut v = [0.0; 3];
            for (w, q) in col.iter().zip(p) {
                for c in 0..3 {
                    v[c] += w * q[c];
                }
            }
            v
        })
        .collect();
    Ok(MeshSample::new(vertices))
}

/// Joint `j` is `Σ_i R[i, j] · vertex_i`.
pub fn regress_joints(mesh: &MeshSample, regressor: &DMatrix<f64>) -> Result<Vec<Point3>> {
    if regressor.nrows() != mesh.n_vertices() {
        return Err(Error::Parameter(format!(
            "regressor has {} rows for a mesh of {} vertices",
            regressor.nrows(),
            mesh.n_vertices()
        )));
    }
    Ok(regressor
        .column_iter()
        .map(|col| {
            let mut j = [0.0; 3];
            for (w, v) in col.iter().zip(&mesh.vertices) {
                if *w != 0.0 {
                    for c in 0..3 {
                        j[c] += w * v[c];
                    }
                }
            }
            j
        })
        .collect())
}

/// `Â(C) = base + reshape(W C + b)`, where entry `(j, i)` of the reshaped
/// vector sits at index `j * M + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientAdapter {
    /// (K·M)×K.
    pub w: DMatrix<f64>,
    /// K·M.
    pub b: DVector<f64>,
    /// K×M.
    pub base: DMatrix<f64>,
}

impl CoefficientAdapter {
    /// Zero correction on top of `base`.
    pub fn new(base: DMatrix<f64>) -> Self {
        let (k, m) = base.shape();
        Self {
            w: DMatrix::zeros(k * m, k),
            b: DVector::zeros(k * m),
            base,
        }
    }

    pub fn k(&self) -> usize {
        self.base.nrows()
    }

    pub fn n_vertices(&self) -> usize {
        self.base.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, m) = self.base.shape();
        if self.w.shape() != (k * m, k) || self.b.len() != k * m {
            return Err(Error::Shape(format!(
                "adapter W is {:?} and b has {} entries, expected ({}, {k}) and {}",
                self.w.shape(),
                self.b.len(),
                k * m,
                k * m
            )));
        }
        Ok(())
    }
}

pub fn adapter_forward(adapter: &CoefficientAdapter, c: &[f64]) -> Result<DMatrix<f64>> {
    let k = adapter.k();
    let m = adapter.n_vertices();
    if c.len() != k {
        return Err(Error::Parameter(format!("{} confidences for K = {k}", c.len())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("confidences must be finite".into()));
    }
    let delta = &adapter.w * DVector::from_column_slice(c) + &adapter.b;
    Ok(DMatrix::from_fn(k, m, |j, i| adapter.base[(j, i)] + delta[j * m + i]))
}

pub fn reconstruct_adaptive(p: &[Point3], c: &[f64], adapter: &CoefficientAdapter) -> Result<MeshSample> {
    reconstruct_fixed(p, &adapter_forward(adapter, c)?)
}

/// Training sample: decoded markers and the mesh they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub estimate: MarkerEstimate,
    pub mesh: MeshSample,
}

/// Prepared mesh-loss targets for one sample.
struct Target {
    mesh: MeshSample,
    joints: Vec<Point3>,
}

impl Target {
    fn view<'a>(&'a self, regressor: &'a DMatrix<f64>, faces: &'a [[usize; 3]]) -> MeshTarget<'a> {
        MeshTarget {
            mesh: &self.mesh,
            joints: &self.joints,
            regressor,
            faces,
        }
    }
}

/// Mesh loss of one sample and its gradient with respect to `Â`, laid out like
/// `b` (index `j * M + i`).
fn sample_grad(
    adapter: &CoefficientAdapter,
    est: &MarkerEstimate,
    target: &MeshTarget,
    terms: &MeshTerms,
) -> Result<(f64, DVector<f64>)> {
    let a_hat = adapter_forward(adapter, &est.c)?;
    let mesh = reconstruct_fixed(&est.p, &a_hat)?;
    let (loss, g) = mesh_loss_grad(&mesh, target, terms)?;
    let m = adapter.n_vertices();
    let mut d_a = DVector::zeros(adapter.k() * m);
    for (j, p) in est.p.iter().enumerate() {
        for (i, gi) in g.iter().enumerate() {
            d_a[j * m + i] = p[0] * gi[0] + p[1] * gi[1] + p[2] * gi[2];
        }
    }
    Ok((loss, d_a))
}

/// Loss of one sample and its gradients with respect to `W` and `b`.
pub fn adapter_loss_grad(
    adapter: &CoefficientAdapter,
    est: &MarkerEstimate,
    target: &MeshTarget,
    terms: &MeshTerms,
) -> Result<(f64, DMatrix<f64>, DVector<f64>)> {
    adapter.validate()?;
    let (loss, d_a) = sample_grad(adapter, est, target, terms)?;
    let c = DVector::from_column_slice(&est.c);
    let d_w = &d_a * c.transpose();
    Ok((loss, d_w, d_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient step.
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Optimizer moments, saved and restored together with the parameters.
#[derive(Debug, Clone)]
struct StepState {
    m_w: DMatrix<f64>,
    v_w: DMatrix<f64>,
    m_b: DVector<f64>,
    v_b: DVector<f64>,
    t: i32,
}

impl StepState {
    fn new(adapter: &CoefficientAdapter) -> Self {
        Self {
            m_w: DMatrix::zeros(adapter.w.nrows(), adapter.w.ncols()),
            v_w: DMatrix::zeros(adapter.w.nrows(), adapter.w.ncols()),
            m_b: DVector::zeros(adapter.b.len()),
            v_b: DVector::zeros(adapter.b.len()),
            t: 0,
        }
    }

    fn step(&mut self, adapter: &mut CoefficientAdapter, g_w: &DMatrix<f64>, g_b: &DVector<f64>, lr: f64, opt: Optimizer) {
        match opt {
            Optimizer::Sgd => {
                adapter.w -= g_w * lr;
                adapter.b.axpy(-lr, g_b, 1.0);
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
                    for i in 0..p.len() {
                        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                };
                update(adapter.w.as_mut_slice(), self.m_w.as_mut_slice(), self.v_w.as_mut_slice(), g_w.as_slice());
                update(adapter.b.as_mut_slice(), self.m_b.as_mut_slice(), self.v_b.as_mut_slice(), g_b.as_slice());
            }
        }
    }
}

impl AdapterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss before the first epoch.
    pub initial_loss: f64,
    /// Mean training loss after every epoch; epochs that raised the loss are
    /// rolled back, so this never increases.
    pub epoch_loss: Vec<f64>,
    /// Learning rate in effect at the end of each epoch.
    pub learning_rate: Vec<f64>,
    pub rejected_epochs: usize,
}

/// Fits `W` and `b` by mini-batch descent on `λ_m · L_mesh`. An epoch that
/// increases the mean loss is undone and the learning rate halved.
pub fn train_adapter(
    train_set: &[TrainSample],
    dataset: &MeshDataset,
    config: &AdapterTrainConfig,
    marker_set: &MarkerSet,
) -> Result<(CoefficientAdapter, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let m = dataset.n_vertices();
    if marker_set.n_vertices() != m {
        return Err(Error::Parameter(format!(
            "marker set covers {} vertices, dataset has {m}",
            marker_set.n_vertices()
        )));
    }
    let k = marker_set.k();
    if let Some(s) = train_set.iter().find(|s| s.estimate.k() != k || s.estimate.c.len() != k || s.mesh.n_vertices() != m) {
        return Err(Error::Parameter(format!(
            "training sample with {} markers and {} vertices, expected {k} and {m}",
            s.estimate.k(),
            s.mesh.n_vertices()
        )));
    }
    let regressor = dataset
        .joint_regressor
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(m, 0));
    let targets: Vec<Target> = train_set
        .iter()
        .map(|s| {
            Ok(Target {
                joints: regress_joints(&s.mesh, &regressor)?,
                mesh: s.mesh.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let terms = MeshTerms::from(&config.loss_weights);
    let lambda_m = config.loss_weights.lambda_m;

    let mean_loss = |adapter: &CoefficientAdapter| -> Result<f64> {
        let losses: Vec<f64> = train_set
            .par_iter()
            .zip(&targets)
            .map(|(s, t)| {
                let mesh = reconstruct_adaptive(&s.estimate.p, &s.estimate.c, adapter)?;
                Ok(mesh_loss_grad(&mesh, &t.view(&regressor, &dataset.faces), &terms)?.0)
            })
            .collect::<Result<_>>()?;
        Ok(lambda_m * losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let mut adapter = CoefficientAdapter::new(marker_set.a_sym.clone());
    let initial = mean_loss(&adapter)?;
    if !initial.is_finite() {
        return Err(Error::Numerical("initial training loss is not finite".into()));
    }
    let mut history = TrainHistory {
        initial_loss: initial,
        epoch_loss: Vec::with_capacity(config.epochs),
        learning_rate: Vec::with_capacity(config.epochs),
        rejected_epochs: 0,
    };
    let mut lr = config.learning_rate;
    let mut best = initial;
    let mut rng = seeded_rng(config.seed, 400);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut state = StepState::new(&adapter);
    for epoch in 0..config.epochs {
        let saved = (adapter.clone(), state.clone());
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let grads: Vec<(f64, DVector<f64>)> = batch
                .par_iter()
                .map(|&s| sample_grad(&adapter, &train_set[s].estimate, &targets[s].view(&regressor, &dataset.faces), &terms))
                .collect::<Result<_>>()?;
            let scale = lambda_m / batch.len() as f64;
            let mut g_w = DMatrix::zeros(adapter.w.nrows(), adapter.w.ncols());
            let mut g_b = DVector::zeros(adapter.b.len());
            for (&s, (loss, d_a)) in batch.iter().zip(&grads) {
                if !loss.is_finite() || d_a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite loss in epoch {epoch}; lower the learning rate (now {lr:e})"
                    )));
                }
                let c = DVector::from_column_slice(&train_set[s].estimate.c);
                g_w.ger(scale, d_a, &c, 1.0);
                g_b.axpy(scale, d_a, 1.0);
            }
            state.step(&mut adapter, &g_w, &g_b, lr, config.optimizer);
        }
        let loss = mean_loss(&adapter)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss after epoch {epoch}; lower the learning rate (now {lr:e})"
            )));
        }
        if loss > best {
            (adapter, state) = saved;
            lr *= 0.5;
            history.rejected_epochs += 1;
            log::info!("epoch {epoch}: loss {loss:.6} above {best:.6}, rolled back, learning rate now {lr:e}");
        } else {
            best = loss;
            log::info!("epoch {epoch}: loss {loss:.6}");
        }
        history.epoch_loss.push(best);
        history.learning_rate.push(lr);
    }
    Ok((adapter, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterManifest {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "W_file")]
    w_file: String,
    b_file: String,
    marker_set: String,
}

/// Writes `W`, `b` and a manifest. File names are relative to the manifest's
/// directory; the base matrix comes from the referenced marker set on load.
pub fn save_adapter(adapter: &CoefficientAdapter, manifest_path: impl AsRef<Path>, marker_set_file: &str) -> Result<()> {
    adapter.validate()?;
    let path = manifest_path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("adapter");
    let w_file = format!("{stem}_W.vmat");
    let b_file = format!("{stem}_b.vmat");
    save_vmat(&adapter.w, dir.join(&w_file))?;
    save_vmat(&DMatrix::from_column_slice(adapter.b.len(), 1, adapter.b.as_slice()), dir.join(&b_file))?;
    let manifest = AdapterManifest {
        version: 1,
        k: adapter.k(),
        m: adapter.n_vertices(),
        w_file,
        b_file,
        marker_set: marker_set_file.to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads an adapter and the marker set it was trained on.
pub fn load_adapter(manifest_path: impl AsRef<Path>) -> Result<(CoefficientAdapter, MarkerSet)> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: AdapterManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let set_path: PathBuf = dir.join(&manifest.marker_set);
    let set = load_marker_set(&set_path)?;
    let w = load_vmat(dir.join(&manifest.w_file))?;
    let b = load_vmat(dir.join(&manifest.b_file))?;
    if set.k() != manifest.k || set.n_vertices() != manifest.m {
        return Err(Error::format(
            path,
            format!(
                "manifest says K = {}, M = {} but {} has K = {}, M = {}",
                manifest.k,
                manifest.m,
                set_path.display(),
                set.k(),
                set.n_vertices()
            ),
        ));
    }
    let adapter = CoefficientAdapter {
        w,
        b: DVector::from_column_slice(b.as_slice()),
        base: set.a_sym.clone(),
    };
    adapter.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((adapter, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::project_to_simplex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [0; 3].map(|_| rng.random_range(-100.0..100.0))).collect()
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, k: usize, m: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(k, m);
        for i in 0..m {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            a.set_column(i, &DVector::from_vec(project_to_simplex(&raw).into_inner()));
        }
        a
    }

    #[test]
    fn fixed_reconstruction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 4);
        let mut a = DMatrix::zeros(4, 3);
        a[(2, 0)] = 1.0;
        a[(0, 1)] = 1.0;
        a[(3, 2)] = 1.0;
        let m = reconstruct_fixed(&p, &a).unwrap();
        assert_eq!(m.vertices, vec![p[2], p[0], p[3]]);

        let a = random_stochastic(&mut rng, 4, 7);
        let m = reconstruct_fixed(&p, &a).unwrap();
        for i in 0..7 {
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += a[(j, i)] * p[j][c];
                }
                assert!((m.vertices[i][c] - s).abs() < 1e-12);
            }
        }
        assert!(reconstruct_fixed(&p[..3], &a).is_err());

        // linear in P
        let q = random_points(&mut rng, 4);
        let mix: Vec<Point3> = p.iter().zip(&q).map(|(x, y)| [0, 1, 2].map(|c| 2.0 * x[c] - 0.5 * y[c])).collect();
        let lhs = reconstruct_fixed(&mix, &a).unwrap();
        let mp = reconstruct_fixed(&p, &a).unwrap();
        let mq = reconstruct_fixed(&q, &a).unwrap();
        for i in 0..7 {
            for c in 0..3 {
                assert!((lhs.vertices[i][c] - (2.0 * mp.vertices[i][c] - 0.5 * mq.vertices[i][c])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_regression_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mesh = MeshSample::new(random_points(&mut rng, 5));
        let mut reg = DMatrix::zeros(5, 2);
        reg[(3, 0)] = 1.0;
        reg.column_mut(1).fill(0.2);
        let j = regress_joints(&mesh, &reg).unwrap();
        assert_eq!(j[0], mesh.vertices[3]);
        for c in 0..3 {
            let centroid: f64 = mesh.vertices.iter().map(|v| v[c]).sum::<f64>() / 5.0;
            assert!((j[1][c] - centroid).abs() < 1e-12);
        }
        assert!(regress_joints(&mesh, &DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn adapter_forward_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_stochastic(&mut rng, 3, 5);
        let mut ad = CoefficientAdapter::new(base.clone());
        let c = [0.2, 0.9, 0.5];
        assert_eq!(adapter_forward(&ad, &c).unwrap(), base);

        let p = random_points(&mut rng, 3);
        assert_eq!(
            reconstruct_adaptive(&p, &c, &ad).unwrap(),
            reconstruct_fixed(&p, &base).unwrap()
        );

        ad.b = DVector::from_fn(15, |r, _| r as f64 * 0.01);
        let out = adapter_forward(&ad, &c).unwrap();
        for j in 0..3 {
            for i in 0..5 {
                assert_eq!(out[(j, i)], base[(j, i)] + (j * 5 + i) as f64 * 0.01);
            }
        }

        ad.w = DMatrix::from_fn(15, 3, |_, _| rng.random_range(-1.0..1.0));
        let zero = adapter_forward(&ad, &[0.0; 3]).unwrap();
        let one = adapter_forward(&ad, &c).unwrap();
        let scaled = adapter_forward(&ad, &c.map(|v| 2.5 * v)).unwrap();
        assert!(((&scaled - &zero) - (&one - &zero) * 2.5).norm() < 1e-12);
        assert!(adapter_forward(&ad, &[0.0; 2]).is_err());
    }

    struct Instance {
        adapter: CoefficientAdapter,
        est: MarkerEstimate,
        gt: MeshSample,
        joints: Vec<Point3>,
        reg: DMatrix<f64>,
        faces: Vec<[usize; 3]>,
    }

    fn instance(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, m) = (3, 6);
        let base = random_stochastic(&mut rng, k, m);
        let mut adapter = CoefficientAdapter::new(base);
        adapter.w = DMatrix::from_fn(k * m, k, |_, _| rng.random_range(-0.1..0.1));
        adapter.b = DVector::from_fn(k * m, |_, _| rng.random_range(-0.1..0.1));
        let est = MarkerEstimate {
            p: random_points(&mut rng, k),
            c: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let gt = MeshSample::new(random_points(&mut rng, m));
        let reg = DMatrix::from_fn(m, 2, |_, _| rng.random_range(0.0..1.0));
        let joints = random_points(&mut rng, 2);
        let faces = vec![[0, 1, 2], [1, 3, 2], [2, 3, 4], [3, 5, 4], [0, 2, 5]];
        Instance { adapter, est, gt, joints, reg, faces }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let all = [
            MeshTerms { vertex: 1.0, pose: 0.0, normal: 0.0, edge: 0.0 },
            MeshTerms { vertex: 0.0, pose: 1.0, normal: 0.0, edge: 0.0 },
            MeshTerms { vertex: 0.0, pose: 0.0, normal: 1.0, edge: 0.0 },
            MeshTerms { vertex: 0.0, pose: 0.0, normal: 0.0, edge: 1.0 },
            MeshTerms::from(&LossWeights::default()),
        ];
        for seed in 0..3 {
            let inst = instance(seed);
            let target = MeshTarget { mesh: &inst.gt, joints: &inst.joints, regressor: &inst.reg, faces: &inst.faces };
            for terms in &all {
                let (_, dw, db) = adapter_loss_grad(&inst.adapter, &inst.est, &target, terms).unwrap();
                let eval = |ad: &CoefficientAdapter| adapter_loss_grad(ad, &inst.est, &target, terms).unwrap().0;
                let h = 1e-5;
                for idx in 0..inst.adapter.w.len() {
                    let mut plus = inst.adapter.clone();
                    plus.w[idx] += h;
                    let mut minus = inst.adapter.clone();
                    minus.w[idx] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    assert!((fd - dw[idx]).abs() <= 1e-6f64.max(1e-4 * fd.abs()), "{terms:?} W[{idx}]: {fd} vs {}", dw[idx]);
                }
                for idx in 0..inst.adapter.b.len() {
                    let mut plus = inst.adapter.clone();
                    plus.b[idx] += h;
                    let mut minus = inst.adapter.clone();
                    minus.b[idx] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    assert!((fd - db[idx]).abs() <= 1e-6f64.max(1e-4 * fd.abs()), "{terms:?} b[{idx}]");
                }
            }
        }
    }

    fn tiny_dataset(rng: &mut ChaCha8Rng) -> (MeshDataset, MarkerSet) {
        let m = 6;
        let samples: Vec<MeshSample> = (0..4).map(|_| MeshSample::new(random_points(rng, m))).collect();
        let faces = vec![[0, 1, 2], [1, 3, 2], [2, 3, 4], [3, 5, 4]];
        let reg = DMatrix::from_fn(m, 2, |i, j| if i % 2 == j { 1.0 / 3.0 } else { 0.0 });
        let ds = MeshDataset::new(samples, faces, Some(reg)).unwrap();
        let x = crate::dataset::assemble_data_matrix(&ds);
        let pairing = crate::dataset::compute_symmetric_pairs(&ds.template, 1e-3);
        let set = crate::markers::marker_set_from_indices(&x, vec![0, 3, 5], &pairing, &ds.template).unwrap();
        (ds, set)
    }

    #[test]
    fn training_descends_and_zero_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ds, set) = tiny_dataset(&mut rng);
        let sample = TrainSample {
            estimate: MarkerEstimate {
                p: set.vertex_indices.iter().map(|&i| ds.samples[1].vertices[i].map(|c| c + 5.0)).collect(),
                c: vec![0.9, 0.3, 0.7],
            },
            mesh: ds.samples[1].clone(),
        };
        let config = AdapterTrainConfig {
            learning_rate: 1e-4,
            epochs: 0,
            batch_size: 1,
            optimizer: Optimizer::Sgd,
            loss_weights: LossWeights::default(),
            seed: 1,
        };
        let (ad, hist) = train_adapter(std::slice::from_ref(&sample), &ds, &config, &set).unwrap();
        assert_eq!(ad, CoefficientAdapter::new(set.a_sym.clone()));
        assert!(hist.epoch_loss.is_empty());

        let weights = LossWeights { lambda_e: 0.0, ..Default::default() };
        for (optimizer, lr) in [(Optimizer::Sgd, 1e-4), (Optimizer::Adam, 1e-3)] {
            let cfg = AdapterTrainConfig { epochs: 50, loss_weights: weights, optimizer, learning_rate: lr, ..config.clone() };
            let (_, hist) = train_adapter(std::slice::from_ref(&sample), &ds, &cfg, &set).unwrap();
            assert!(*hist.epoch_loss.last().unwrap() < hist.initial_loss, "{optimizer:?}");
            for w in hist.epoch_loss.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ds, set) = tiny_dataset(&mut rng);
        let sample = TrainSample {
            estimate: MarkerEstimate {
                p: set.vertex_indices.iter().map(|&i| ds.samples[2].vertices[i]).collect(),
                c: vec![1.0; 3],
            },
            mesh: ds.samples[2].clone(),
        };
        let config = AdapterTrainConfig { learning_rate: 1e300, epochs: 3, batch_size: 1, ..Default::default() };
        let err = train_adapter(&[sample], &ds, &config, &set).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn adapter_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, set) = tiny_dataset(&mut rng);
        let mut ad = CoefficientAdapter::new(set.a_sym.clone());
        ad.w[(4, 1)] = 0.25;
        ad.b[7] = -1.5;
        let dir = tempfile::tempdir().unwrap();
        crate::markers::save_marker_set(&set, dir.path().join("markers.json"), "markers_A.vmat").unwrap();
        save_adapter(&ad, dir.path().join("adapter.json"), "markers.json").unwrap();
        let (back, back_set) = load_adapter(dir.path().join("adapter.json")).unwrap();
        assert_eq!(back, ad);
        assert_eq!(back_set, set);
    }
}

//! Training losses and evaluation metrics.
//!
//! Every term is a mean: L1 terms over coordinates, normal and edge terms over
//! the three edges of every face. The `*_grad` variants also return the
//! gradient with respect to the predicted vertices.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MeshSample;
use crate::error::{Error, Result};
use crate::heatmap::VoxelHeatmapSet;
use crate::reconstruction::regress_joints;
use crate::Point3;

/// Floor inside the log of the confidence loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_vm: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vm: 1.0,
            lambda_c: 1.0,
            lambda_m: 1.0,
            lambda_e: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_vm, self.lambda_c, self.lambda_m, self.lambda_e];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Per-term weights inside the mesh loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshTerms {
    pub vertex: f64,
    pub pose: f64,
    pub normal: f64,
    pub edge: f64,
}

impl MeshTerms {
    pub fn only_vertex() -> Self {
        Self { vertex: 1.0, pose: 0.0, normal: 0.0, edge: 0.0 }
    }
}

impl From<&LossWeights> for MeshTerms {
    fn from(w: &LossWeights) -> Self {
        Self {
            vertex: 1.0,
            pose: 1.0,
            normal: 1.0,
            edge: w.lambda_e,
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} points")));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean_abs(a: &[Point3], b: &[Point3]) -> f64 {
    let n = (3 * a.len()).max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Mean absolute marker-coordinate error.
pub fn loss_vm(p: &[Point3], p_gt: &[Point3]) -> Result<f64> {
    same_len(p.len(), p_gt.len(), "marker positions")?;
    Ok(mean_abs(p, p_gt))
}

/// `−Σ_z log(H_z(voxel containing the GT marker) + ε)`.
pub fn loss_conf(hm: &VoxelHeatmapSet, p_gt: &[Point3]) -> Result<f64> {
    same_len(hm.k, p_gt.len(), "heatmaps and GT markers")?;
    Ok(p_gt
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let [d, h, w] = hm.grid.containing_voxel(p);
            -(hm.value(k, d, h, w) + LOG_EPS).ln()
        })
        .sum())
}

pub fn loss_vertex(m_hat: &MeshSample, m_gt: &MeshSample) -> Result<f64> {
    same_len(m_hat.n_vertices(), m_gt.n_vertices(), "meshes")?;
    Ok(mean_abs(&m_hat.vertices, &m_gt.vertices))
}

fn vertex_grad(m_hat: &MeshSample, m_gt: &MeshSample, scale: f64, grad: &mut [Point3]) -> f64 {
    let n = (3 * m_hat.n_vertices()).max(1) as f64;
    let mut total = 0.0;
    for (i, (p, q)) in m_hat.vertices.iter().zip(&m_gt.vertices).enumerate() {
        for c in 0..3 {
            let d = p[c] - q[c];
            total += d.abs();
            grad[i][c] += scale * sign(d) / n;
        }
    }
    total / n
}

fn check_regressor(reg: &DMatrix<f64>, m: usize, j: usize) -> Result<()> {
    if reg.nrows() != m || reg.ncols() != j {
        return Err(Error::Shape(format!(
            "regressor is {}x{}, expected {m}x{j}",
            reg.nrows(),
            reg.ncols()
        )));
    }
    Ok(())
}

pub fn loss_pose(m_hat: &MeshSample, j_gt: &[Point3], regressor: &DMatrix<f64>) -> Result<f64> {
    check_regressor(regressor, m_hat.n_vertices(), j_gt.len())?;
    let joints = regress_joints(m_hat, regressor)?;
    Ok(mean_abs(&joints, j_gt))
}

fn pose_grad(m_hat: &MeshSample, j_gt: &[Point3], reg: &DMatrix<f64>, scale: f64, grad: &mut [Point3]) -> Result<f64> {
    let joints = regress_joints(m_hat, reg)?;
    let n = (3 * j_gt.len()).max(1) as f64;
    let mut total = 0.0;
    for (j, (p, q)) in joints.iter().zip(j_gt).enumerate() {
        let mut s = [0.0; 3];
        for c in 0..3 {
            let d = p[c] - q[c];
            total += d.abs();
            s[c] = scale * sign(d) / n;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            let r = reg[(i, j)];
            if r != 0.0 {
                for c in 0..3 {
                    g[c] += r * s[c];
                }
            }
        }
    }
    Ok(total / n)
}

fn vec3(p: &Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn check_faces(faces: &[[usize; 3]], m: usize) -> Result<()> {
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= m)) {
        return Err(Error::Shape(format!("face {f:?} references a vertex beyond {m}")));
    }
    Ok(())
}

const FACE_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

/// Normal-consistency loss with the counts of skipped terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalLoss {
    pub value: f64,
    /// GT faces with zero area, whose terms are skipped.
    pub degenerate_faces: usize,
    /// Predicted edges of zero length, contributing 0.
    pub zero_edges: usize,
}

fn normal_grad(
    m_hat: &MeshSample,
    m_gt: &MeshSample,
    faces: &[[usize; 3]],
    scale: f64,
    mut grad: Option<&mut [Point3]>,
) -> NormalLoss {
    let mut out = NormalLoss { value: 0.0, degenerate_faces: 0, zero_edges: 0 };
    let per_term = 1.0 / (3 * faces.len()).max(1) as f64;
    for f in faces {
        let g = [0, 1, 2].map(|c| vec3(&m_gt.vertices[f[c]]));
        let n = (g[1] - g[0]).cross(&(g[2] - g[0]));
        let area2 = n.norm();
        if !(area2 > 0.0) {
            out.degenerate_faces += 1;
            continue;
        }
        let n = n / area2;
        for &(a, b) in &FACE_EDGES {
            let e = vec3(&m_hat.vertices[f[a]]) - vec3(&m_hat.vertices[f[b]]);
            let len = e.norm();
            if !(len > 0.0) {
                out.zero_edges += 1;
                continue;
            }
            let dot = e.dot(&n) / len;
            out.value += per_term * dot.abs();
            if let Some(grad) = grad.as_deref_mut() {
                // d/de of (e·n)/|e|
                let de = (n - e * (e.dot(&n) / (len * len))) * (scale * per_term * sign(dot) / len);
                for c in 0..3 {
                    grad[f[a]][c] += de[c];
                    grad[f[b]][c] -= de[c];
                }
            }
        }
    }
    out
}

pub fn loss_normal_detail(m_hat: &MeshSample, m_gt: &MeshSample, faces: &[[usize; 3]]) -> Result<NormalLoss> {
    same_len(m_hat.n_vertices(), m_gt.n_vertices(), "meshes")?;
    check_faces(faces, m_hat.n_vertices())?;
    let out = normal_grad(m_hat, m_gt, faces, 0.0, None);
    if out.degenerate_faces > 0 || out.zero_edges > 0 {
        log::debug!(
            "normal loss skipped {} degenerate faces and {} zero-length edges",
            out.degenerate_faces,
            out.zero_edges
        );
    }
    Ok(out)
}

/// `|⟨(M̂_i − M̂_j)/‖M̂_i − M̂_j‖, n*_f⟩|` averaged over the three edges of
/// every face.
pub fn loss_normal(m_hat: &MeshSample, m_gt: &MeshSample, faces: &[[usize; 3]]) -> Result<f64> {
    Ok(loss_normal_detail(m_hat, m_gt, faces)?.value)
}

fn edge_grad(m_hat: &MeshSample, m_gt: &MeshSample, faces: &[[usize; 3]], scale: f64, mut grad: Option<&mut [Point3]>) -> f64 {
    let per_term = 1.0 / (3 * faces.len()).max(1) as f64;
    let mut total = 0.0;
    for f in faces {
        for &(a, b) in &FACE_EDGES {
            let e = vec3(&m_hat.vertices[f[a]]) - vec3(&m_hat.vertices[f[b]]);
            let e_gt = vec3(&m_gt.vertices[f[a]]) - vec3(&m_gt.vertices[f[b]]);
            let len = e.norm();
            let diff = len - e_gt.norm();
            total += per_term * diff.abs();
            if let Some(grad) = grad.as_deref_mut() {
                if len > 0.0 {
                    let de = e * (scale * per_term * sign(diff) / len);
                    for c in 0..3 {
                        grad[f[a]][c] += de[c];
                        grad[f[b]][c] -= de[c];
                    }
                }
            }
        }
    }
    total
}

/// `| ‖M̂_i − M̂_j‖ − ‖M*_i − M*_j‖ |` averaged over the three edges of every
/// face.
pub fn loss_edge(m_hat: &MeshSample, m_gt: &MeshSample, faces: &[[usize; 3]]) -> Result<f64> {
    same_len(m_hat.n_vertices(), m_gt.n_vertices(), "meshes")?;
    check_faces(faces, m_hat.n_vertices())?;
    Ok(edge_grad(m_hat, m_gt, faces, 0.0, None))
}

/// Everything the mesh loss compares against.
#[derive(Debug, Clone, Copy)]
pub struct MeshTarget<'a> {
    pub mesh: &'a MeshSample,
    pub joints: &'a [Point3],
    pub regressor: &'a DMatrix<f64>,
    pub faces: &'a [[usize; 3]],
}

impl MeshTarget<'_> {
    fn check(&self, m_hat: &MeshSample) -> Result<()> {
        same_len(m_hat.n_vertices(), self.mesh.n_vertices(), "meshes")?;
        check_regressor(self.regressor, m_hat.n_vertices(), self.joints.len())?;
        check_faces(self.faces, m_hat.n_vertices())
    }
}

/// Weighted mesh loss and its gradient with respect to the predicted vertices.
pub fn mesh_loss_grad(m_hat: &MeshSample, target: &MeshTarget, terms: &MeshTerms) -> Result<(f64, Vec<Point3>)> {
    target.check(m_hat)?;
    let mut grad = vec![[0.0; 3]; m_hat.n_vertices()];
    let mut total = 0.0;
    if terms.vertex != 0.0 {
        total += terms.vertex * vertex_grad(m_hat, target.mesh, terms.vertex, &mut grad);
    }
    if terms.pose != 0.0 {
        total += terms.pose * pose_grad(m_hat, target.joints, target.regressor, terms.pose, &mut grad)?;
    }
    if terms.normal != 0.0 {
        total += terms.normal * normal_grad(m_hat, target.mesh, target.faces, terms.normal, Some(&mut grad)).value;
    }
    if terms.edge != 0.0 {
        total += terms.edge * edge_grad(m_hat, target.mesh, target.faces, terms.edge, Some(&mut grad));
    }
    Ok((total, grad))
}

/// `L_vertex + L_pose + L_normal + λ_e L_edge`.
pub fn loss_mesh(
    m_hat: &MeshSample,
    m_gt: &MeshSample,
    j_gt: &[Point3],
    regressor: &DMatrix<f64>,
    faces: &[[usize; 3]],
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let target = MeshTarget { mesh: m_gt, joints: j_gt, regressor, faces };
    target.check(m_hat)?;
    Ok(loss_vertex(m_hat, m_gt)?
        + loss_pose(m_hat, j_gt, regressor)?
        + loss_normal(m_hat, m_gt, faces)?
        + weights.lambda_e * loss_edge(m_hat, m_gt, faces)?)
}

/// Inputs of the full training loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub markers: &'a [Point3],
    pub markers_gt: &'a [Point3],
    pub heatmaps: &'a VoxelHeatmapSet,
    pub mesh: &'a MeshSample,
    pub target: MeshTarget<'a>,
}

/// `λ_vm L_vm + λ_c L_conf + λ_m L_mesh`.
pub fn total_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let t = &inputs.target;
    let mesh = loss_mesh(inputs.mesh, t.mesh, t.joints, t.regressor, t.faces, weights)?;
    Ok(weights.lambda_vm * loss_vm(inputs.markers, inputs.markers_gt)?
        + weights.lambda_c * loss_conf(inputs.heatmaps, inputs.markers_gt)?
        + weights.lambda_m * mesh)
}

fn mean_dist(a: &[Point3], b: &[Point3]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

/// Mean per-vertex Euclidean error.
pub fn mpve(m_hat: &MeshSample, m_gt: &MeshSample) -> Result<f64> {
    same_len(m_hat.n_vertices(), m_gt.n_vertices(), "meshes")?;
    Ok(mean_dist(&m_hat.vertices, &m_gt.vertices))
}

/// Mean per-joint Euclidean error.
pub fn mpjpe(j_hat: &[Point3], j_gt: &[Point3]) -> Result<f64> {
    same_len(j_hat.len(), j_gt.len(), "joints")?;
    Ok(mean_dist(j_hat, j_gt))
}

/// Similarity transform `x ↦ s R x + t` with `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Point3) -> Point3 {
        let v = self.rotation * vec3(p) * self.scale + self.translation;
        [v[0], v[1], v[2]]
    }
}

/// Least-squares similarity aligning `src` onto `dst` (reflections excluded).
pub fn procrustes(src: &[Point3], dst: &[Point3]) -> Result<Similarity> {
    same_len(src.len(), dst.len(), "joints")?;
    if src.len() < 3 {
        return Err(Error::Parameter(format!("alignment needs at least 3 points, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().map(vec3).sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().map(vec3).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut var_d = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let a = vec3(p) - mu_s;
        let b = vec3(q) - mu_d;
        cov += b * a.transpose();
        var_s += a.norm_squared();
        var_d += b.norm_squared();
    }
    let scale_ref = mu_s.norm().max(mu_d.norm()).max(1.0);
    if var_s <= 1e-24 * scale_ref * scale_ref * n || var_d <= 1e-24 * scale_ref * scale_ref * n {
        return Err(Error::Degenerate("alignment points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    // nalgebra orders singular values descending, so the flip hits the smallest
    let rotation = u * s * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity { scale, rotation, translation })
}

/// MPJPE after Procrustes alignment of the prediction onto the ground truth.
pub fn pa_mpjpe(j_hat: &[Point3], j_gt: &[Point3]) -> Result<f64> {
    let sim = procrustes(j_hat, j_gt)?;
    let aligned: Vec<Point3> = j_hat.iter().map(|p| sim.apply(p)).collect();
    mpjpe(&aligned, j_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mpve: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregate: MetricRow,
    pub per_sample: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mpve(&self) -> f64 {
        self.aggregate.mpve
    }
}

/// Per-sample metrics and their means. Joint metrics need a regressor; the
/// aligned one also needs at least 3 joints.
pub fn evaluate_meshes(
    pred: &[MeshSample],
    gt: &[MeshSample],
    regressor: Option<&DMatrix<f64>>,
) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted meshes for {} ground-truth meshes",
            pred.len(),
            gt.len()
        )));
    }
    let rows: Vec<MetricRow> = pred
        .par_iter()
        .zip(gt)
        .map(|(p, g)| {
            let mpve = mpve(p, g)?;
            let (mpjpe_v, pa) = match regressor {
                Some(r) => {
                    let jp = regress_joints(p, r)?;
                    let jg = regress_joints(g, r)?;
                    let pa = if jg.len() >= 3 { Some(pa_mpjpe(&jp, &jg)?) } else { None };
                    (Some(mpjpe(&jp, &jg)?), pa)
                }
                None => (None, None),
            };
            Ok(MetricRow { mpve, mpjpe: mpjpe_v, pa_mpjpe: pa })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Option<f64> {
        let mut s = 0.0;
        for r in &rows {
            s += f(r)?;
        }
        Some(s / n)
    };
    let aggregate = MetricRow {
        mpve: mean(&|r| Some(r.mpve)).unwrap_or(0.0),
        mpjpe: mean(&|r| r.mpjpe),
        pa_mpjpe: mean(&|r| r.pa_mpjpe),
    };
    Ok(MetricReport { aggregate, per_sample: rows })
}

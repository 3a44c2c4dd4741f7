//! Desk-scale synthetic humanoid datasets.
//!
//! A bilaterally symmetric low-poly body (ten tube-shaped parts on a
//! stick-figure armature, T-pose, y up, pelvis at the origin) is posed by
//! per-part rotations about armature joints and a global scale, all driven by
//! a `p`-dimensional Gaussian latent code through fixed random linear maps.
//! Each sample is mirrored left/right with probability 1/2, which makes the
//! pose distribution symmetric. Isotropic Gaussian noise is added last.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MeshDataset, MeshSample};
use crate::error::{Error, Result};
use crate::{seeded_rng, Point3};

const SEGMENTS: usize = 8;
const N_PARTS: usize = 10;

/// Parameters of [`generate_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of meshes N (≥ 10). The first one is the undeformed template.
    pub n_samples: usize,
    /// Approximate vertex count M (≥ 50); the actual count is `80r + 20`.
    pub target_vertices: usize,
    /// Latent pose dimension p (≥ 3).
    pub latent_dim: usize,
    /// Per-coordinate noise standard deviation σ in mm (≥ 0).
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            target_vertices: 500,
            latent_dim: 8,
            noise_sigma: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::Parameter(format!(
                "n_samples must be >= 10, got {}",
                self.n_samples
            )));
        }
        if self.target_vertices < 50 {
            return Err(Error::Parameter(format!(
                "target_vertices must be >= 50, got {}",
                self.target_vertices
            )));
        }
        if self.latent_dim < 3 {
            return Err(Error::Parameter(format!(
                "latent_dim must be >= 3, got {}",
                self.latent_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Part {
    vertices: std::ops::Range<usize>,
    pivot: Vector3<f64>,
    parent: Option<usize>,
    /// Standard deviation (rad) of each rotation-vector component.
    amplitude: f64,
}

/// Template mesh with its armature.
#[derive(Debug, Clone)]
pub struct BodyRig {
    pub template: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    /// Exact mirror partner of every template vertex.
    pub mirror: Vec<usize>,
    /// Armature joint positions on the template.
    pub joints: Vec<Point3>,
    parts: Vec<Part>,
}

struct TubeSpec {
    start: Vector3<f64>,
    end: Vector3<f64>,
    radii: (f64, f64),
    basis: (Vector3<f64>, Vector3<f64>),
    profile: fn(f64) -> f64,
}

fn barrel(t: f64) -> f64 {
    0.85 + 0.15 * (std::f64::consts::PI * t).sin()
}

fn dome(t: f64) -> f64 {
    (std::f64::consts::PI * t).sin().sqrt()
}

fn taper_light(t: f64) -> f64 {
    1.0 - 0.15 * t
}

fn taper_strong(t: f64) -> f64 {
    1.0 - 0.3 * t
}

impl BodyRig {
    /// Builds the template with `r` rings per part, `r` chosen so that the
    /// vertex count `10·(8r + 2)` is closest to `target_vertices`.
    pub fn new(target_vertices: usize) -> Self {
        let per_ring = (N_PARTS * SEGMENTS) as f64;
        let rings = (((target_vertices as f64 - 20.0) / per_ring).round() as usize).max(1);

        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let v3 = Vector3::new;

        let torso = TubeSpec {
            start: v3(0.0, -110.0, 0.0),
            end: v3(0.0, 480.0, 0.0),
            radii: (150.0, 95.0),
            basis: (x, z),
            profile: barrel,
        };
        let head = TubeSpec {
            start: v3(0.0, 490.0, 0.0),
            end: v3(0.0, 720.0, 0.0),
            radii: (75.0, 85.0),
            basis: (x, z),
            profile: dome,
        };
        let left_limbs = [
            (
                TubeSpec {
                    start: v3(175.0, 410.0, 0.0),
                    end: v3(455.0, 410.0, 0.0),
                    radii: (48.0, 48.0),
                    basis: (y, z),
                    profile: taper_light,
                },
                v3(175.0, 410.0, 0.0),
                0.6,
            ),
            (
                TubeSpec {
                    start: v3(465.0, 410.0, 0.0),
                    end: v3(715.0, 410.0, 0.0),
                    radii: (40.0, 40.0),
                    basis: (y, z),
                    profile: taper_strong,
                },
                v3(460.0, 410.0, 0.0),
                0.5,
            ),
            (
                TubeSpec {
                    start: v3(95.0, -120.0, 0.0),
                    end: v3(95.0, -520.0, 0.0),
                    radii: (72.0, 72.0),
                    basis: (x, z),
                    profile: taper_strong,
                },
                v3(95.0, -100.0, 0.0),
                0.35,
            ),
            (
                TubeSpec {
                    start: v3(95.0, -530.0, 0.0),
                    end: v3(95.0, -910.0, 0.0),
                    radii: (52.0, 52.0),
                    basis: (x, z),
                    profile: taper_strong,
                },
                v3(95.0, -525.0, 0.0),
                0.4,
            ),
        ];
        // parents of the four left limbs, relative to part numbering below
        let left_parents = [Some(0), Some(2), None, Some(4)];

        let mut verts: Vec<Vector3<f64>> = Vec::new();
        let mut faces = Vec::new();
        let mut mirror: Vec<usize> = Vec::new();
        let mut parts = Vec::new();

        for (spec, pivot, parent, amp) in [
            (&torso, Vector3::zeros(), None, 0.12),
            (&head, v3(0.0, 480.0, 0.0), Some(0), 0.25),
        ] {
            let start = verts.len();
            add_tube(&mut verts, &mut faces, spec, rings, false);
            symmetrize_midline_tube(&mut verts[start..], rings, &mut mirror, start);
            parts.push(Part {
                vertices: start..verts.len(),
                pivot,
                parent,
                amplitude: amp,
            });
        }

        let mut left_ranges = Vec::new();
        for ((spec, pivot, amp), parent) in left_limbs.iter().zip(left_parents) {
            let start = verts.len();
            add_tube(&mut verts, &mut faces, spec, rings, false);
            left_ranges.push(start..verts.len());
            parts.push(Part {
                vertices: start..verts.len(),
                pivot: *pivot,
                parent,
                amplitude: *amp,
            });
        }
        mirror.resize(verts.len(), 0);
        for (k, range) in left_ranges.iter().enumerate() {
            let start = verts.len();
            let offset = start - range.start;
            for i in range.clone() {
                let v = verts[i];
                verts.push(v3(-v.x, v.y, v.z));
            }
            let n_faces = faces.len();
            for f in 0..n_faces {
                let [a, b, c] = faces[f];
                if range.contains(&a) {
                    // reversed winding keeps mirrored faces outward
                    faces.push([a + offset, c + offset, b + offset]);
                }
            }
            mirror.resize(verts.len(), 0);
            for i in range.clone() {
                mirror[i] = i + offset;
                mirror[i + offset] = i;
            }
            let left = &parts[2 + k];
            let parent = left.parent.map(|p| if p >= 2 { p + 4 } else { p });
            let pivot = v3(-left.pivot.x, left.pivot.y, left.pivot.z);
            let amplitude = left.amplitude;
            parts.push(Part {
                vertices: start..verts.len(),
                pivot,
                parent,
                amplitude,
            });
        }

        let mut joints: Vec<Point3> = vec![[0.0, 0.0, 0.0], [0.0, 480.0, 0.0], [0.0, 700.0, 0.0]];
        for side in [1.0, -1.0] {
            for j in [
                [175.0, 410.0, 0.0],
                [460.0, 410.0, 0.0],
                [715.0, 410.0, 0.0],
                [95.0, -100.0, 0.0],
                [95.0, -525.0, 0.0],
                [95.0, -910.0, 0.0],
            ] {
                joints.push([side * j[0], j[1], j[2]]);
            }
        }

        Self {
            template: verts.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces,
            mirror,
            joints,
            parts,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    /// Upper bound on the rank of the noise-free data matrix: every part moves
    /// by an affine map, so its vertex trajectories span at most 4 dimensions
    /// (the homogeneous template coordinates).
    pub fn rank_bound(&self) -> usize {
        4 * self.parts.len()
    }

    /// Poses the template with one rotation vector (axis·angle, rad) per part
    /// and a global scale about the origin.
    pub fn pose(&self, rotations: &[Vector3<f64>], scale: f64) -> Vec<Point3> {
        assert_eq!(rotations.len(), self.parts.len());
        let mut global: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(self.parts.len());
        for (p, part) in self.parts.iter().enumerate() {
            let r = Rotation3::new(rotations[p]).into_inner();
            let t = part.pivot - r * part.pivot;
            let g = match part.parent {
                Some(par) => {
                    let (pr, pt) = global[par];
                    (pr * r, pr * t + pt)
                }
                None => (r, t),
            };
            global.push(g);
        }
        let mut out = vec![[0.0; 3]; self.template.len()];
        for (p, part) in self.parts.iter().enumerate() {
            let (r, t) = global[p];
            for i in part.vertices.clone() {
                let v = Vector3::from(self.template[i]);
                let w = (r * v + t) * scale;
                out[i] = [w.x, w.y, w.z];
            }
        }
        out
    }

    /// Reflects a posed mesh through `x = 0`, relabelling vertices so that
    /// vertex `i` takes the mirrored position of its partner.
    pub fn mirror_pose(&self, posed: &[Point3]) -> Vec<Point3> {
        (0..posed.len())
            .map(|i| {
                let v = posed[self.mirror[i]];
                [-v[0], v[1], v[2]]
            })
            .collect()
    }

    /// J = 15 joint regressor: each joint averages its 8 nearest template vertices.
    pub fn joint_regressor(&self) -> DMatrix<f64> {
        let m = self.template.len();
        let mut reg = DMatrix::zeros(m, self.joints.len());
        for (j, q) in self.joints.iter().enumerate() {
            let mut order: Vec<(f64, usize)> = self
                .template
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let d2: f64 = (0..3).map(|c| (v[c] - q[c]).powi(2)).sum();
                    (d2, i)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in order.iter().take(8) {
                reg[(i, j)] = 1.0 / 8.0;
            }
        }
        reg
    }
}

/// Appends a capped tube: start cap, `rings` rings of `SEGMENTS` vertices,
/// end cap.
fn add_tube(
    verts: &mut Vec<Vector3<f64>>,
    faces: &mut Vec<[usize; 3]>,
    spec: &TubeSpec,
    rings: usize,
    flip: bool,
) {
    let base = verts.len();
    verts.push(spec.start);
    let (u, v) = spec.basis;
    for k in 0..rings {
        let t = (k + 1) as f64 / (rings + 1) as f64;
        let center = spec.start + (spec.end - spec.start) * t;
        let s = (spec.profile)(t);
        for a in 0..SEGMENTS {
            let theta = 2.0 * std::f64::consts::PI * a as f64 / SEGMENTS as f64;
            verts.push(center + u * (spec.radii.0 * s * theta.cos()) + v * (spec.radii.1 * s * theta.sin()));
        }
    }
    verts.push(spec.end);
    let ring = |k: usize, a: usize| base + 1 + k * SEGMENTS + (a % SEGMENTS);
    let end = base + 1 + rings * SEGMENTS;
    let mut push = |f: [usize; 3]| {
        faces.push(if flip { [f[0], f[2], f[1]] } else { f });
    };
    for a in 0..SEGMENTS {
        push([base, ring(0, a + 1), ring(0, a)]);
        for k in 0..rings - 1 {
            push([ring(k, a), ring(k, a + 1), ring(k + 1, a + 1)]);
            push([ring(k, a), ring(k + 1, a + 1), ring(k + 1, a)]);
        }
        push([end, ring(rings - 1, a), ring(rings - 1, a + 1)]);
    }
}

/// Makes a tube lying on the sagittal plane exactly mirror-symmetric and
/// records its internal mirror map. Ring angle `θ` mirrors to `π − θ`.
fn symmetrize_midline_tube(
    verts: &mut [Vector3<f64>],
    rings: usize,
    mirror: &mut Vec<usize>,
    offset: usize,
) {
    let n = verts.len();
    mirror.resize(offset + n, 0);
    // caps lie on the axis
    for cap in [0, n - 1] {
        verts[cap].x = 0.0;
        mirror[offset + cap] = offset + cap;
    }
    for k in 0..rings {
        let idx = |a: usize| 1 + k * SEGMENTS + a;
        for a in 0..SEGMENTS {
            let b = (SEGMENTS / 2 + SEGMENTS - a) % SEGMENTS;
            mirror[offset + idx(a)] = offset + idx(b);
            if a == b {
                verts[idx(a)].x = 0.0;
            } else if verts[idx(a)].x > 0.0 {
                let src = verts[idx(a)];
                verts[idx(b)] = Vector3::new(-src.x, src.y, src.z);
            }
        }
        // θ = π/2 and 3π/2 map to themselves
        for a in [SEGMENTS / 4, 3 * SEGMENTS / 4] {
            verts[idx(a)].x = 0.0;
        }
    }
}

/// Latent-to-pose map of the synthetic generator.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub rig: BodyRig,
    /// One 3×p matrix per part mapping the latent code to a rotation vector.
    mixing: Vec<DMatrix<f64>>,
    scale_direction: Vec<f64>,
}

impl PoseModel {
    pub fn new(config: &SynthConfig, seed: u64) -> Self {
        let rig = BodyRig::new(config.target_vertices);
        let p = config.latent_dim;
        let mut rng = seeded_rng(seed, 1);
        let norm = 1.0 / (p as f64).sqrt();
        let mixing = rig
            .parts
            .iter()
            .map(|part| {
                DMatrix::from_fn(3, p, |_, _| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * part.amplitude * norm
                })
            })
            .collect();
        let scale_direction = (0..p)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * norm
            })
            .collect();
        Self {
            rig,
            mixing,
            scale_direction,
        }
    }

    /// Deterministic noise-free pose for a latent code.
    pub fn sample(&self, latent: &[f64], mirrored: bool) -> Vec<Point3> {
        let z = nalgebra::DVector::from_column_slice(latent);
        let rotations: Vec<Vector3<f64>> = self
            .mixing
            .iter()
            .map(|m| {
                let w = m * &z;
                Vector3::new(w[0], w[1], w[2])
            })
            .collect();
        let s: f64 = self
            .scale_direction
            .iter()
            .zip(latent)
            .map(|(a, b)| a * b)
            .sum();
        let posed = self.rig.pose(&rotations, (0.04 * s).exp());
        if mirrored {
            self.rig.mirror_pose(&posed)
        } else {
            posed
        }
    }
}

fn to_f32_precision(v: Point3) -> Point3 {
    v.map(|c| c as f32 as f64)
}

/// Generates a synthetic humanoid dataset; a pure function of `(config, seed)`.
/// Sample 0 is the undeformed, noise-free template.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<MeshDataset> {
    config.validate()?;
    let model = PoseModel::new(config, seed);
    let mut rng = seeded_rng(seed, 2);
    let mut samples = Vec::with_capacity(config.n_samples);
    samples.push(MeshSample::new(
        model.rig.template.iter().copied().map(to_f32_precision).collect(),
    ));
    for _ in 1..config.n_samples {
        let latent: Vec<f64> = (0..config.latent_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mirrored = rng.random_bool(0.5);
        let mut posed = model.sample(&latent, mirrored);
        if config.noise_sigma > 0.0 {
            for v in posed.iter_mut() {
                for c in v.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *c += config.noise_sigma * g;
                }
            }
        }
        samples.push(MeshSample::new(posed.into_iter().map(to_f32_precision).collect()));
    }
    MeshDataset::new(samples, model.rig.faces.clone(), Some(model.rig.joint_regressor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assemble_data_matrix, compute_symmetric_pairs};

    #[test]
    fn template_is_exactly_mirror_symmetric() {
        let rig = BodyRig::new(500);
        assert_eq!(rig.n_vertices(), 500);
        for (i, v) in rig.template.iter().enumerate() {
            let w = rig.template[rig.mirror[i]];
            assert_eq!([-v[0], v[1], v[2]], w, "vertex {i}");
            assert_eq!(rig.mirror[rig.mirror[i]], i);
        }
        let pairing = compute_symmetric_pairs(&MeshSample::new(rig.template.clone()), 1.0);
        assert!(pairing.warnings.is_empty(), "{:?}", pairing.warnings);
        for &(i, j) in &pairing.pairs {
            assert_eq!(rig.mirror[i], j);
        }
        for &i in &pairing.midline {
            assert_eq!(rig.mirror[i], i);
        }
    }

    #[test]
    fn vertex_count_tracks_target() {
        assert_eq!(BodyRig::new(50).n_vertices(), 100);
        assert_eq!(BodyRig::new(1000).n_vertices(), 980);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SynthConfig { n_samples: 5, ..Default::default() },
            SynthConfig { target_vertices: 10, ..Default::default() },
            SynthConfig { latent_dim: 2, ..Default::default() },
            SynthConfig { noise_sigma: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&cfg, 0), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn identical_latent_gives_identical_pose() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..Default::default() };
        let model = PoseModel::new(&cfg, 9);
        let z = vec![0.3, -1.2, 0.5, 0.0, 0.1, 2.0, -0.4, 0.9];
        assert_eq!(model.sample(&z, false), model.sample(&z, false));
        assert_ne!(model.sample(&z, false), model.sample(&z, true));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig { n_samples: 20, ..Default::default() };
        let a = generate_synthetic_dataset(&cfg, 42).unwrap();
        let b = generate_synthetic_dataset(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_free_data_matrix_is_low_rank() {
        // SVD oracle: count singular values above 1e-6 σ_max
        let cfg = SynthConfig {
            n_samples: 100,
            latent_dim: 3,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg, 5).unwrap();
        let x = assemble_data_matrix(&ds);
        let sv = x.x.clone().singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|s| **s > 1e-6 * smax).count();
        let rig = BodyRig::new(cfg.target_vertices);
        assert!(rank <= rig.rank_bound(), "rank {rank} > {}", rig.rank_bound());
        assert!(rank > 3, "rank {rank} suspiciously small");
    }

    #[test]
    fn regressor_columns_are_convex() {
        let rig = BodyRig::new(500);
        let reg = rig.joint_regressor();
        crate::dataset::validate_regressor(&reg, rig.n_vertices()).unwrap();
        assert_eq!(reg.ncols(), 15);
    }
}

//! Mesh datasets: storage, file formats, the vertex-trajectory data matrix and
//! left/right vertex pairing.
//!
//! Coordinates are millimeters in a root-centered frame whose sagittal plane is
//! `x = 0`. Vertex payloads are single-precision values held in `f64`, so a
//! dataset survives a VMDS round trip bit for bit.
//!
//! The first sample doubles as the template pose: VMDS has no template
//! section, so [`MeshDataset::new`] and both loaders use `samples[0]`.

mod obj;
mod symmetry;
mod synth;
mod vmds;

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::Point3;

pub use obj::{format_obj, read_obj, write_obj};
pub use symmetry::{
    compute_symmetric_pairs, matching_cost, Side, SymmetricPairing, DEFAULT_MIDLINE_TOLERANCE,
};
pub use synth::{generate_synthetic_dataset, BodyRig, PoseModel, SynthConfig};
pub use vmds::{read_vmds, write_vmds};

/// Vertex positions of one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSample {
    pub vertices: Vec<Point3>,
}

impl MeshSample {
    pub fn new(vertices: Vec<Point3>) -> Self {
        Self { vertices }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().flatten().all(|x| x.is_finite())
    }
}

/// N meshes sharing one triangle topology.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDataset {
    pub samples: Vec<MeshSample>,
    pub faces: Vec<[usize; 3]>,
    pub template: MeshSample,
    /// M×J joint regressor; each column is a convex combination of vertices.
    pub joint_regressor: Option<DMatrix<f64>>,
}

impl MeshDataset {
    /// Builds and validates a dataset whose template is the first sample.
    pub fn new(
        samples: Vec<MeshSample>,
        faces: Vec<[usize; 3]>,
        joint_regressor: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let template = samples
            .first()
            .cloned()
            .ok_or_else(|| Error::Parameter("dataset needs at least one sample".into()))?;
        let ds = Self {
            samples,
            faces,
            template,
            joint_regressor,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_regressor.as_ref().map_or(0, |r| r.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Parameter("dataset needs at least one sample".into()));
        }
        let m = self.template.n_vertices();
        if !self.template.is_finite() {
            return Err(Error::Parameter("template has non-finite coordinates".into()));
        }
        for (n, s) in self.samples.iter().enumerate() {
            if s.n_vertices() != m {
                return Err(Error::Topology(format!(
                    "sample {n} has {} vertices, expected {m}",
                    s.n_vertices()
                )));
            }
            if !s.is_finite() {
                return Err(Error::Parameter(format!(
                    "sample {n} has non-finite coordinates"
                )));
            }
        }
        validate_faces(&self.faces, m)?;
        if let Some(reg) = &self.joint_regressor {
            validate_regressor(reg, m)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_faces(faces: &[[usize; 3]], n_vertices: usize) -> Result<()> {
    for (f, face) in faces.iter().enumerate() {
        if face.iter().any(|&i| i >= n_vertices) {
            return Err(Error::Topology(format!(
                "face {f} {face:?} references a vertex >= {n_vertices}"
            )));
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(Error::Topology(format!("face {f} {face:?} is degenerate")));
        }
    }
    Ok(())
}

/// Checks an M×J regressor: non-negative columns summing to one.
pub fn validate_regressor(reg: &DMatrix<f64>, n_vertices: usize) -> Result<()> {
    if reg.nrows() != n_vertices {
        return Err(Error::Shape(format!(
            "joint regressor has {} rows, expected {n_vertices}",
            reg.nrows()
        )));
    }
    for j in 0..reg.ncols() {
        let col = reg.column(j);
        if col.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Parameter(format!(
                "joint regressor column {j} has negative or non-finite weights"
            )));
        }
        let s: f64 = col.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "joint regressor column {j} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// The 3N×M matrix of vertex trajectories: column `i` holds vertex `i` across
/// all samples, rows `3n..3n+3` hold sample `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub x: DMatrix<f64>,
    pub n_samples: usize,
    pub n_vertices: usize,
}

impl DataMatrix {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    /// Inverse reshape back into per-sample meshes.
    pub fn to_samples(&self) -> Vec<MeshSample> {
        (0..self.n_samples)
            .map(|n| {
                MeshSample::new(
                    (0..self.n_vertices)
                        .map(|i| {
                            [
                                self.x[(3 * n, i)],
                                self.x[(3 * n + 1, i)],
                                self.x[(3 * n + 2, i)],
                            ]
                        })
                        .collect(),
                )
            })
            .collect()
    }

    /// Vertex `i` of sample `n`.
    pub fn vertex(&self, n: usize, i: usize) -> Point3 {
        [self.x[(3 * n, i)], self.x[(3 * n + 1, i)], self.x[(3 * n + 2, i)]]
    }
}

/// Stacks the dataset into `X ∈ R^{3N×M}` with `X[3n+c, i] = samples[n][i][c]`.
pub fn assemble_data_matrix(dataset: &MeshDataset) -> DataMatrix {
    let n = dataset.n_samples();
    let m = dataset.n_vertices();
    let mut x = DMatrix::zeros(3 * n, m);
    for (s, sample) in dataset.samples.iter().enumerate() {
        for (i, v) in sample.vertices.iter().enumerate() {
            for c in 0..3 {
                x[(3 * s + c, i)] = v[c];
            }
        }
    }
    DataMatrix {
        x,
        n_samples: n,
        n_vertices: m,
    }
}

/// Loads a VMDS file, or a directory of OBJ meshes sharing one topology
/// (read in lexicographic filename order).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<MeshDataset> {
    let path = path.as_ref();
    if path.is_dir() {
        load_obj_directory(path)
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        read_vmds(&bytes, path)
    }
}

/// Writes the dataset in VMDS format.
pub fn save_dataset(dataset: &MeshDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let mut bytes = Vec::new();
    write_vmds(dataset, &mut bytes).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_obj_directory(dir: &Path) -> Result<MeshDataset> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("obj"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "directory contains no .obj files"));
    }

    let mut samples = Vec::with_capacity(files.len());
    let mut faces: Option<Vec<[usize; 3]>> = None;
    for file in &files {
        let (vertices, f) = read_obj(file)?;
        // payloads are single precision
        let vertices = vertices
            .into_iter()
            .map(|v| v.map(|c| c as f32 as f64))
            .collect::<Vec<_>>();
        if let Some(first) = samples.first().map(|s: &MeshSample| s.n_vertices()) {
            if vertices.len() != first {
                return Err(Error::Topology(format!(
                    "{} has {} vertices, {} has {first}",
                    file.display(),
                    vertices.len(),
                    files[0].display()
                )));
            }
        }
        match &faces {
            None => faces = Some(f),
            Some(existing) if *existing != f => {
                return Err(Error::Topology(format!(
                    "{} has a different face list than {}",
                    file.display(),
                    files[0].display()
                )))
            }
            Some(_) => {}
        }
        samples.push(MeshSample::new(vertices));
    }
    MeshDataset::new(samples, faces.unwrap_or_default(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dataset() -> MeshDataset {
        let s0 = MeshSample::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let s1 = MeshSample::new(vec![
            [0.5, 0.0, 0.0],
            [1.5, 0.0, 0.0],
            [0.5, 1.0, 0.0],
            [0.5, 0.0, 1.0],
        ]);
        MeshDataset::new(vec![s0, s1], vec![[0, 1, 2], [0, 2, 3]], None).unwrap()
    }

    #[test]
    fn assemble_small_example() {
        let s = MeshSample::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let ds = MeshDataset::new(vec![s], vec![], None).unwrap();
        let x = assemble_data_matrix(&ds);
        assert_eq!(x.x, DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]));
    }

    #[test]
    fn duplicated_sample_duplicates_rows() {
        let ds = tiny_dataset();
        let mut ds2 = ds.clone();
        ds2.samples[1] = ds2.samples[0].clone();
        let x = assemble_data_matrix(&ds2);
        for r in 0..3 {
            assert_eq!(x.x.row(r), x.x.row(r + 3));
        }
    }

    #[test]
    fn validation_catches_bad_faces_and_regressors() {
        let s = MeshSample::new(vec![[0.0; 3]; 3]);
        assert!(matches!(
            MeshDataset::new(vec![s.clone()], vec![[0, 1, 3]], None),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            MeshDataset::new(vec![s.clone()], vec![[0, 1, 1]], None),
            Err(Error::Topology(_))
        ));
        let bad = DMatrix::from_element(3, 1, 0.5);
        assert!(MeshDataset::new(vec![s.clone()], vec![], Some(bad)).is_err());
        let short = MeshSample::new(vec![[0.0; 3]; 2]);
        assert!(matches!(
            MeshDataset::new(vec![s, short], vec![], None),
            Err(Error::Topology(_))
        ));
        assert!(MeshDataset::new(vec![], vec![], None).is_err());
    }

    proptest! {
        #[test]
        fn reshape_inverse_is_identity(
            n in 1usize..5,
            m in 1usize..7,
            seed in proptest::collection::vec(-1000.0f32..1000.0, 3 * 4 * 6),
        ) {
            let samples: Vec<MeshSample> = (0..n)
                .map(|s| MeshSample::new((0..m).map(|i| {
                    let b = (s * 6 + i) * 3;
                    [seed[b] as f64, seed[b + 1] as f64, seed[b + 2] as f64]
                }).collect()))
                .collect();
            let ds = MeshDataset::new(samples.clone(), vec![], None).unwrap();
            let x = assemble_data_matrix(&ds);
            prop_assert_eq!(x.to_samples(), samples);
        }
    }
}

//! VMDS binary dataset format (little-endian):
//!
//! ```text
//! "VMDS" | u32 version = 1 | u32 N | u32 M | u32 F | u32 J
//! N·M·3 f32   vertices, sample-major then vertex-major, xyz
//! F·3   u32   face indices
//! M·J   f64   joint regressor, row-major (only when J > 0)
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{MeshDataset, MeshSample};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VMDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn write_vmds(dataset: &MeshDataset, w: &mut impl Write) -> std::io::Result<()> {
    let m = dataset.n_vertices();
    let j = dataset.n_joints();
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        dataset.n_samples() as u32,
        m as u32,
        dataset.n_faces() as u32,
        j as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &dataset.samples {
        for v in &s.vertices {
            for c in v {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
    }
    for f in &dataset.faces {
        for &i in f {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    if let Some(reg) = &dataset.joint_regressor {
        for r in 0..reg.nrows() {
            for c in 0..reg.ncols() {
                w.write_all(&reg[(r, c)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_vmds(bytes: &[u8], path: &Path) -> Result<MeshDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file too short for a VMDS header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected \"VMDS\""));
    }
    let mut cur = Cursor {
        bytes,
        pos: 4,
        path,
    };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = cur.u32("N")? as usize;
    let m = cur.u32("M")? as usize;
    let f = cur.u32("F")? as usize;
    let j = cur.u32("J")? as usize;
    if n == 0 {
        return Err(Error::format(path, "header declares N = 0 samples"));
    }
    let expected = HEADER_LEN as u128
        + (n as u128) * (m as u128) * 12
        + (f as u128) * 12
        + (m as u128) * (j as u128) * 8;
    if bytes.len() as u128 != expected {
        return Err(Error::format(
            path,
            format!(
                "header N={n} M={m} F={f} J={j} implies {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }

    let mut samples = Vec::with_capacity(n);
    for s in 0..n {
        let mut vertices = Vec::with_capacity(m);
        for i in 0..m {
            let what = format!("sample {s} vertex {i}");
            let x = cur.f32(&what)? as f64;
            let y = cur.f32(&what)? as f64;
            let z = cur.f32(&what)? as f64;
            vertices.push([x, y, z]);
        }
        samples.push(MeshSample::new(vertices));
    }
    let mut faces = Vec::with_capacity(f);
    for k in 0..f {
        let what = format!("face {k}");
        let face = [
            cur.u32(&what)? as usize,
            cur.u32(&what)? as usize,
            cur.u32(&what)? as usize,
        ];
        if face.iter().any(|&i| i >= m) {
            return Err(Error::format(
                path,
                format!("face {k} {face:?} references a vertex >= M = {m}"),
            ));
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(Error::format(path, format!("face {k} {face:?} is degenerate")));
        }
        faces.push(face);
    }
    let regressor = if j > 0 {
        let mut values = Vec::with_capacity(m * j);
        for _ in 0..m * j {
            values.push(cur.f64("joint regressor")?);
        }
        Some(DMatrix::from_row_slice(m, j, &values))
    } else {
        None
    };

    MeshDataset::new(samples, faces, regressor).map_err(|e| Error::format(path, e.to_string()))
}

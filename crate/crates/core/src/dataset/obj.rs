//! Minimal Wavefront OBJ support: `v` and `f` records, triangles only.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Point3;

/// Reads vertices and triangular faces (converted to 0-based indices).
/// Records other than `v` and `f` are ignored.
pub fn read_obj(path: impl AsRef<Path>) -> Result<(Vec<Point3>, Vec<[usize; 3]>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub(crate) fn parse_obj(text: &str, path: &Path) -> Result<(Vec<Point3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut raw_faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<&str> = parts.collect();
                if coords.len() < 3 {
                    return Err(Error::format(
                        path,
                        format!("line {}: vertex record needs 3 coordinates", lineno + 1),
                    ));
                }
                let mut v = [0.0; 3];
                for (c, tok) in coords.iter().take(3).enumerate() {
                    v[c] = tok.parse::<f64>().map_err(|_| {
                        Error::format(path, format!("line {}: bad coordinate {tok:?}", lineno + 1))
                    })?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(Error::format(
                        path,
                        format!(
                            "line {}: face with {} vertices, only triangles are supported",
                            lineno + 1,
                            idx.len()
                        ),
                    ));
                }
                let mut face = [0usize; 3];
                for (c, tok) in idx.iter().enumerate() {
                    // "v/vt/vn" forms: the vertex index comes first
                    let first = tok.split('/').next().unwrap_or("");
                    let one_based: usize = first.parse().map_err(|_| {
                        Error::format(path, format!("line {}: bad face index {tok:?}", lineno + 1))
                    })?;
                    if one_based == 0 {
                        return Err(Error::format(
                            path,
                            format!("line {}: face indices are 1-based", lineno + 1),
                        ));
                    }
                    face[c] = one_based - 1;
                }
                raw_faces.push((lineno + 1, face));
            }
            _ => {}
        }
    }
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (lineno, face) in raw_faces {
        if face.iter().any(|&i| i >= vertices.len()) {
            return Err(Error::format(
                path,
                format!(
                    "line {lineno}: face references vertex beyond the {} defined",
                    vertices.len()
                ),
            ));
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(Error::format(path, format!("line {lineno}: degenerate face")));
        }
        faces.push(face);
    }
    if vertices.is_empty() {
        return Err(Error::format(path, "no vertex records"));
    }
    Ok((vertices, faces))
}

/// Formats a mesh as OBJ text with 6-decimal fixed coordinates.
pub fn format_obj(vertices: &[Point3], faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn write_obj(path: impl AsRef<Path>, vertices: &[Point3], faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_obj(vertices, faces)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_triangles_and_ignores_other_records() {
        let text = "# comment\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n";
        let (v, f) = parse_obj(text, Path::new("m.obj")).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn rejects_quads_and_bad_indices() {
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let err = parse_obj(quad, Path::new("q.obj")).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
        let oob = "v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n";
        assert!(parse_obj(oob, Path::new("o.obj")).is_err());
        assert!(parse_obj("", Path::new("e.obj")).is_err());
    }

    #[test]
    fn fixed_six_decimal_output() {
        let s = format_obj(&[[1.0, -0.5, 1.0 / 3.0]], &[]);
        assert_eq!(s, "v 1.000000 -0.500000 0.333333\n");
    }
}

//! Left/right vertex pairing on a template mesh.

use serde::{Deserialize, Serialize};

use super::MeshSample;

/// Default half-width (mm) of the band around `x = 0` treated as midline.
pub const DEFAULT_MIDLINE_TOLERANCE: f64 = 1.0;

/// Involutive left/right vertex matching. "Left" means `x > tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricPairing {
    /// `(left, right)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Self-paired vertices, ascending.
    pub midline: Vec<usize>,
    /// Vertices that fell back to the midline for lack of a close partner.
    pub warnings: Vec<String>,
    partner: Vec<usize>,
    side: Vec<Side>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    Midline,
}

impl SymmetricPairing {
    /// Mirror partner of vertex `i` (itself on the midline).
    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn side(&self, i: usize) -> Side {
        self.side[i]
    }

    pub fn n_vertices(&self) -> usize {
        self.partner.len()
    }

    pub fn is_midline(&self, i: usize) -> bool {
        self.side[i] == Side::Midline
    }
}

/// Matching cost `|x_i + x_j| + |y_i − y_j| + |z_i − z_j|`.
pub fn matching_cost(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] + b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Pairs every left vertex with the unmatched right vertex of lowest matching
/// cost, visiting left vertices in ascending index order (ties go to the
/// smallest index). Vertices within `tolerance` of the plane, and vertices
/// whose best partner costs more than `3 · tolerance`, end up on the midline.
pub fn compute_symmetric_pairs(template: &MeshSample, tolerance: f64) -> SymmetricPairing {
    let v = &template.vertices;
    let m = v.len();
    let mut partner: Vec<usize> = (0..m).collect();
    let mut side = vec![Side::Midline; m];
    let mut taken = vec![false; m];
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();

    let right: Vec<usize> = (0..m).filter(|&j| v[j][0] < -tolerance).collect();
    for i in 0..m {
        if v[i][0] <= tolerance {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &j in &right {
            if taken[j] {
                continue;
            }
            let c = matching_cost(&v[i], &v[j]);
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((j, c));
            }
        }
        match best {
            Some((j, c)) if c <= 3.0 * tolerance => {
                taken[j] = true;
                partner[i] = j;
                partner[j] = i;
                side[i] = Side::Left;
                side[j] = Side::Right;
                pairs.push((i, j));
            }
            Some((j, c)) => warnings.push(format!(
                "vertex {i}: best partner {j} costs {c:.4} > {:.4}, placed on midline",
                3.0 * tolerance
            )),
            None => warnings.push(format!("vertex {i}: no unmatched right vertex, placed on midline")),
        }
    }
    for &j in &right {
        if !taken[j] {
            warnings.push(format!("vertex {j}: right vertex left unmatched, placed on midline"));
        }
    }
    let midline = (0..m).filter(|&i| side[i] == Side::Midline).collect();
    SymmetricPairing {
        pairs,
        midline,
        warnings,
        partner,
        side,
    }
}

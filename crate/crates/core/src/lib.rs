//! Virtual markers: a compact surface-landmark representation of deformable meshes.
//!
//! The pipeline has three stages:
//!
//! 1. **Learning** – a mesh dataset is reshaped into per-vertex trajectories
//!    ([`dataset`]) and factorized by archetypal analysis ([`archetypal`]), a
//!    pair of simplex-constrained least-squares problems ([`simplex`]).
//! 2. **Post-processing** – archetypes are snapped to vertices, made
//!    left/right symmetric and the interpolation coefficients refit
//!    ([`markers`]).
//! 3. **Estimation** – marker positions are decoded from volumetric heatmaps
//!    ([`heatmap`]) and the full mesh is recovered by a linear map, optionally
//!    adapted to per-marker confidences ([`reconstruction`]).
//!
//! [`evaluation`] holds the training losses and the MPVE / MPJPE / PA-MPJPE
//! metrics; [`vmat`] the dense-matrix file container.

pub mod archetypal;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod markers;
pub mod reconstruction;
pub mod simplex;
pub mod vmat;

pub use error::{Error, Result};

/// A 3D point in millimeters.
pub type Point3 = [f64; 3];

/// Derives an independent RNG stream from a base seed and a stream label.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::grid::TimeGrid;
use crate::linalg::{Mat, Vector};
use crate::path::{ControlPath, NodePath, OperatorPath};

/// Random unit vectors added to the canonical basis in every probe set.
pub const RANDOM_PROBES: usize = 20;

/// Generator for one named stream; different labels under the same seed
/// give independent draws.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let h = Sha256::digest(label.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&h[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(word));
    rng
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vector {
    loop {
        let v = Vector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Canonical basis followed by [`RANDOM_PROBES`] seeded unit vectors.
pub fn probe_vectors(dim: usize, seed: u64, label: &str) -> Vec<Vector> {
    let mut rng = stream(seed, label);
    let mut out: Vec<Vector> = (0..dim)
        .map(|k| Vector::from_fn(dim, |i, _| f64::from(u8::from(i == k))))
        .collect();
    out.extend((0..RANDOM_PROBES).map(|_| unit_vector(&mut rng, dim)));
    out
}

/// Smooth control on nodes `start..`: each component is a short cosine sum
/// with decaying random amplitudes.
pub fn random_control(rng: &mut impl Rng, grid: &Arc<TimeGrid>, start: usize, dim: usize) -> ControlPath {
    const MODES: usize = 4;
    let t0 = grid.node(start);
    let len = (grid.end() - t0).max(f64::MIN_POSITIVE);
    let coef: Vec<[f64; MODES]> = (0..dim)
        .map(|_| std::array::from_fn(|k| rng.sample::<f64, _>(StandardNormal) / (1.0 + k as f64)))
        .collect();
    let path = NodePath::from_fn(grid.clone(), start, |t| {
        let z = std::f64::consts::PI * (t - t0) / len;
        Vector::from_iterator(
            dim,
            coef.iter()
                .map(|c| c.iter().enumerate().map(|(k, a)| a * (k as f64 * z).cos()).sum()),
        )
    });
    ControlPath(path)
}

pub fn random_symmetric(rng: &mut impl Rng, dim: usize) -> Mat {
    let r = Mat::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&r + r.transpose()) * 0.5
}

/// `Ψ(t) = S₀ + t S₁` with random symmetric `S₀`, `S₁`.
pub fn random_symmetric_path(rng: &mut impl Rng, grid: &Arc<TimeGrid>, dim: usize) -> OperatorPath {
    let s0 = random_symmetric(rng, dim);
    let s1 = random_symmetric(rng, dim);
    OperatorPath::from_fn(grid.clone(), move |t| &s0 + &s1 * t)
}

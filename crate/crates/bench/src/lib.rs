//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialign_core::datamodel::Point;
use trialign_core::linalg::{normalized, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalized(&v, "row").unwrap().0
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

pub fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            )
        })
        .collect()
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:06}")).collect()
}

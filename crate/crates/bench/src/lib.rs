//! Fixtures shared by the benchmarks.

pub use compvid::autograd::{Graph, Var};
pub use compvid::tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data)
}

/// Sum of squares, a scalar to back-propagate from.
pub fn energy(g: &mut Graph<f32>, x: Var) -> Var {
    let sq = g.sqr(x);
    g.sum_all(sq)
}

//! Shared input builders for the benchmark targets.

use motkit::assoc::CostMatrix;
use motkit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Feature map with `n x n` positions and `c` channels, flattened.
pub fn feature_map(n: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![n * n, c], -1.0, 1.0, &mut rng)
}

/// Square cost matrix with integer-valued entries.
pub fn cost_matrix(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut costs = CostMatrix::new(n, n);
    for i in 0..n {
        for j in 0..n {
            costs.set(i, j, rng.random_range(0..1000) as f64);
        }
    }
    costs
}

/// Minimum assignment cost by exhaustive permutation search; the
/// reference the solver is benchmarked against at small sizes.
pub fn brute_force_min_cost(costs: &CostMatrix) -> f64 {
    fn permute(cols: &mut Vec<usize>, k: usize, costs: &CostMatrix, best: &mut f64) {
        if k == cols.len() {
            let total: f64 = cols
                .iter()
                .enumerate()
                .map(|(row, &col)| costs.get(row, col))
                .sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in k..cols.len() {
            cols.swap(k, i);
            permute(cols, k + 1, costs, best);
            cols.swap(k, i);
        }
    }
    let mut cols: Vec<usize> = (0..costs.cols()).collect();
    let mut best = f64::INFINITY;
    permute(&mut cols, 0, costs, &mut best);
    best
}

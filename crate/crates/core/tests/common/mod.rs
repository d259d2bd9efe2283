#![allow(dead_code)]

use stratperm::montecarlo::{random_matrix, EntryDistribution};
use stratperm::{RandomSource, StratifiedMatrix, StratumLayout};

/// Layout with `1..=max_k` strata of sizes in `min_size..=max_size`.
pub fn random_layout(
    rng: &mut RandomSource,
    max_k: usize,
    min_size: usize,
    max_size: usize,
) -> StratumLayout {
    let k = 1 + rng.index(max_k);
    let sizes = (0..k)
        .map(|_| min_size + rng.index(max_size - min_size + 1))
        .collect();
    StratumLayout::new(sizes).unwrap()
}

pub fn normal_matrix(layout: &StratumLayout, rng: &mut RandomSource) -> StratifiedMatrix {
    random_matrix(layout, EntryDistribution::Normal, rng)
}

pub fn normal_vec(n: usize, rng: &mut RandomSource) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

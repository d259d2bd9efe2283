//! Monte Carlo law of the standardized statistic and empirical distances to
//! the standard normal.
//!
//! Draws are produced in fixed-size chunks; chunk `c` always uses substream
//! `c` of the master seed, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::StepCdf;
use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{transform, TransformMode};
use crate::numeric::ksum;
use crate::rng::RandomSource;
use crate::sampling::shuffle_within_strata;

/// Law of i.i.d. entries for random matrix families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDistribution {
    Normal,
    /// Uniform on `[0, 1)`.
    Uniform,
    /// Unit-rate exponential.
    Exponential,
}

impl EntryDistribution {
    pub fn sample(self, rng: &mut RandomSource) -> f64 {
        match self {
            EntryDistribution::Normal => rng.standard_normal(),
            EntryDistribution::Uniform => rng.uniform(),
            EntryDistribution::Exponential => -(1.0 - rng.uniform()).ln(),
        }
    }
}

/// Matrix with i.i.d. entries, filled block by block in row-major order.
pub fn random_matrix(
    layout: &StratumLayout,
    dist: EntryDistribution,
    rng: &mut RandomSource,
) -> StratifiedMatrix {
    StratifiedMatrix::from_fn(layout.clone(), |_, _, _| dist.sample(rng)).expect("finite entries")
}

/// Draws per substream.
pub const CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    /// Sorted ascending.
    pub draws: Vec<f64>,
    pub count: usize,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    /// Spread of per-chunk Wasserstein estimates scaled to the full sample;
    /// `None` with fewer than two chunks.
    pub wasserstein_standard_error: Option<f64>,
}

impl SampleSummary {
    /// Summary of an arbitrary sample (sorted internally).
    pub fn from_draws(mut draws: Vec<f64>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidInput("empty sample".into()));
        }
        let m = draws.len();
        let mean = ksum(draws.iter().copied()) / m as f64;
        let variance = if m > 1 {
            ksum(draws.iter().map(|x| (x - mean) * (x - mean))) / (m - 1) as f64
        } else {
            0.0
        };
        draws.sort_by(f64::total_cmp);
        Ok(Self {
            draws,
            count: m,
            empirical_mean: mean,
            empirical_variance: variance,
            wasserstein_standard_error: None,
        })
    }

    pub fn cdf(&self) -> StepCdf {
        StepCdf::from_sorted_sample(&self.draws)
    }
}

/// Runs `f` on a pool with `workers` threads, or on the global pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// `m` values from `chunk(rng, count)`, concatenated in chunk order.
pub fn parallel_chunks<T, F>(m: usize, seed: u64, chunk: F) -> Vec<Vec<T>>
where
    T: Send,
    F: Fn(&mut RandomSource, usize) -> Vec<T> + Sync,
{
    let chunks = m.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(m - c * CHUNK);
            let mut rng = RandomSource::substream(seed, c as u64);
            chunk(&mut rng, count)
        })
        .collect()
}

/// `m` draws of `W` for the given matrix as is (no standardization).
pub fn raw_draws(a: &StratifiedMatrix, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let layout = a.layout();
    parallel_chunks(m, seed, |rng, count| {
        let mut images: Vec<usize> = (0..layout.n()).collect();
        (0..count)
            .map(|_| {
                shuffle_within_strata(layout, &mut images, rng);
                a.statistic(&images)
            })
            .collect()
    })
}

/// `m` independent draws of `W_{A^s, pi}`.
pub fn simulate_statistic(a: &StratifiedMatrix, m: usize, seed: u64) -> Result<SampleSummary> {
    if m == 0 {
        return Err(Error::InvalidInput("m must be positive".into()));
    }
    let standardized = transform(a, TransformMode::Standardize)?;
    let chunks = raw_draws(&standardized, m, seed);
    let se = chunk_wasserstein_se(&chunks);
    let mut summary = SampleSummary::from_draws(chunks.concat())?;
    summary.wasserstein_standard_error = se;
    Ok(summary)
}

fn chunk_wasserstein_se(chunks: &[Vec<f64>]) -> Option<f64> {
    // Only full chunks, so every batch estimate has the same precision.
    let full: Vec<f64> = chunks
        .iter()
        .filter(|c| c.len() == CHUNK)
        .map(|c| {
            let mut s = c.clone();
            s.sort_by(f64::total_cmp);
            StepCdf::from_sorted_sample(&s).wasserstein()
        })
        .collect();
    let b = full.len();
    if b < 2 {
        return None;
    }
    let mean = ksum(full.iter().copied()) / b as f64;
    let var = ksum(full.iter().map(|x| (x - mean) * (x - mean))) / (b - 1) as f64;
    let m: usize = chunks.iter().map(Vec::len).sum();
    Some((var * CHUNK as f64 / m as f64).sqrt())
}

pub fn ecdf_kolmogorov_vs_normal(s: &SampleSummary) -> f64 {
    s.cdf().kolmogorov()
}

pub fn empirical_wasserstein_vs_normal(s: &SampleSummary) -> f64 {
    s.cdf().wasserstein()
}

/// Joint draws of several statistics sharing one permutation per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSample {
    /// One row per draw, in generation order.
    pub draws: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample covariance with divisor `m - 1`.
    pub covariance: Vec<Vec<f64>>,
}

impl MultiSample {
    /// Standard error of each covariance entry, from the sample fourth
    /// moments of the centered products.
    pub fn covariance_standard_errors(&self) -> Vec<Vec<f64>> {
        let m = self.draws.len() as f64;
        let h = self.mean.len();
        let mut out = vec![vec![0.0; h]; h];
        for r in 0..h {
            for c in 0..h {
                let prods: Vec<f64> = self
                    .draws
                    .iter()
                    .map(|d| (d[r] - self.mean[r]) * (d[c] - self.mean[c]))
                    .collect();
                let pm = ksum(prods.iter().copied()) / m;
                let pv = ksum(prods.iter().map(|p| (p - pm) * (p - pm))) / (m - 1.0);
                out[r][c] = (pv / m).sqrt();
            }
        }
        out
    }
}

/// `m` draws of `(W_{G_1, pi}, ..., W_{G_H, pi})` with a common `pi`.
pub fn simulate_multi(components: &[StratifiedMatrix], m: usize, seed: u64) -> Result<MultiSample> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidInput("no components".into()))?;
    let layout = first.layout();
    if components.iter().any(|g| g.layout() != layout) {
        return Err(Error::LayoutMismatch("components differ in layout".into()));
    }
    if m < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    let draws: Vec<Vec<f64>> = parallel_chunks(m, seed, |rng, count| {
        let mut images: Vec<usize> = (0..layout.n()).collect();
        (0..count)
            .map(|_| {
                shuffle_within_strata(layout, &mut images, rng);
                components.iter().map(|g| g.statistic(&images)).collect()
            })
            .collect()
    })
    .concat();
    let h = components.len();
    let mf = m as f64;
    let mean: Vec<f64> = (0..h)
        .map(|c| ksum(draws.iter().map(|d| d[c])) / mf)
        .collect();
    let covariance = (0..h)
        .map(|r| {
            (0..h)
                .map(|c| {
                    ksum(draws.iter().map(|d| (d[r] - mean[r]) * (d[c] - mean[c]))) / (mf - 1.0)
                })
                .collect()
        })
        .collect();
    Ok(MultiSample {
        draws,
        mean,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::std_normal_quantile;

    fn two_point() -> StratifiedMatrix {
        StratifiedMatrix::from_rows(vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]]).unwrap()
    }

    #[test]
    fn two_point_draws() {
        let s = simulate_statistic(&two_point(), 10_000, 1).unwrap();
        assert!(s.draws.iter().all(|&x| (x.abs() - 1.0).abs() < 1e-12));
        assert!(s.empirical_mean.abs() < 4.0 / 100.0);
        assert!((ecdf_kolmogorov_vs_normal(&s) - 0.3413).abs() < 0.02);
    }

    #[test]
    fn single_draw() {
        let s = simulate_statistic(&two_point(), 1, 1).unwrap();
        assert_eq!(s.count, 1);
        assert_eq!(s.draws.len(), 1);
    }

    #[test]
    fn point_at_zero() {
        let s = SampleSummary::from_draws(vec![0.0]).unwrap();
        assert!((ecdf_kolmogorov_vs_normal(&s) - 0.5).abs() < 1e-15);
        assert!(
            (empirical_wasserstein_vs_normal(&s) - (2.0 / std::f64::consts::PI).sqrt()).abs()
                < 1e-12
        );
    }

    #[test]
    fn quantile_sample() {
        let m = 500;
        let draws = (1..=m)
            .map(|i| std_normal_quantile((i as f64 - 0.5) / m as f64))
            .collect();
        let s = SampleSummary::from_draws(draws).unwrap();
        assert!(ecdf_kolmogorov_vs_normal(&s) <= 0.5 / m as f64 + 1e-9);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let layout = StratumLayout::new(vec![4, 5]).unwrap();
        let a =
            StratifiedMatrix::from_fn(layout, |k, i, j| ((i * 3 + j * 7 + k) % 5) as f64).unwrap();
        let one = with_workers(Some(1), || simulate_statistic(&a, 30_000, 4).unwrap());
        let four = with_workers(Some(4), || simulate_statistic(&a, 30_000, 4).unwrap());
        assert_eq!(one, four);
        assert!(one.wasserstein_standard_error.is_some());
    }

    #[test]
    fn degenerate_is_rejected() {
        let a = StratifiedMatrix::from_rows(vec![vec![vec![2.0; 3]; 3]]).unwrap();
        assert_eq!(
            simulate_statistic(&a, 10, 0),
            Err(Error::DegenerateVariance)
        );
    }
}

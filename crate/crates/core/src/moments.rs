//! Exact first and second moments of the stratified statistic and the
//! centering, scaling, and truncation transforms built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::StratifiedMatrix;
use crate::numeric::{ksum, CompensatedSum};

/// Relative floor below which the variance counts as zero.
///
/// Centering a constant block leaves rounding residue of order `1e-16 * max|a|`
/// per entry; anything within `n * (1e-13 * max|a|)^2` is treated as exact zero.
const DEGENERATE_REL: f64 = 1e-13;

/// Exact moments of `W = sum_i a_{i pi(i)}` under a uniform stratified permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: f64,
    pub variance: f64,
    /// Variance contributed by each stratum; sums to `variance`.
    pub stratum_variances: Vec<f64>,
    /// `R^2_k`, share of the variance from stratum `k`; absent when the variance is zero.
    pub stratum_ratios: Option<Vec<f64>>,
    /// `beta_k = sum |a0_ij|^3 / sigma^3`; absent when the variance is zero.
    pub stratum_beta: Option<Vec<f64>>,
    /// `sum_k beta_k / n_k`; absent when the variance is zero.
    pub third_moment_rate: Option<f64>,
}

impl MomentReport {
    pub fn is_degenerate(&self) -> bool {
        self.stratum_ratios.is_none()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Which transform [`transform`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    /// Doubly centered `A0`.
    Center,
    /// `As = A0 / sigma`.
    Standardize,
    /// Column-demeaned `A0c`.
    ColumnCenter,
    /// `A' = As * 1(|As| <= 1/2)`.
    Truncate,
}

struct BlockMeans {
    rows: Vec<f64>,
    cols: Vec<f64>,
    grand: f64,
}

fn block_means(block: &[f64], nk: usize) -> BlockMeans {
    let mut rows = vec![0.0; nk];
    let mut cols = vec![0.0; nk];
    for i in 0..nk {
        rows[i] = ksum(block[i * nk..(i + 1) * nk].iter().copied()) / nk as f64;
    }
    for (j, c) in cols.iter_mut().enumerate() {
        *c = ksum((0..nk).map(|i| block[i * nk + j])) / nk as f64;
    }
    let grand = ksum(block.iter().copied()) / (nk * nk) as f64;
    BlockMeans { rows, cols, grand }
}

fn centered_block(block: &[f64], nk: usize) -> Vec<f64> {
    let m = block_means(block, nk);
    let mut out = Vec::with_capacity(nk * nk);
    for i in 0..nk {
        for j in 0..nk {
            out.push(block[i * nk + j] - m.rows[i] - m.cols[j] + m.grand);
        }
    }
    out
}

pub(crate) fn is_degenerate_variance(variance: f64, a: &StratifiedMatrix) -> bool {
    let floor = DEGENERATE_REL * a.max_abs();
    variance <= a.layout().n() as f64 * floor * floor
}

/// Exact mean, variance and per-stratum decomposition.
pub fn moments(a: &StratifiedMatrix) -> MomentReport {
    let layout = a.layout();
    let kk = layout.num_strata();
    let mut mean = CompensatedSum::new();
    let mut stratum_variances = Vec::with_capacity(kk);
    let mut cubes = Vec::with_capacity(kk);
    for k in 0..kk {
        let nk = layout.size(k);
        let block = a.block(k);
        mean.add(ksum(block.iter().copied()) / nk as f64);
        if nk == 1 {
            stratum_variances.push(0.0);
            cubes.push(0.0);
            continue;
        }
        let centered = centered_block(block, nk);
        stratum_variances.push(ksum(centered.iter().map(|x| x * x)) / (nk - 1) as f64);
        cubes.push(ksum(centered.iter().map(|x| x.abs().powi(3))));
    }
    let variance = ksum(stratum_variances.iter().copied());
    if is_degenerate_variance(variance, a) {
        return MomentReport {
            mean: mean.value(),
            variance,
            stratum_variances,
            stratum_ratios: None,
            stratum_beta: None,
            third_moment_rate: None,
        };
    }
    let sigma3 = variance.powf(1.5);
    let ratios: Vec<f64> = stratum_variances.iter().map(|v| v / variance).collect();
    let beta: Vec<f64> = cubes.iter().map(|c| c / sigma3).collect();
    let rate = ksum(
        beta.iter()
            .enumerate()
            .map(|(k, b)| b / layout.size(k) as f64),
    );
    MomentReport {
        mean: mean.value(),
        variance,
        stratum_variances,
        stratum_ratios: Some(ratios),
        stratum_beta: Some(beta),
        third_moment_rate: Some(rate),
    }
}

/// Applies one of the standard matrix transforms.
pub fn transform(a: &StratifiedMatrix, mode: TransformMode) -> Result<StratifiedMatrix> {
    let layout = a.layout().clone();
    match mode {
        TransformMode::Center => {
            let blocks = (0..layout.num_strata())
                .map(|k| centered_block(a.block(k), layout.size(k)))
                .collect();
            StratifiedMatrix::new(layout, blocks)
        }
        TransformMode::ColumnCenter => {
            let blocks = (0..layout.num_strata())
                .map(|k| {
                    let nk = layout.size(k);
                    let block = a.block(k);
                    let m = block_means(block, nk);
                    (0..nk * nk)
                        .map(|idx| block[idx] - m.cols[idx % nk])
                        .collect()
                })
                .collect();
            StratifiedMatrix::new(layout, blocks)
        }
        TransformMode::Standardize => {
            let report = moments(a);
            if report.is_degenerate() {
                return Err(Error::DegenerateVariance);
            }
            let sigma = report.std_dev();
            Ok(transform(a, TransformMode::Center)?.map(|x| x / sigma))
        }
        TransformMode::Truncate => {
            // Entries exactly at 1/2 are kept.
            Ok(transform(a, TransformMode::Standardize)?
                .map(|x| if x.abs() <= 0.5 { x } else { 0.0 }))
        }
    }
}

/// `M^r = n_k^{-1} sum_i |Y_i - mean(Y)|^r` over the values of one stratum.
///
/// Panics on an empty slice.
pub fn finite_pop_moment(values: &[f64], r: u32) -> f64 {
    assert!(
        !values.is_empty(),
        "finite-population moment of an empty stratum"
    );
    let n = values.len() as f64;
    let mean = ksum(values.iter().copied()) / n;
    ksum(values.iter().map(|y| (y - mean).abs().powi(r as i32))) / n
}

/// Within-stratum variance with divisor `n - 1`; zero for a single value.
pub fn stratum_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = ksum(values.iter().copied()) / n;
    ksum(values.iter().map(|y| (y - mean) * (y - mean))) / (n - 1.0)
}

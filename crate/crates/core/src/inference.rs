//! Stratified permutation tests of Fisher's sharp null, the instrumental
//! variable version with adjusted scores, and confidence sets by inversion.

use serde::{Deserialize, Serialize};

use crate::bounds::{product_variance, rate_product, BoundReport};
use crate::distance::std_normal_cdf;
use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::montecarlo::parallel_chunks;
use crate::numeric::{binomial, ksum, next_combination};
use crate::sampling::shuffle_within_strata;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    MonteCarlo,
    NormalApprox,
}

/// Default cap on distinct assignments for the exact method.
pub const DEFAULT_EXACT_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `Z^T R`.
    pub observed: f64,
    pub p_value: f64,
    pub p_greater: f64,
    pub p_less: f64,
    pub method: TestMethod,
    /// Reference draws (MC) or enumerated assignments (exact); 0 for the normal approximation.
    pub reps: u128,
    pub alternative: Alternative,
    /// Product-form rate quantity; absent when the reference law is a point mass.
    pub rate_report: Option<BoundReport>,
    /// Reference law is a point mass; the p-value is set to 1.
    pub degenerate: bool,
}

fn combine(alternative: Alternative, greater: f64, less: f64) -> f64 {
    match alternative {
        Alternative::Greater => greater,
        Alternative::Less => less,
        Alternative::TwoSided => (2.0 * greater.min(less)).min(1.0),
    }
}

fn check_inputs(z: &[f64], r: &[f64], layout: &StratumLayout) -> Result<()> {
    if z.len() != layout.n() || r.len() != layout.n() {
        return Err(Error::InvalidInput(format!(
            "z has {} and r has {} entries for {} units",
            z.len(),
            r.len(),
            layout.n()
        )));
    }
    if z.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("z must be binary".into()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    Ok(())
}

/// Tolerance under which a reference value counts as tied with the observed one.
fn tie_tolerance(r: &[f64]) -> f64 {
    1e-12 * ksum(r.iter().map(|x| x.abs())).max(1.0)
}

/// Permutation test of `Z^T R` against `Z_pi^T R`, `pi` uniform within strata.
///
/// Ties with the observed value count toward both tails.
pub fn permutation_test(
    z: &[f64],
    r: &[f64],
    layout: &StratumLayout,
    alternative: Alternative,
    method: TestMethod,
    reps: usize,
    seed: u64,
) -> Result<TestResult> {
    check_inputs(z, r, layout)?;
    let observed = ksum(z.iter().zip(r).map(|(a, b)| a * b));
    let variance = product_variance(z, r, layout);
    let reference = StratifiedMatrix::outer_product(layout.clone(), r, z)?;
    if crate::moments::is_degenerate_variance(variance, &reference) {
        return Ok(TestResult {
            observed,
            p_value: 1.0,
            p_greater: 1.0,
            p_less: 1.0,
            method,
            reps: 0,
            alternative,
            rate_report: None,
            degenerate: true,
        });
    }
    let rate_report = rate_product(z, r, layout).ok();
    let tol = tie_tolerance(r);
    let (p_greater, p_less, used) = match method {
        TestMethod::Exact => exact_tails(z, r, layout, observed, tol, DEFAULT_EXACT_BUDGET)?,
        TestMethod::MonteCarlo => {
            if reps == 0 {
                return Err(Error::InvalidInput("reps must be positive".into()));
            }
            let counts = parallel_chunks(reps, seed, |rng, count| {
                let mut images: Vec<usize> = (0..layout.n()).collect();
                let mut ge = 0u64;
                let mut le = 0u64;
                for _ in 0..count {
                    shuffle_within_strata(layout, &mut images, rng);
                    let v = ksum(images.iter().zip(r).map(|(&j, ri)| z[j] * ri));
                    ge += (v >= observed - tol) as u64;
                    le += (v <= observed + tol) as u64;
                }
                vec![(ge, le)]
            });
            let (ge, le) = counts
                .into_iter()
                .flatten()
                .fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
            let denom = (reps + 1) as f64;
            (
                (ge + 1) as f64 / denom,
                (le + 1) as f64 / denom,
                reps as u128,
            )
        }
        TestMethod::NormalApprox => {
            let mean = ksum((0..layout.num_strata()).map(|k| {
                let range = layout.range(k);
                let nk = range.len() as f64;
                ksum(z[range.clone()].iter().copied()) * ksum(r[range].iter().copied()) / nk
            }));
            let t = (observed - mean) / variance.sqrt();
            (std_normal_cdf(-t), std_normal_cdf(t), 0)
        }
    };
    Ok(TestResult {
        observed,
        p_value: combine(alternative, p_greater, p_less),
        p_greater,
        p_less,
        method,
        reps: used,
        alternative,
        rate_report,
        degenerate: false,
    })
}

/// Tail probabilities by enumerating treated subsets within each stratum.
fn exact_tails(
    z: &[f64],
    r: &[f64],
    layout: &StratumLayout,
    observed: f64,
    tol: f64,
    budget: u128,
) -> Result<(f64, f64, u128)> {
    let treated: Vec<usize> = (0..layout.num_strata())
        .map(|k| z[layout.range(k)].iter().filter(|&&v| v == 1.0).count())
        .collect();
    let needed = (0..layout.num_strata()).fold(1u128, |acc, k| {
        acc.saturating_mul(binomial(layout.size(k), treated[k]))
    });
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    // Per-stratum subset sums, then the sum over the Cartesian product.
    let stratum_sums: Vec<Vec<f64>> = (0..layout.num_strata())
        .map(|k| {
            let scores = &r[layout.range(k)];
            let mut combo: Vec<usize> = (0..treated[k]).collect();
            let mut sums = Vec::new();
            loop {
                sums.push(ksum(combo.iter().map(|&i| scores[i])));
                if !next_combination(&mut combo, scores.len()) {
                    break;
                }
            }
            sums
        })
        .collect();
    let mut idx = vec![0usize; stratum_sums.len()];
    let (mut ge, mut le, mut total) = (0u128, 0u128, 0u128);
    loop {
        let v = ksum(idx.iter().enumerate().map(|(k, &i)| stratum_sums[k][i]));
        total += 1;
        ge += (v >= observed - tol) as u128;
        le += (v <= observed + tol) as u128;
        let mut k = 0;
        loop {
            if k == idx.len() {
                return Ok((ge as f64 / total as f64, le as f64 / total as f64, total));
            }
            idx[k] += 1;
            if idx[k] < stratum_sums[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Test of `H0: beta = beta0` in the linear effect model via scores `y - beta0 d`.
#[allow(clippy::too_many_arguments)]
pub fn iv_test(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    layout: &StratumLayout,
    beta0: f64,
    alternative: Alternative,
    method: TestMethod,
    reps: usize,
    seed: u64,
) -> Result<TestResult> {
    if y.len() != d.len() {
        return Err(Error::InvalidInput("y and d differ in length".into()));
    }
    let scores: Vec<f64> = y.iter().zip(d).map(|(a, b)| a - beta0 * b).collect();
    permutation_test(z, &scores, layout, alternative, method, reps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub alpha: f64,
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    pub accepted: Vec<f64>,
    /// Smallest interval containing every accepted grid point.
    pub interval: Option<(f64, f64)>,
    /// Accepted grid points are not contiguous in the grid.
    pub non_convex: bool,
    /// No grid point accepted.
    pub empty: bool,
}

/// Grid inversion of two-sided IV tests: `{beta0 : p(beta0) > alpha}`.
///
/// Monte Carlo tests reuse `seed` at every grid point.
#[allow(clippy::too_many_arguments)]
pub fn iv_confidence_interval(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    layout: &StratumLayout,
    alpha: f64,
    grid: &[f64],
    method: TestMethod,
    reps: usize,
    seed: u64,
) -> Result<ConfidenceSet> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha = {alpha} not in [0, 1)"
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput(
            "grid must be nonempty and sorted".into(),
        ));
    }
    let p_values = grid
        .iter()
        .map(|&b| {
            iv_test(
                y,
                d,
                z,
                layout,
                b,
                Alternative::TwoSided,
                method,
                reps,
                seed,
            )
            .map(|t| t.p_value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let hits: Vec<usize> = (0..grid.len()).filter(|&i| p_values[i] > alpha).collect();
    let accepted: Vec<f64> = hits.iter().map(|&i| grid[i]).collect();
    let non_convex = hits.windows(2).any(|w| w[1] != w[0] + 1);
    Ok(ConfidenceSet {
        alpha,
        grid: grid.to_vec(),
        interval: accepted.first().map(|&lo| (lo, *accepted.last().unwrap())),
        empty: accepted.is_empty(),
        non_convex,
        accepted,
        p_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_one_third() {
        let layout = StratumLayout::new(vec![3]).unwrap();
        let t = permutation_test(
            &[1.0, 0.0, 0.0],
            &[3.0, 1.0, 2.0],
            &layout,
            Alternative::Greater,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        assert_eq!(t.p_value, 1.0 / 3.0);
        assert_eq!(t.reps, 3);
    }

    #[test]
    fn constant_scores() {
        let layout = StratumLayout::new(vec![4]).unwrap();
        let t = permutation_test(
            &[1.0, 0.0, 1.0, 0.0],
            &[2.0; 4],
            &layout,
            Alternative::TwoSided,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn beta_zero_reduces() {
        let layout = StratumLayout::new(vec![3, 3]).unwrap();
        let z = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let y = [0.5, 1.5, -0.2, 2.0, 0.1, 0.7];
        let d = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let a = iv_test(
            &y,
            &d,
            &z,
            &layout,
            0.0,
            Alternative::TwoSided,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        let b = permutation_test(
            &z,
            &y,
            &layout,
            Alternative::TwoSided,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interval_alpha_zero_accepts_all() {
        let layout = StratumLayout::new(vec![4]).unwrap();
        let z = [1.0, 0.0, 1.0, 0.0];
        let y = [3.0, 1.0, 2.5, 0.5];
        let grid: Vec<f64> = (0..11).map(|i| i as f64 * 0.5 - 1.0).collect();
        let ci = iv_confidence_interval(
            &y,
            &z,
            &z,
            &layout,
            0.0,
            &grid,
            TestMethod::MonteCarlo,
            200,
            1,
        )
        .unwrap();
        assert_eq!(ci.accepted, grid);
        assert!(!ci.non_convex && !ci.empty);
    }
}

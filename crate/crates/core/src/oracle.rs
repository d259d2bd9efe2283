//! Exhaustive enumeration over stratified permutations and coupling
//! outcomes on small instances. Every identity the library relies on is
//! checked here against brute force.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distance::StepCdf;
use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{moments, transform, TransformMode};
use crate::numeric::{factorial, next_permutation, CompensatedSum};
use crate::sampling::{invert, pi_dagger_images, ZeroBiasSampler};

/// Default cap on enumerated outcomes.
pub const DEFAULT_BUDGET: u128 = 10_000_000;

/// Atoms closer than this (relative to `max(1, |x|)`) are merged.
pub const ATOM_TOLERANCE: f64 = 1e-12;

/// `|Pi_K| = prod_k n_k!`, saturating.
pub fn group_order(layout: &StratumLayout) -> u128 {
    layout
        .sizes()
        .iter()
        .fold(1u128, |acc, &s| acc.saturating_mul(factorial(s.min(34))))
}

fn check_budget(needed: u128, budget: u128) -> Result<()> {
    if needed > budget {
        Err(Error::BudgetExceeded { needed, budget })
    } else {
        Ok(())
    }
}

/// Calls `f` on every stratum-preserving permutation, odometer style with
/// stratum 0 varying fastest.
pub fn for_each_permutation(layout: &StratumLayout, mut f: impl FnMut(&[usize])) {
    let mut images: Vec<usize> = (0..layout.n()).collect();
    loop {
        f(&images);
        let mut k = 0;
        loop {
            if k == layout.num_strata() {
                return;
            }
            let slice = &mut images[layout.range(k)];
            if next_permutation(slice) {
                break;
            }
            slice.reverse();
            k += 1;
        }
    }
}

/// Value with an integer multiplicity out of `total` equally likely outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub count: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    /// Sorted by value, deduplicated.
    pub atoms: Vec<Atom>,
    pub total: u128,
}

impl ExactDistribution {
    /// Collapses values within [`ATOM_TOLERANCE`] into single atoms.
    pub fn from_values(mut values: Vec<(f64, u128)>) -> Self {
        values.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = values.iter().map(|v| v.1).sum();
        let mut atoms: Vec<Atom> = Vec::new();
        for (value, count) in values {
            match atoms.last_mut() {
                Some(last)
                    if (value - last.value).abs() <= ATOM_TOLERANCE * value.abs().max(1.0) =>
                {
                    last.count += count;
                }
                _ => atoms.push(Atom { value, count }),
            }
        }
        Self { atoms, total }
    }

    pub fn probabilities(&self) -> Vec<(f64, f64)> {
        self.atoms
            .iter()
            .map(|a| (a.value, a.count as f64 / self.total as f64))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for (x, p) in self.probabilities() {
            acc.add(x * p);
        }
        acc.value()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        let mut acc = CompensatedSum::new();
        for (x, p) in self.probabilities() {
            acc.add((x - mu) * (x - mu) * p);
        }
        acc.value()
    }

    /// Same law after `x -> (x - shift) / scale`.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        Self {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    value: (a.value - shift) / scale,
                    count: a.count,
                })
                .collect(),
            total: self.total,
        }
    }

    pub fn cdf(&self) -> StepCdf {
        StepCdf::from_atoms(&self.probabilities())
    }
}

/// Exact law of `W_{A, pi}` under the uniform stratified permutation.
pub fn enumerate_distribution(a: &StratifiedMatrix, budget: u128) -> Result<ExactDistribution> {
    let layout = a.layout();
    check_budget(group_order(layout), budget)?;
    let mut values = Vec::new();
    for_each_permutation(layout, |images| values.push((a.statistic(images), 1)));
    Ok(ExactDistribution::from_values(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Kolmogorov,
    Wasserstein,
}

pub fn exact_distance(d: &ExactDistribution, kind: DistanceKind) -> f64 {
    let cdf = d.cdf();
    match kind {
        DistanceKind::Kolmogorov => cdf.kolmogorov(),
        DistanceKind::Wasserstein => cdf.wasserstein(),
    }
}

/// Outcome of one brute-force identity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identity: String,
    pub max_violation: f64,
    pub budget_used: u128,
    pub pass: bool,
}

impl IdentityReport {
    fn new(identity: &str, max_violation: f64, budget_used: u128, tolerance: f64) -> Self {
        Self {
            identity: identity.to_string(),
            max_violation,
            budget_used,
            pass: max_violation <= tolerance,
        }
    }
}

pub fn all_pass(reports: &[IdentityReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

pub const STEIN_LINEARITY_TOL: f64 = 1e-12;
pub const STEIN_VARIANCE_TOL: f64 = 1e-10;
pub const ZERO_BIAS_TOL: f64 = 1e-8;

/// Checks the random-transposition exchangeable pair: linear regression
/// `E(W''|pi) = (1 - 2/(n-K)) W` for the centered matrix, the variance of
/// `W - W''`, and symmetry of the joint law of `(W, W'')`.
pub fn verify_stein_pair(a: &StratifiedMatrix, budget: u128) -> Result<Vec<IdentityReport>> {
    let layout = a.layout();
    let dof = layout.degrees_of_freedom();
    if dof == 0 {
        return Err(Error::DegenerateLayout);
    }
    let pairs: u128 = layout.sizes().iter().map(|&s| (s * (s - 1)) as u128).sum();
    let needed = group_order(layout).saturating_mul(pairs);
    check_budget(needed, budget)?;

    let centered = transform(a, TransformMode::Center)?;
    let sigma2 = moments(a).variance;
    let lambda = 2.0 / dof as f64;
    let mut linearity: f64 = 0.0;
    let mut diff_sq = CompensatedSum::new();
    let mut forward: Vec<(usize, f64, f64)> = Vec::new();
    let mut outcomes: u128 = 0;
    let mut buf = vec![0; layout.n()];
    let mut perms: u128 = 0;
    for_each_permutation(layout, |images| {
        perms += 1;
        let w0 = centered.statistic(images);
        let w = a.statistic(images);
        let mut cond = CompensatedSum::new();
        buf.copy_from_slice(images);
        for k in 0..layout.num_strata() {
            let nk = layout.size(k);
            if nk < 2 {
                continue;
            }
            // P(B = k) P(I, J | B = k) = 1 / ((n - K) n_k).
            let weight = 1.0 / (dof as f64 * nk as f64);
            for i in layout.range(k) {
                for j in layout.range(k) {
                    if i == j {
                        continue;
                    }
                    buf.swap(i, j);
                    let w0_next = centered.statistic(&buf);
                    let w_next = a.statistic(&buf);
                    buf.swap(i, j);
                    cond.add(weight * w0_next);
                    diff_sq.add(weight * (w - w_next) * (w - w_next));
                    forward.push((k, w, w_next));
                    outcomes += 1;
                }
            }
        }
        linearity = linearity.max((cond.value() - (1.0 - lambda) * w0).abs());
    });
    let var_diff = diff_sq.value() / perms as f64;
    let var_gap = (var_diff - 4.0 * sigma2 / dof as f64).abs();

    // Within a stratum every ordered pair has the same weight, so the joint
    // law is symmetric iff the multisets of (k, W, W'') and (k, W'', W) agree.
    let mut backward: Vec<(usize, f64, f64)> = forward.iter().map(|&(k, x, y)| (k, y, x)).collect();
    let key = |a: &(usize, f64, f64), b: &(usize, f64, f64)| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    };
    forward.sort_by(key);
    backward.sort_by(key);
    let exch = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| {
            if f.0 != b.0 {
                f64::INFINITY
            } else {
                (f.1 - b.1).abs().max((f.2 - b.2).abs())
            }
        })
        .fold(0.0, f64::max);

    Ok(vec![
        IdentityReport::new(
            "stein_pair_linearity",
            linearity,
            outcomes,
            STEIN_LINEARITY_TOL,
        ),
        IdentityReport::new(
            "stein_pair_difference_variance",
            var_gap,
            outcomes,
            STEIN_VARIANCE_TOL,
        ),
        IdentityReport::new("stein_pair_exchangeability", exch, outcomes, 0.0),
    ])
}

/// `E_U f'(U x + (1 - U) y)` for `f(t) = t^d`, i.e. `(x^d - y^d)/(x - y)`
/// expanded so that `x = y` needs no special case.
fn mean_derivative(x: f64, y: f64, degree: u32) -> f64 {
    (0..degree)
        .map(|m| x.powi(m as i32) * y.powi((degree - 1 - m) as i32))
        .sum()
}

/// Checks `var(W) E f'(W*) = E[W f(W)]` for `f(x) = x^degree` on the
/// standardized matrix by enumerating `pi` and every coupling outcome.
pub fn verify_zero_bias(a: &StratifiedMatrix, degree: u32, budget: u128) -> Result<IdentityReport> {
    if !(1..=3).contains(&degree) {
        return Err(Error::Domain(format!("test degree {degree} not in 1..=3")));
    }
    let s = transform(a, TransformMode::Standardize)?;
    let layout = s.layout();
    let sampler = ZeroBiasSampler::with_limit(&s, usize::MAX)?;
    let ratios = moments(&s)
        .stratum_ratios
        .ok_or(Error::DegenerateVariance)?;
    let quads: u128 = (0..layout.num_strata())
        .filter(|&k| ratios[k] > 0.0)
        .map(|k| (layout.size(k) as u128).pow(4))
        .sum();
    let needed = group_order(layout).saturating_mul(quads.max(1));
    check_budget(needed, budget)?;

    let masses: Vec<Vec<f64>> = (0..layout.num_strata())
        .map(|k| {
            if ratios[k] > 0.0 {
                sampler.four_index_mass(k)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut lhs = CompensatedSum::new();
    let mut rhs = CompensatedSum::new();
    let mut perms: u128 = 0;
    let mut outcomes: u128 = 0;
    for_each_permutation(layout, |images| {
        perms += 1;
        let w = s.statistic(images);
        rhs.add(w.powi(degree as i32 + 1));
        let inv = invert(images);
        for (k, mass) in masses.iter().enumerate() {
            let nk = layout.size(k);
            let off = layout.offset(k);
            for (flat, &m) in mass.iter().enumerate() {
                outcomes += 1;
                if m == 0.0 {
                    continue;
                }
                let (q, rest) = (flat % nk, flat / nk);
                let (p, rest) = (rest % nk, rest / nk);
                let (j, i) = (rest % nk, rest / nk);
                let (i, j, p, q) = (off + i, off + j, off + p, off + q);
                let mut dagger = pi_dagger_images(images, &inv, i, j, p, q);
                let w_dagger = s.statistic(&dagger);
                dagger.swap(i, j);
                let w_ddagger = s.statistic(&dagger);
                lhs.add(ratios[k] * m * mean_derivative(w_dagger, w_ddagger, degree));
            }
        }
    });
    let gap = ((lhs.value() - rhs.value()) / perms as f64).abs();
    Ok(IdentityReport::new(
        &format!("zero_bias_degree_{degree}"),
        gap,
        outcomes,
        ZERO_BIAS_TOL,
    ))
}

/// Structural checks of the `pi_dagger` construction on every
/// `(pi, i, j, p, q)` with `i != j`, `p != q`, plus exact uniformity of the
/// images of the untouched units given `(i, j, p, q)`.
pub fn verify_pi_dagger(a: &StratifiedMatrix, budget: u128) -> Result<Vec<IdentityReport>> {
    let layout = a.layout();
    let quads: u128 = layout
        .sizes()
        .iter()
        .map(|&s| ((s * s.saturating_sub(1)) as u128).pow(2))
        .sum();
    let needed = group_order(layout).saturating_mul(quads);
    check_budget(needed, budget)?;

    let mut structural_failures: u64 = 0;
    let mut outcomes: u128 = 0;
    for_each_permutation(layout, |images| {
        let inv = invert(images);
        for k in 0..layout.num_strata() {
            for i in layout.range(k) {
                for j in layout.range(k) {
                    for p in layout.range(k) {
                        for q in layout.range(k) {
                            if i == j || p == q {
                                continue;
                            }
                            outcomes += 1;
                            let dagger = pi_dagger_images(images, &inv, i, j, p, q);
                            if !dagger_is_well_formed(layout, images, &inv, &dagger, (i, j, p, q)) {
                                structural_failures += 1;
                            }
                        }
                    }
                }
            }
        }
    });

    // Conditional uniformity only involves the chosen stratum, so each
    // stratum is enumerated on its own.
    let mut worst: f64 = 0.0;
    let mut count_outcomes: u128 = 0;
    for k in 0..layout.num_strata() {
        let nk = layout.size(k);
        if nk < 2 {
            continue;
        }
        let single = StratumLayout::new(vec![nk])?;
        let expected = (nk * (nk - 1)) as u64;
        for i in 0..nk {
            for j in 0..nk {
                for p in 0..nk {
                    for q in 0..nk {
                        if i == j || p == q {
                            continue;
                        }
                        let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
                        for_each_permutation(&single, |images| {
                            let inv = invert(images);
                            let dagger = pi_dagger_images(images, &inv, i, j, p, q);
                            let rest: Vec<usize> = (0..nk)
                                .filter(|&m| m != i && m != j)
                                .map(|m| dagger[m])
                                .collect();
                            *counts.entry(rest).or_default() += 1;
                            count_outcomes += 1;
                        });
                        let completions = factorial(nk - 2) as usize;
                        if counts.len() != completions {
                            worst = f64::INFINITY;
                        }
                        for &c in counts.values() {
                            worst = worst.max((c as f64 - expected as f64).abs());
                        }
                    }
                }
            }
        }
    }

    Ok(vec![
        IdentityReport::new(
            "pi_dagger_structure",
            structural_failures as f64,
            outcomes,
            0.0,
        ),
        IdentityReport::new(
            "pi_dagger_conditional_uniformity",
            worst,
            count_outcomes,
            0.0,
        ),
    ])
}

fn dagger_is_well_formed(
    layout: &StratumLayout,
    images: &[usize],
    inv: &[usize],
    dagger: &[usize],
    (i, j, p, q): (usize, usize, usize, usize),
) -> bool {
    let n = layout.n();
    let mut seen = vec![false; n];
    for (m, &img) in dagger.iter().enumerate() {
        if seen[img] || layout.stratum_of(img) != layout.stratum_of(m) {
            return false;
        }
        seen[img] = true;
    }
    let mut hit = [dagger[i], dagger[j]];
    hit.sort();
    let mut want = [p, q];
    want.sort();
    if hit != want {
        return false;
    }
    let touched = [i, j, inv[p], inv[q]];
    if (0..n).any(|m| !touched.contains(&m) && dagger[m] != images[m]) {
        return false;
    }
    let mut ddagger = dagger.to_vec();
    ddagger.swap(i, j);
    let changed: Vec<usize> = (0..n).filter(|&m| ddagger[m] != dagger[m]).collect();
    changed == [i.min(j), i.max(j)]
}

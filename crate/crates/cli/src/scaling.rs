//! Empirical convergence-order table over families of random matrices.

use serde::Serialize;
use stratperm::bounds::{rate, RateMethod, Regime};
use stratperm::montecarlo::{
    ecdf_kolmogorov_vs_normal, empirical_wasserstein_vs_normal, random_matrix, simulate_statistic,
    EntryDistribution,
};
use stratperm::{RandomSource, StratumLayout};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub k: usize,
    pub n: usize,
    pub regime: Regime,
    pub delta: f64,
    pub theta: Option<f64>,
    /// Stratified rate quantity `sum_k beta_k / n_k`.
    pub rate: f64,
    pub dk_hat: f64,
    pub dk_sqrt_n: f64,
    /// `dk_hat * n^delta` with `delta` from the regime.
    pub dk_n_delta: f64,
    pub dw_hat: f64,
    /// `rate^{1/2} n^{1/4}`; flat when the general-regime order holds.
    pub rate_sqrt_n_quarter: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

/// One row per `(K, n)`. Family `i` draws its matrix from substream `2i` and
/// simulates with a seed taken from substream `2i + 1`.
pub fn scaling_table(
    ks: &[usize],
    ns: &[usize],
    dist: EntryDistribution,
    reps: usize,
    seed: u64,
) -> CliResult<Vec<ScalingRow>> {
    if ks.is_empty() || ns.is_empty() {
        return Err(CliError::Input("need at least one K and one n".into()));
    }
    let mut rows = Vec::with_capacity(ks.len() * ns.len());
    for (ki, &k) in ks.iter().enumerate() {
        for (ni, &n) in ns.iter().enumerate() {
            if k == 0 || n % k != 0 || n / k < 2 {
                return Err(CliError::Input(format!(
                    "n = {n} must be a multiple of K = {k} with at least two units per stratum"
                )));
            }
            let family = (ki * ns.len() + ni) as u64;
            let layout = StratumLayout::uniform(k, n / k)?;
            let mut rng = RandomSource::substream(seed, 2 * family);
            let a = random_matrix(&layout, dist, &mut rng);
            let report = rate(&a, RateMethod::Stratified)?;
            let sim_seed = RandomSource::substream(seed, 2 * family + 1).next_u64();
            let summary = simulate_statistic(&a, reps, sim_seed)?;
            let dk = ecdf_kolmogorov_vs_normal(&summary);
            let nf = n as f64;
            rows.push(ScalingRow {
                k,
                n,
                regime: report.regime,
                delta: report.exponent_delta,
                theta: report.theta,
                rate: report.rate_quantity,
                dk_hat: dk,
                dk_sqrt_n: dk * nf.sqrt(),
                dk_n_delta: dk * nf.powf(report.exponent_delta),
                dw_hat: empirical_wasserstein_vs_normal(&summary),
                rate_sqrt_n_quarter: report.rate_quantity.sqrt() * nf.powf(0.25),
            });
        }
    }
    Ok(rows)
}

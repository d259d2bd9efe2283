//! Berry–Esseen rate quantities and the regime diagnostic `theta`.
//!
//! Only the Wasserstein bound carries a proven constant (160). Every other
//! evaluator reports the bracketed rate quantity and its exponent; the
//! `convenience_bound` multiplies by a caller-chosen constant and is not
//! certified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{finite_pop_moment, moments, transform, TransformMode};
use crate::numeric::ksum;

/// Explicit constant of the Wasserstein bound.
pub const WASSERSTEIN_CONSTANT: f64 = 160.0;

/// Smallest stratum size for which the f-function is defined.
pub const CLASSIC_MIN_STRATUM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Exponent 1/2, valid for every layout.
    General,
    /// Exponent 1: every stratum has at least six units and `theta > 0`.
    Classic,
}

impl Regime {
    pub fn exponent(self) -> f64 {
        match self {
            Regime::General => 0.5,
            Regime::Classic => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantMode {
    /// The constant is unknown; only the rate quantity is meaningful.
    ReportedRaw,
    /// The bound carries a proven constant.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    /// `sum_k sum_ij |as_ij|^3 / n_k` with exponent from the regime.
    Stratified,
    /// `sum_k n_k sum_ij |as_ij|^3` from independence across strata.
    Independent,
    /// `sum_k sum_ij |as_ij|^3 / (n_k R^2_k)`, combined in Wasserstein distance.
    WassersteinCombine,
    /// Column-demeaned `sum_k sum_ij |a0c_ij|^3 / (sigma^3 n_k)`.
    Columnwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub method: String,
    pub rate_quantity: f64,
    pub exponent_delta: f64,
    pub theta: Option<f64>,
    pub regime: Regime,
    pub constant_mode: ConstantMode,
    /// Present only with [`ConstantMode::Explicit`].
    pub certified_bound: Option<f64>,
    /// `constant_override * rate_quantity^delta`; not a certified bound.
    pub convenience_bound: f64,
    pub constant_override: f64,
}

impl BoundReport {
    pub(crate) fn raw(
        method: &str,
        rate_quantity: f64,
        regime: Regime,
        theta: Option<f64>,
    ) -> Self {
        let delta = regime.exponent();
        Self {
            method: method.to_string(),
            rate_quantity,
            exponent_delta: delta,
            theta,
            regime,
            constant_mode: ConstantMode::ReportedRaw,
            certified_bound: None,
            convenience_bound: rate_quantity.powf(delta),
            constant_override: 1.0,
        }
    }

    /// Replaces the convenience constant (default 1.0).
    pub fn with_constant(mut self, constant: f64) -> Self {
        assert!(constant > 0.0, "constant override must be positive");
        self.constant_override = constant;
        self.convenience_bound = constant * self.rate_quantity.powf(self.exponent_delta);
        self
    }
}

/// The f-function controlling the classic regime.
pub fn f_value(n_k: usize, r_squared: f64) -> Result<f64> {
    if n_k < CLASSIC_MIN_STRATUM {
        return Err(Error::Domain(format!(
            "f-function needs n_k >= 6, got {n_k}"
        )));
    }
    let n = n_k as f64;
    let d5 = (n - 5.0) * (n - 5.0);
    let d4 = (n - 4.0) * (n - 4.0);
    Ok(0.5
        - 24.0 * n * r_squared / d5
        - 4.0 * (1.0 + (28.0 * n - 20.0) * r_squared / d5).sqrt() * (n * r_squared / d4).sqrt())
}

/// `theta = min_k f(n_k, R^2 of the truncated matrix)`.
///
/// `Ok(None)` when a stratum has fewer than six units or the truncated
/// matrix has zero variance.
pub fn theta(a: &StratifiedMatrix) -> Result<Option<f64>> {
    let truncated = transform(a, TransformMode::Truncate)?;
    theta_of_truncated(&truncated)
}

fn theta_of_truncated(truncated: &StratifiedMatrix) -> Result<Option<f64>> {
    let layout = truncated.layout();
    if layout.min_size() < CLASSIC_MIN_STRATUM {
        return Ok(None);
    }
    let Some(ratios) = moments(truncated).stratum_ratios else {
        return Ok(None);
    };
    let mut best = f64::INFINITY;
    for (k, r2) in ratios.iter().enumerate() {
        best = best.min(f_value(layout.size(k), *r2)?);
    }
    Ok(Some(best))
}

pub(crate) fn regime_for(layout: &StratumLayout, theta: Option<f64>) -> Regime {
    match theta {
        Some(t) if t > 0.0 && layout.min_size() >= CLASSIC_MIN_STRATUM => Regime::Classic,
        _ => Regime::General,
    }
}

fn cubic_sums(m: &StratifiedMatrix) -> Vec<f64> {
    m.blocks()
        .iter()
        .map(|b| ksum(b.iter().map(|x| x.abs().powi(3))))
        .collect()
}

/// Rate quantity of one of the matrix-level bounds.
pub fn rate(a: &StratifiedMatrix, method: RateMethod) -> Result<BoundReport> {
    let report = moments(a);
    let (Some(ratios), Some(beta)) = (report.stratum_ratios.as_ref(), report.stratum_beta.as_ref())
    else {
        return Err(Error::DegenerateVariance);
    };
    let layout = a.layout();
    let sizes = layout.sizes();
    match method {
        RateMethod::Stratified => {
            let q = ksum(beta.iter().zip(sizes).map(|(b, &n)| b / n as f64));
            let th = theta(a)?;
            Ok(BoundReport::raw("stratified", q, regime_for(layout, th), th))
        }
        RateMethod::Independent => {
            let q = ksum(beta.iter().zip(sizes).map(|(b, &n)| b * n as f64));
            let th = theta(a)?;
            // Exponent is 1 in every regime; `regime` still reports the theta diagnostic.
            let mut r = BoundReport::raw("independent", q, regime_for(layout, th), th);
            r.exponent_delta = 1.0;
            r.convenience_bound = q;
            Ok(r)
        }
        RateMethod::WassersteinCombine => {
            if let Some(k) = ratios.iter().position(|&r| r <= 0.0) {
                return Err(Error::ZeroStratumRatio { stratum: k });
            }
            let q = ksum(
                beta.iter()
                    .zip(sizes)
                    .zip(ratios)
                    .map(|((b, &n), r)| b / (n as f64 * r)),
            );
            let th = theta(a)?;
            Ok(BoundReport::raw(
                "wasserstein_combine",
                q,
                Regime::General,
                th,
            ))
        }
        RateMethod::Columnwise => {
            let cc = transform(a, TransformMode::ColumnCenter)?;
            let sigma3 = report.variance.powf(1.5);
            let q = ksum(
                cubic_sums(&cc)
                    .iter()
                    .zip(sizes)
                    .map(|(c, &n)| c / (sigma3 * n as f64)),
            );
            let th = theta(a)?;
            Ok(BoundReport::raw(
                "columnwise",
                q,
                regime_for(layout, th),
                th,
            ))
        }
    }
}

/// Wasserstein bound `160 * sum_k sum_ij |as_ij|^3 / n_k`, the one explicit-constant bound.
pub fn wasserstein_bound(a: &StratifiedMatrix) -> Result<BoundReport> {
    let q = moments(a)
        .third_moment_rate
        .ok_or(Error::DegenerateVariance)?;
    Ok(BoundReport {
        method: "wasserstein".into(),
        rate_quantity: q,
        exponent_delta: 1.0,
        theta: None,
        regime: Regime::General,
        constant_mode: ConstantMode::Explicit,
        certified_bound: Some(WASSERSTEIN_CONSTANT * q),
        convenience_bound: WASSERSTEIN_CONSTANT * q,
        constant_override: WASSERSTEIN_CONSTANT,
    })
}

/// `d_K <= (2/pi)^{1/4} sqrt(d_W)` against the standard normal.
pub fn kolmogorov_from_wasserstein(d_w: f64) -> f64 {
    assert!(d_w >= 0.0, "Wasserstein distance must be nonnegative");
    (2.0 / std::f64::consts::PI).powf(0.25) * d_w.sqrt()
}

/// Variance of `sum_i z_{pi(i)} r_i` under a uniform stratified permutation.
pub fn product_variance(z: &[f64], r: &[f64], layout: &StratumLayout) -> f64 {
    ksum((0..layout.num_strata()).map(|k| {
        let nk = layout.size(k);
        if nk < 2 {
            return 0.0;
        }
        let range = layout.range(k);
        let sz = stratum_sq_dev(&z[range.clone()]);
        let sr = stratum_sq_dev(&r[range]);
        sz * sr / (nk - 1) as f64
    }))
}

fn stratum_sq_dev(v: &[f64]) -> f64 {
    let mean = ksum(v.iter().copied()) / v.len() as f64;
    ksum(v.iter().map(|x| (x - mean) * (x - mean)))
}

/// Rate for the product-form statistic `sum_i z_{pi(i)} r_i`:
/// `sigma^{-3} sum_k n_k M3_k(z) M3_k(r)`.
pub fn rate_product(z: &[f64], r: &[f64], layout: &StratumLayout) -> Result<BoundReport> {
    if z.len() != layout.n() || r.len() != layout.n() {
        return Err(Error::InvalidInput(format!(
            "vectors of length {} and {} for {} units",
            z.len(),
            r.len(),
            layout.n()
        )));
    }
    let variance = product_variance(z, r, layout);
    let matrix = StratifiedMatrix::outer_product(layout.clone(), r, z)?;
    if crate::moments::is_degenerate_variance(variance, &matrix) {
        return Err(Error::DegenerateVariance);
    }
    let sigma3 = variance.powf(1.5);
    let q = ksum((0..layout.num_strata()).map(|k| {
        let range = layout.range(k);
        layout.size(k) as f64
            * finite_pop_moment(&z[range.clone()], 3)
            * finite_pop_moment(&r[range], 3)
    })) / sigma3;
    let th = theta(&matrix)?;
    Ok(BoundReport::raw("product", q, regime_for(layout, th), th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn std_swap() -> StratifiedMatrix {
        StratifiedMatrix::from_rows(vec![vec![vec![-0.5, 0.5], vec![0.5, -0.5]]]).unwrap()
    }

    #[test]
    fn f_function_values() {
        for n in [6, 7, 50, 10_000] {
            assert_eq!(f_value(n, 0.0).unwrap(), 0.5);
        }
        let expected = 0.5 - 144.0 - 4.0 * 149f64.sqrt() * 1.5f64.sqrt();
        assert_abs_diff_eq!(f_value(6, 1.0).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(f_value(6, 1.0).unwrap(), -203.30, epsilon = 5e-3);
        let big = f_value(1_000_000, 0.5).unwrap();
        assert!(big > 0.49 && big < 0.5);
        assert!(matches!(f_value(5, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn theta_single_stratum_of_six() {
        let layout = StratumLayout::new(vec![6]).unwrap();
        let a = StratifiedMatrix::from_fn(layout, |_, i, j| ((i * 7 + j * 3) % 5) as f64).unwrap();
        let th = theta(&a).unwrap().unwrap();
        assert_abs_diff_eq!(th, f_value(6, 1.0).unwrap(), epsilon = 1e-9);
        let r = rate(&a, RateMethod::Stratified).unwrap();
        assert_eq!(r.regime, Regime::General);
        assert_eq!(r.exponent_delta, 0.5);
    }

    #[test]
    fn theta_absent_for_small_stratum() {
        let layout = StratumLayout::new(vec![6, 4]).unwrap();
        let a =
            StratifiedMatrix::from_fn(layout, |k, i, j| ((i * 7 + j * 3 + k) % 5) as f64).unwrap();
        assert_eq!(theta(&a).unwrap(), None);
    }

    #[test]
    fn worked_rates() {
        let a = std_swap();
        let t1 = rate(&a, RateMethod::Stratified).unwrap();
        assert_abs_diff_eq!(t1.rate_quantity, 0.25, epsilon = 1e-15);
        assert_eq!(t1.exponent_delta, 0.5);
        assert_eq!(t1.constant_mode, ConstantMode::ReportedRaw);
        assert!(t1.certified_bound.is_none());
        let ind = rate(&a, RateMethod::Independent).unwrap();
        assert_abs_diff_eq!(ind.rate_quantity, 1.0, epsilon = 1e-15);
        assert_eq!(ind.exponent_delta, 1.0);
        let wc = rate(&a, RateMethod::WassersteinCombine).unwrap();
        assert_abs_diff_eq!(wc.rate_quantity, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(wc.convenience_bound, 0.5, epsilon = 1e-15);
        let scaled = wc.with_constant(3.0);
        assert_abs_diff_eq!(scaled.convenience_bound, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_ratio_stratum_rejected() {
        let a = StratifiedMatrix::from_rows(vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![2.0, 2.0], vec![2.0, 2.0]],
        ])
        .unwrap();
        assert_eq!(
            rate(&a, RateMethod::WassersteinCombine),
            Err(Error::ZeroStratumRatio { stratum: 1 })
        );
        assert!(rate(&a, RateMethod::Stratified).is_ok());
    }

    #[test]
    fn wasserstein_bound_swap() {
        let b = wasserstein_bound(&std_swap()).unwrap();
        assert_eq!(b.constant_mode, ConstantMode::Explicit);
        assert_abs_diff_eq!(b.certified_bound.unwrap(), 40.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let c = StratifiedMatrix::from_rows(vec![vec![vec![1.0; 3]; 3]]).unwrap();
        assert_eq!(
            rate(&c, RateMethod::Stratified),
            Err(Error::DegenerateVariance)
        );
        assert_eq!(wasserstein_bound(&c), Err(Error::DegenerateVariance));
        assert_eq!(theta(&c), Err(Error::DegenerateVariance));
    }

    #[test]
    fn kolmogorov_conversion() {
        assert_eq!(kolmogorov_from_wasserstein(0.0), 0.0);
        assert_abs_diff_eq!(kolmogorov_from_wasserstein(1.0), 0.8932, epsilon = 1e-4);
        assert_abs_diff_eq!(kolmogorov_from_wasserstein(40.0), 5.649, epsilon = 1e-3);
    }

    #[test]
    fn product_form_example() {
        let layout = StratumLayout::new(vec![3]).unwrap();
        let z = [1.0, 0.0, 0.0];
        let r = [3.0, 1.0, 2.0];
        assert_abs_diff_eq!(
            product_variance(&z, &r, &layout),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        let rp = rate_product(&z, &r, &layout).unwrap();
        let m = StratifiedMatrix::outer_product(layout.clone(), &r, &z).unwrap();
        let t1 = rate(&m, RateMethod::Stratified).unwrap();
        assert_abs_diff_eq!(rp.rate_quantity, t1.rate_quantity, epsilon = 1e-12);
        assert_eq!(rp.regime, t1.regime);
        assert_eq!(
            rate_product(&[1.0, 1.0, 1.0], &r, &layout),
            Err(Error::DegenerateVariance)
        );
    }
}

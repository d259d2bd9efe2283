//! Kolmogorov and Wasserstein distances from a discrete law to `N(0, 1)`.
//!
//! Both the Monte Carlo ECDF and the enumerated exact law are step CDFs, so
//! they share this code. The Wasserstein integral is evaluated piecewise in
//! closed form using `int Phi = t Phi(t) + phi(t)`; there is no quadrature grid.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::numeric::CompensatedSum;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `int_{-inf}^t Phi`, accurate for `t <= 0`.
fn lower_integral(t: f64) -> f64 {
    t * std_normal_cdf(t) + std_normal_pdf(t)
}

/// `int_t^inf (1 - Phi)`, accurate for `t >= 0`.
fn upper_integral(t: f64) -> f64 {
    std_normal_pdf(t) - t * std_normal_cdf(-t)
}

/// `int_a^b (Phi(t) - c) dt` for a segment not straddling zero; `s = 1 - c`.
fn signed_gap(a: f64, b: f64, c: f64, s: f64) -> f64 {
    if a >= 0.0 {
        s * (b - a) - (upper_integral(a) - upper_integral(b))
    } else {
        (lower_integral(b) - lower_integral(a)) - c * (b - a)
    }
}

/// `int_a^b |Phi(t) - c| dt` with `c = 1 - s` constant on `[a, b]`.
fn abs_gap(a: f64, b: f64, c: f64, s: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut cuts = vec![a];
    if a < 0.0 && b > 0.0 {
        cuts.push(0.0);
    }
    if c > 0.0 && s > 0.0 {
        let crossing = if c <= 0.5 {
            std_normal_quantile(c)
        } else {
            -std_normal_quantile(s)
        };
        if crossing > a && crossing < b {
            cuts.push(crossing);
        }
    }
    cuts.push(b);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.windows(2)
        .map(|w| signed_gap(w[0], w[1], c, s).abs())
        .sum()
}

/// Right-continuous step CDF with finitely many jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCdf {
    points: Vec<f64>,
    cdf: Vec<f64>,
    survival: Vec<f64>,
}

impl StepCdf {
    /// From sorted distinct support points and their probabilities.
    pub fn from_atoms(atoms: &[(f64, f64)]) -> Self {
        assert!(!atoms.is_empty(), "step CDF needs at least one atom");
        debug_assert!(atoms.windows(2).all(|w| w[0].0 < w[1].0));
        let points: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        let mut cdf = Vec::with_capacity(atoms.len());
        let mut acc = CompensatedSum::new();
        for &(_, p) in atoms {
            acc.add(p);
            cdf.push(acc.value());
        }
        let mut survival = vec![0.0; atoms.len()];
        let mut acc = CompensatedSum::new();
        for i in (0..atoms.len()).rev() {
            survival[i] = acc.value();
            acc.add(atoms[i].1);
        }
        let total = acc.value();
        for (c, s) in cdf.iter_mut().zip(survival.iter_mut()) {
            *c /= total;
            *s /= total;
        }
        Self {
            points,
            cdf,
            survival,
        }
    }

    /// Empirical CDF of a sorted sample; tied draws merge into one jump.
    pub fn from_sorted_sample(draws: &[f64]) -> Self {
        assert!(!draws.is_empty(), "empty sample");
        debug_assert!(draws.windows(2).all(|w| w[0] <= w[1]));
        let m = draws.len();
        let mut points = Vec::new();
        let mut cdf = Vec::new();
        let mut survival = Vec::new();
        let mut i = 0;
        while i < m {
            let x = draws[i];
            let mut j = i + 1;
            while j < m && draws[j] == x {
                j += 1;
            }
            points.push(x);
            cdf.push(j as f64 / m as f64);
            survival.push((m - j) as f64 / m as f64);
            i = j;
        }
        Self {
            points,
            cdf,
            survival,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `sup_t |F(t) - Phi(t)|`, attained at a jump from the left or the right.
    pub fn kolmogorov(&self) -> f64 {
        let mut best: f64 = 0.0;
        let mut before = 0.0;
        for (&x, &after) in self.points.iter().zip(&self.cdf) {
            let phi = std_normal_cdf(x);
            best = best.max((after - phi).abs()).max((before - phi).abs());
            before = after;
        }
        best
    }

    /// `int |F(t) - Phi(t)| dt` over the real line.
    pub fn wasserstein(&self) -> f64 {
        let mut total = CompensatedSum::new();
        let first = self.points[0];
        // F = 0 left of the first jump.
        total.add(if first <= 0.0 {
            lower_integral(first)
        } else {
            lower_integral(0.0) + abs_gap(0.0, first, 0.0, 1.0)
        });
        for i in 0..self.points.len() - 1 {
            total.add(abs_gap(
                self.points[i],
                self.points[i + 1],
                self.cdf[i],
                self.survival[i],
            ));
        }
        let last = self.points[self.points.len() - 1];
        // F = 1 right of the last jump.
        total.add(if last >= 0.0 {
            upper_integral(last)
        } else {
            abs_gap(last, 0.0, 1.0, 0.0) + upper_integral(0.0)
        });
        total.value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent composite Simpson quadrature of |F - Phi|, split at the
    /// jumps so each piece is smooth apart from at most one kink.
    fn quadrature_wasserstein(atoms: &[(f64, f64)]) -> f64 {
        let mut cuts = vec![-14.0];
        cuts.extend(atoms.iter().map(|a| a.0));
        cuts.push(14.0);
        let mut total = 0.0;
        let mut mass = 0.0;
        for (w, seg) in cuts.windows(2).enumerate() {
            if w > 0 {
                mass += atoms[w - 1].1;
            }
            let f = |t: f64| (mass - std_normal_cdf(t)).abs();
            let steps = 200_000;
            let h = (seg[1] - seg[0]) / steps as f64;
            let mut s = f(seg[0]) + f(seg[1]);
            for i in 1..steps {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(seg[0] + i as f64 * h);
            }
            total += s * h / 3.0;
        }
        total
    }

    #[test]
    fn two_point_law() {
        let atoms = [(-1.0, 0.5), (1.0, 0.5)];
        let cdf = StepCdf::from_atoms(&atoms);
        let phi1 = std_normal_cdf(1.0);
        assert_abs_diff_eq!(cdf.kolmogorov(), phi1 - 0.5, epsilon = 1e-15);
        // Closed form: 2(phi(1) - (1 - Phi(1))) + 2(Phi(1) + phi(1) - phi(0) - 1/2).
        let closed = 2.0 * (std_normal_pdf(1.0) - (1.0 - phi1))
            + 2.0 * (phi1 + std_normal_pdf(1.0) - std_normal_pdf(0.0) - 0.5);
        assert_abs_diff_eq!(cdf.wasserstein(), closed, epsilon = 1e-14);
        assert_abs_diff_eq!(cdf.wasserstein(), 0.5354, epsilon = 1e-4);
        assert_abs_diff_eq!(
            cdf.wasserstein(),
            quadrature_wasserstein(&atoms),
            epsilon = 1e-6
        );
    }

    #[test]
    fn point_mass_at_zero() {
        let cdf = StepCdf::from_atoms(&[(0.0, 1.0)]);
        assert_abs_diff_eq!(cdf.kolmogorov(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cdf.wasserstein(),
            (2.0 / std::f64::consts::PI).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn matches_quadrature_on_skewed_atoms() {
        let atoms = [
            (-2.5, 0.1),
            (-0.3, 0.45),
            (0.2, 0.05),
            (1.7, 0.3),
            (4.0, 0.1),
        ];
        let cdf = StepCdf::from_atoms(&atoms);
        assert_abs_diff_eq!(
            cdf.wasserstein(),
            quadrature_wasserstein(&atoms),
            epsilon = 1e-6
        );
        let far = [(3.0, 0.5), (5.0, 0.5)];
        assert_abs_diff_eq!(
            StepCdf::from_atoms(&far).wasserstein(),
            quadrature_wasserstein(&far),
            epsilon = 1e-6
        );
        let left = [(-6.0, 0.25), (-3.0, 0.75)];
        assert_abs_diff_eq!(
            StepCdf::from_atoms(&left).wasserstein(),
            quadrature_wasserstein(&left),
            epsilon = 1e-6
        );
    }

    #[test]
    fn sample_at_normal_quantiles() {
        let m = 1000;
        let draws: Vec<f64> = (1..=m)
            .map(|i| std_normal_quantile((i as f64 - 0.5) / m as f64))
            .collect();
        let cdf = StepCdf::from_sorted_sample(&draws);
        // The quantile function itself is accurate to about 1e-11.
        assert!(cdf.kolmogorov() <= 0.5 / m as f64 + 1e-9);
    }

    #[test]
    fn ties_merge() {
        let cdf = StepCdf::from_sorted_sample(&[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(cdf.len(), 2);
        let exact = StepCdf::from_atoms(&[(-1.0, 0.5), (1.0, 0.5)]);
        assert_abs_diff_eq!(cdf.wasserstein(), exact.wasserstein(), epsilon = 1e-15);
    }
}

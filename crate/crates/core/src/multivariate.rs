//! Vectors of stratified statistics sharing one permutation: the stratified
//! inner product, joint standardization, and the multivariate rate formulas.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bounds::{regime_for, theta, BoundReport};
use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{transform, TransformMode};
use crate::numeric::ksum;

/// Relative eigenvalue floor for the covariance of the components.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Allowed deviation from orthonormal, centered components.
pub const STANDARDIZED_TOL: f64 = 1e-8;

/// Components `G_1, ..., G_H` on a common layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MultiJson", into = "MultiJson")]
pub struct MultiStatistic {
    layout: StratumLayout,
    components: Vec<StratifiedMatrix>,
}

/// Wire form: `{"sizes":[...],"components":[blocks,...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiJson {
    pub sizes: Vec<usize>,
    pub components: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MultiStatistic {
    pub fn new(components: Vec<StratifiedMatrix>) -> Result<Self> {
        let layout = components
            .first()
            .ok_or_else(|| Error::InvalidInput("at least one component required".into()))?
            .layout()
            .clone();
        if let Some(h) = components.iter().position(|g| g.layout() != &layout) {
            return Err(Error::LayoutMismatch(format!(
                "component {h} differs from component 0"
            )));
        }
        Ok(Self { layout, components })
    }

    pub fn layout(&self) -> &StratumLayout {
        &self.layout
    }

    pub fn components(&self) -> &[StratifiedMatrix] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// `(W_{G_1, pi}, ..., W_{G_H, pi})`.
    pub fn evaluate(&self, images: &[usize]) -> Vec<f64> {
        self.components
            .iter()
            .map(|g| g.statistic(images))
            .collect()
    }

    /// Gram matrix of the components under [`inner_product_k`].
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let h = self.dim();
        (0..h)
            .map(|r| {
                (0..h)
                    .map(|c| {
                        inner_unchecked(&self.components[r.min(c)], &self.components[r.max(c)])
                    })
                    .collect()
            })
            .collect()
    }
}

impl TryFrom<MultiJson> for MultiStatistic {
    type Error = Error;

    fn try_from(json: MultiJson) -> Result<Self> {
        let components = json
            .components
            .into_iter()
            .map(|blocks| {
                let g = StratifiedMatrix::from_rows(blocks)?;
                if g.layout().sizes() != json.sizes.as_slice() {
                    return Err(Error::LayoutMismatch(format!(
                        "component shape {:?} does not match sizes {:?}",
                        g.layout().sizes(),
                        json.sizes
                    )));
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }
}

impl From<MultiStatistic> for MultiJson {
    fn from(m: MultiStatistic) -> Self {
        MultiJson {
            sizes: m.layout.sizes().to_vec(),
            components: m
                .components
                .iter()
                .map(|g| {
                    (0..m.layout.num_strata())
                        .map(|k| g.block_rows(k))
                        .collect()
                })
                .collect(),
        }
    }
}

fn inner_unchecked(g: &StratifiedMatrix, h: &StratifiedMatrix) -> f64 {
    let layout = g.layout();
    ksum(
        (0..layout.num_strata())
            .filter(|&k| layout.size(k) > 1)
            .map(|k| {
                let dot = ksum(g.block(k).iter().zip(h.block(k)).map(|(a, b)| a * b));
                dot / (layout.size(k) - 1) as f64
            }),
    )
}

/// `<G, H>_K = sum_k (n_k - 1)^{-1} sum_ij g_ij h_ij`.
///
/// Computed on the raw entries; it equals `cov(W_G, W_H)` only when both
/// inputs are centered. Singleton strata contribute nothing.
pub fn inner_product_k(g: &StratifiedMatrix, h: &StratifiedMatrix) -> Result<f64> {
    if g.layout() != h.layout() {
        return Err(Error::LayoutMismatch(format!(
            "sizes {:?} vs {:?}",
            g.layout().sizes(),
            h.layout().sizes()
        )));
    }
    Ok(inner_unchecked(g, h))
}

/// Centers each component and mixes them with the symmetric `V^{-1/2}`,
/// where `V` is the Gram matrix of the centered components.
pub fn standardize_multi(m: &MultiStatistic) -> Result<MultiStatistic> {
    let centered = m
        .components
        .iter()
        .map(|g| transform(g, TransformMode::Center))
        .collect::<Result<Vec<_>>>()?;
    let centered = MultiStatistic {
        layout: m.layout.clone(),
        components: centered,
    };
    let h = m.dim();
    let gram = centered.gram();
    let v = DMatrix::from_fn(h, h, |r, c| gram[r][c]);
    let eigen = SymmetricEigen::new(v);
    let max = eigen.eigenvalues.max();
    let min = eigen.eigenvalues.min();
    if max.is_nan() || max <= 0.0 || min <= EIGEN_FLOOR * max {
        return Err(Error::SingularCovariance { min, max });
    }
    let scale = DMatrix::from_diagonal(&eigen.eigenvalues.map(|l| l.sqrt().recip()));
    let inv_sqrt = &eigen.eigenvectors * scale * eigen.eigenvectors.transpose();
    let components = (0..h)
        .map(|r| {
            let blocks = (0..m.layout.num_strata())
                .map(|k| {
                    let len = centered.components[0].block(k).len();
                    (0..len)
                        .map(|e| {
                            ksum(
                                (0..h)
                                    .map(|c| inv_sqrt[(r, c)] * centered.components[c].block(k)[e]),
                            )
                        })
                        .collect()
                })
                .collect();
            StratifiedMatrix::new(m.layout.clone(), blocks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiStatistic {
        layout: m.layout.clone(),
        components,
    })
}

/// Largest deviation from centered, orthonormal components.
pub fn standardization_error(m: &MultiStatistic) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for g in &m.components {
        let c = transform(g, TransformMode::Center)?;
        for k in 0..m.layout.num_strata() {
            for (a, b) in g.block(k).iter().zip(c.block(k)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    for (r, row) in m.gram().iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((x - target).abs());
        }
    }
    Ok(worst)
}

/// Rate for `b^T Gamma` with standardized components: the largest
/// `|sum_h b_h g_{h,ij}|`. Regime from theta of `sum_h b_h G_h`.
pub fn rate_linear_combination(m: &MultiStatistic, b: &[f64]) -> Result<BoundReport> {
    if b.len() != m.dim() {
        return Err(Error::InvalidInput(format!(
            "b has {} entries for {} components",
            b.len(),
            m.dim()
        )));
    }
    let norm = ksum(b.iter().map(|x| x * x)).sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "b has norm {norm}, expected 1"
        )));
    }
    let err = standardization_error(m)?;
    if err > STANDARDIZED_TOL {
        return Err(Error::NotStandardized(format!(
            "deviation {err:e} exceeds {STANDARDIZED_TOL:e}"
        )));
    }
    let blocks: Vec<Vec<f64>> = (0..m.layout.num_strata())
        .map(|k| {
            (0..m.components[0].block(k).len())
                .map(|e| ksum(m.components.iter().zip(b).map(|(g, bh)| bh * g.block(k)[e])))
                .collect()
        })
        .collect();
    let combined = StratifiedMatrix::new(m.layout.clone(), blocks)?;
    let q = combined.max_abs();
    let th = theta(&combined)?;
    Ok(BoundReport::raw(
        "linear_combination",
        q,
        regime_for(&m.layout, th),
        th,
    ))
}

/// Convex-set rate quantity with unit constant:
/// `H^{13/4} B (n B^2 + K) + H^{3/4} B + H^{13/8} (n-K)^{1/4} B^{3/2} + H^{11/8} (n-K)^{1/2} B^2`.
pub fn rate_convex_sets(h_dim: usize, b_n: f64, n: usize, k_strata: usize) -> Result<f64> {
    if k_strata < 1 || n <= k_strata {
        return Err(Error::Domain(format!(
            "need n > K >= 1, got n = {n}, K = {k_strata}"
        )));
    }
    if h_dim < 1 || !b_n.is_finite() || b_n < 0.0 {
        return Err(Error::Domain(format!(
            "need H >= 1 and B >= 0, got H = {h_dim}, B = {b_n}"
        )));
    }
    let h = h_dim as f64;
    let nf = n as f64;
    let dof = (n - k_strata) as f64;
    Ok(h.powf(3.25) * b_n * (nf * b_n * b_n + k_strata as f64)
        + h.powf(0.75) * b_n
        + h.powf(1.625) * dof.powf(0.25) * b_n.powf(1.5)
        + h.powf(1.375) * dof.sqrt() * b_n * b_n)
}

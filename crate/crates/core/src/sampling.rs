//! Uniform stratified permutations, the random-transposition Stein pair,
//! and the square-weighted four-index zero-bias coupling.

use std::sync::OnceLock;

use rand::distr::Distribution;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{moments, transform, TransformMode};
use crate::rng::RandomSource;

/// Default largest stratum for which the `n_k^4` zero-bias table is built.
pub const DEFAULT_TABLE_LIMIT: usize = 32;

/// A permutation of `0..n` mapping every stratum onto itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedPermutation {
    layout: StratumLayout,
    images: Vec<usize>,
}

impl StratifiedPermutation {
    pub fn identity(layout: StratumLayout) -> Self {
        let images = (0..layout.n()).collect();
        Self { layout, images }
    }

    pub fn from_images(layout: StratumLayout, images: Vec<usize>) -> Result<Self> {
        let p = Self { layout, images };
        if !p.is_valid() {
            return Err(Error::InvalidInput(
                "images are not a stratum-preserving bijection".into(),
            ));
        }
        Ok(p)
    }

    pub fn layout(&self) -> &StratumLayout {
        &self.layout
    }

    pub fn images(&self) -> &[usize] {
        &self.images
    }

    pub fn image(&self, i: usize) -> usize {
        self.images[i]
    }

    pub fn inverse(&self) -> Vec<usize> {
        invert(&self.images)
    }

    /// Right-composes with the transposition of `a` and `b`: `pi ∘ tau_ab`.
    pub fn compose_transposition(&self, a: usize, b: usize) -> Self {
        let mut images = self.images.clone();
        images.swap(a, b);
        Self {
            layout: self.layout.clone(),
            images,
        }
    }

    /// Bijection on `0..n` with `pi(I_k) = I_k` for every stratum.
    pub fn is_valid(&self) -> bool {
        let n = self.layout.n();
        if self.images.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for (i, &img) in self.images.iter().enumerate() {
            if img >= n || seen[img] || self.layout.stratum_of(img) != self.layout.stratum_of(i) {
                return false;
            }
            seen[img] = true;
        }
        true
    }

    /// Positions where the two permutations disagree.
    pub fn differences(&self, other: &Self) -> Vec<usize> {
        self.images
            .iter()
            .zip(&other.images)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

pub(crate) fn invert(images: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; images.len()];
    for (i, &img) in images.iter().enumerate() {
        inv[img] = i;
    }
    inv
}

/// Independent Fisher–Yates shuffle of every stratum's images in place.
pub fn shuffle_within_strata(layout: &StratumLayout, images: &mut [usize], rng: &mut RandomSource) {
    for k in 0..layout.num_strata() {
        let slice = &mut images[layout.range(k)];
        for top in (1..slice.len()).rev() {
            let j = rng.index(top + 1);
            slice.swap(top, j);
        }
    }
}

/// Uniform draw from the stratified permutation group.
pub fn sample_permutation(layout: &StratumLayout, rng: &mut RandomSource) -> StratifiedPermutation {
    let mut images: Vec<usize> = (0..layout.n()).collect();
    shuffle_within_strata(layout, &mut images, rng);
    StratifiedPermutation {
        layout: layout.clone(),
        images,
    }
}

/// One step of the random-transposition Stein pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SteinPairDraw {
    pub stratum: usize,
    pub i: usize,
    pub j: usize,
    /// `pi ∘ tau_IJ`.
    pub pi_double_prime: StratifiedPermutation,
    pub w: f64,
    pub w_double_prime: f64,
}

/// Draws a stratum with probability `(n_k - 1)/(n - K)`, a uniform ordered pair
/// of distinct units in it, and transposes them.
pub fn stein_pair_draw(
    a: &StratifiedMatrix,
    pi: &StratifiedPermutation,
    rng: &mut RandomSource,
) -> Result<SteinPairDraw> {
    let layout = a.layout();
    let dof = layout.degrees_of_freedom();
    if dof == 0 {
        return Err(Error::DegenerateLayout);
    }
    // Slot s in 0..n-K falls in stratum k with n_k - 1 slots.
    let mut slot = rng.index(dof);
    let mut stratum = 0;
    while slot >= layout.size(stratum) - 1 {
        slot -= layout.size(stratum) - 1;
        stratum += 1;
    }
    let nk = layout.size(stratum);
    let off = layout.offset(stratum);
    let i = rng.index(nk);
    let mut j = rng.index(nk - 1);
    if j >= i {
        j += 1;
    }
    let (i, j) = (off + i, off + j);
    let next = pi.compose_transposition(i, j);
    let w = a.statistic(pi.images());
    let w_double_prime = a.statistic(next.images());
    Ok(SteinPairDraw {
        stratum,
        i,
        j,
        pi_double_prime: next,
        w,
        w_double_prime,
    })
}

/// `pi_dagger` from `pi` and the four indices, by the three-case rule.
///
/// `inv` is the inverse of `images`. The returned permutation maps `{i, j}`
/// onto `{p, q}` and agrees with `pi` off `{i, j, pi^-1(p), pi^-1(q)}`.
pub fn pi_dagger_images(
    images: &[usize],
    inv: &[usize],
    i: usize,
    j: usize,
    p: usize,
    q: usize,
) -> Vec<usize> {
    let mut out = images.to_vec();
    if q == images[i] && p != images[j] {
        out.swap(inv[p], j);
    } else if q != images[i] && p == images[j] {
        out.swap(inv[q], i);
    } else {
        let (ip, iq) = (inv[p], inv[q]);
        out.swap(ip, i);
        out.swap(iq, j);
    }
    out
}

/// Output of one zero-bias coupling draw. Statistic values are for the
/// centered matrix `A0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroBiasDraw {
    pub base: StratifiedPermutation,
    pub stratum: usize,
    /// Global `(I, J, P, Q)`.
    pub indices: (usize, usize, usize, usize),
    pub pi_dagger: StratifiedPermutation,
    pub pi_ddagger: StratifiedPermutation,
    pub u: f64,
    pub w: f64,
    pub w_dagger: f64,
    pub w_ddagger: f64,
    pub w_star: f64,
}

/// Reusable sampler for the zero-bias transformation of `W_{A0, pi}`.
///
/// Stratum `k` is chosen with probability `R^2_k`; the four indices are drawn
/// from an alias table of size `n_k^4` with mass proportional to
/// `(a_ip + a_jq - a_iq - a_jp)^2`. Tables are built on first use.
pub struct ZeroBiasSampler {
    centered: StratifiedMatrix,
    stratum_variances: Vec<f64>,
    stratum_choice: WeightedAliasIndex<f64>,
    tables: Vec<OnceLock<WeightedAliasIndex<f64>>>,
}

impl ZeroBiasSampler {
    pub fn new(a: &StratifiedMatrix) -> Result<Self> {
        Self::with_limit(a, DEFAULT_TABLE_LIMIT)
    }

    pub fn with_limit(a: &StratifiedMatrix, limit: usize) -> Result<Self> {
        let report = moments(a);
        let ratios = report.stratum_ratios.ok_or(Error::DegenerateVariance)?;
        for (k, &r) in ratios.iter().enumerate() {
            let size = a.layout().size(k);
            if r > 0.0 && size > limit {
                return Err(Error::StratumTooLarge {
                    stratum: k,
                    size,
                    limit,
                });
            }
        }
        let stratum_choice = WeightedAliasIndex::new(ratios.clone())
            .map_err(|e| Error::InvalidInput(format!("stratum weights: {e}")))?;
        let centered = transform(a, TransformMode::Center)?;
        let tables = (0..ratios.len()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            centered,
            stratum_variances: report.stratum_variances,
            stratum_choice,
            tables,
        })
    }

    pub fn centered(&self) -> &StratifiedMatrix {
        &self.centered
    }

    /// Normalized mass of `(i, j, p, q)` within stratum `k`, flat index
    /// `((i n + j) n + p) n + q` on local indices.
    pub fn four_index_mass(&self, k: usize) -> Vec<f64> {
        let nk = self.centered.layout().size(k);
        let var = self.stratum_variances[k];
        if var <= 0.0 {
            return vec![0.0; nk.pow(4)];
        }
        let norm = 4.0 * (nk * nk) as f64 * (nk - 1) as f64 * var;
        let block = self.centered.block(k);
        let mut mass = Vec::with_capacity(nk.pow(4));
        for i in 0..nk {
            for j in 0..nk {
                for p in 0..nk {
                    for q in 0..nk {
                        let b = block[i * nk + p] + block[j * nk + q]
                            - block[i * nk + q]
                            - block[j * nk + p];
                        mass.push(b * b / norm);
                    }
                }
            }
        }
        mass
    }

    fn table(&self, k: usize) -> &WeightedAliasIndex<f64> {
        self.tables[k].get_or_init(|| {
            WeightedAliasIndex::new(self.four_index_mass(k))
                .expect("stratum with positive variance has positive mass")
        })
    }

    pub fn draw(&self, rng: &mut RandomSource) -> ZeroBiasDraw {
        let layout = self.centered.layout();
        let base = sample_permutation(layout, rng);
        let k = self.stratum_choice.sample(rng.inner());
        let nk = layout.size(k);
        let off = layout.offset(k);
        let mut flat = self.table(k).sample(rng.inner());
        let q = flat % nk;
        flat /= nk;
        let p = flat % nk;
        flat /= nk;
        let j = flat % nk;
        let i = flat / nk;
        let (i, j, p, q) = (off + i, off + j, off + p, off + q);
        let inv = base.inverse();
        let dagger = pi_dagger_images(base.images(), &inv, i, j, p, q);
        let mut ddagger = dagger.clone();
        ddagger.swap(i, j);
        let u = rng.uniform();
        let w = self.centered.statistic(base.images());
        let w_dagger = self.centered.statistic(&dagger);
        let w_ddagger = self.centered.statistic(&ddagger);
        let w_star = if w_dagger == w_ddagger {
            w_dagger
        } else {
            u * w_dagger + (1.0 - u) * w_ddagger
        };
        ZeroBiasDraw {
            stratum: k,
            indices: (i, j, p, q),
            pi_dagger: StratifiedPermutation {
                layout: layout.clone(),
                images: dagger,
            },
            pi_ddagger: StratifiedPermutation {
                layout: layout.clone(),
                images: ddagger,
            },
            base,
            u,
            w,
            w_dagger,
            w_ddagger,
            w_star,
        }
    }
}

/// One-shot zero-bias draw; builds a fresh [`ZeroBiasSampler`].
pub fn zero_bias_draw(a: &StratifiedMatrix, rng: &mut RandomSource) -> Result<ZeroBiasDraw> {
    Ok(ZeroBiasSampler::new(a)?.draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn binomial_ok(count: usize, total: usize, p: f64) -> bool {
        let expect = total as f64 * p;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - expect).abs() <= 3.0 * sd
    }

    #[test]
    fn singleton_strata_give_identity() {
        let layout = StratumLayout::uniform(5, 1).unwrap();
        let mut rng = RandomSource::new(3);
        for _ in 0..100 {
            let p = sample_permutation(&layout, &mut rng);
            assert_eq!(p.images(), &[0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn uniform_over_two_by_two() {
        let layout = StratumLayout::new(vec![2, 2]).unwrap();
        let mut rng = RandomSource::new(11);
        let draws = 100_000;
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..draws {
            let p = sample_permutation(&layout, &mut rng);
            assert!(p.is_valid());
            *counts.entry(p.images().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| binomial_ok(c, draws, 0.25)));
    }

    #[test]
    fn uniform_over_three() {
        let layout = StratumLayout::new(vec![3]).unwrap();
        let mut rng = RandomSource::new(12);
        let draws = 100_000;
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts
                .entry(sample_permutation(&layout, &mut rng).images().to_vec())
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        assert!(counts.values().all(|&c| binomial_ok(c, draws, 1.0 / 6.0)));
    }

    #[test]
    fn stein_pair_picks_only_swappable_stratum() {
        let a = StratifiedMatrix::from_rows(vec![
            vec![vec![1.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![2.0]],
        ])
        .unwrap();
        let mut rng = RandomSource::new(5);
        let pi = StratifiedPermutation::identity(a.layout().clone());
        for _ in 0..200 {
            let d = stein_pair_draw(&a, &pi, &mut rng).unwrap();
            assert_eq!(d.stratum, 1);
            assert_ne!(d.i, d.j);
            let diff = a.get(d.i, pi.image(d.j)) + a.get(d.j, pi.image(d.i))
                - a.get(d.i, pi.image(d.i))
                - a.get(d.j, pi.image(d.j));
            assert!((d.w_double_prime - d.w - diff).abs() < 1e-12);
        }
    }

    #[test]
    fn stein_pair_stratum_frequencies() {
        let a = StratifiedMatrix::from_rows(vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        ])
        .unwrap();
        let mut rng = RandomSource::new(6);
        let pi = StratifiedPermutation::identity(a.layout().clone());
        let draws = 20_000;
        let first = (0..draws)
            .filter(|_| stein_pair_draw(&a, &pi, &mut rng).unwrap().stratum == 0)
            .count();
        assert!(binomial_ok(first, draws, 0.5));
    }

    #[test]
    fn stein_pair_needs_a_pair() {
        let a = StratifiedMatrix::from_rows(vec![vec![vec![1.0]], vec![vec![2.0]]]).unwrap();
        let pi = StratifiedPermutation::identity(a.layout().clone());
        let mut rng = RandomSource::new(0);
        assert_eq!(
            stein_pair_draw(&a, &pi, &mut rng),
            Err(Error::DegenerateLayout)
        );
    }

    fn mixed_matrix() -> StratifiedMatrix {
        let layout = StratumLayout::new(vec![3, 4]).unwrap();
        StratifiedMatrix::from_fn(layout, |k, i, j| {
            ((i * 5 + j * 3 + k * 7) % 11) as f64 - 4.0 + 0.1 * (i * j) as f64
        })
        .unwrap()
    }

    #[test]
    fn zero_bias_draw_structure() {
        let a = mixed_matrix();
        let sampler = ZeroBiasSampler::new(&a).unwrap();
        let mut rng = RandomSource::new(21);
        for _ in 0..2000 {
            let d = sampler.draw(&mut rng);
            let (i, j, p, q) = d.indices;
            let range = a.layout().range(d.stratum);
            assert!([i, j, p, q].iter().all(|x| range.contains(x)));
            let mut got = [d.pi_dagger.image(i), d.pi_dagger.image(j)];
            got.sort();
            let mut want = [p, q];
            want.sort();
            assert_eq!(got, want);
            assert!(d.pi_dagger.is_valid() && d.pi_ddagger.is_valid());
            let inv = d.base.inverse();
            let touched = [i, j, inv[p], inv[q]];
            for m in d.base.differences(&d.pi_dagger) {
                assert!(touched.contains(&m));
            }
            assert!(d.base.differences(&d.pi_dagger).len() <= 4);
            assert_eq!(
                d.pi_dagger.differences(&d.pi_ddagger),
                vec![i.min(j), i.max(j)]
            );
            let lo = d.w_dagger.min(d.w_ddagger);
            let hi = d.w_dagger.max(d.w_ddagger);
            assert!(d.w_star >= lo - 1e-12 && d.w_star <= hi + 1e-12);
        }
    }

    #[test]
    fn four_index_mass_sums_to_one() {
        let a = mixed_matrix();
        let sampler = ZeroBiasSampler::new(&a).unwrap();
        for k in 0..2 {
            let total: f64 = sampler.four_index_mass(k).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_limit_and_zero_ratio_strata() {
        let layout = StratumLayout::new(vec![3, 5]).unwrap();
        let a =
            StratifiedMatrix::from_fn(
                layout.clone(),
                |k, i, j| if k == 0 { (i * j) as f64 } else { 1.0 },
            )
            .unwrap();
        // The constant stratum never gets selected, so its size is unconstrained.
        assert!(ZeroBiasSampler::with_limit(&a, 3).is_ok());
        let b = StratifiedMatrix::from_fn(layout, |_, i, j| (i * j) as f64).unwrap();
        assert_eq!(
            ZeroBiasSampler::with_limit(&b, 3).err(),
            Some(Error::StratumTooLarge {
                stratum: 1,
                size: 5,
                limit: 3
            })
        );
        let c = StratifiedMatrix::from_rows(vec![vec![vec![1.0; 2]; 2]]).unwrap();
        assert_eq!(
            ZeroBiasSampler::new(&c).err(),
            Some(Error::DegenerateVariance)
        );
    }

    #[test]
    fn seeds_replay() {
        let a = mixed_matrix();
        let sampler = ZeroBiasSampler::new(&a).unwrap();
        let run = |seed| {
            let mut rng = RandomSource::new(seed);
            (0..50)
                .map(|_| sampler.draw(&mut rng).w_star)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}

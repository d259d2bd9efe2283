//! Stratified sampling and stratified experiments compiled to stratified
//! matrices, their estimators and variances, and post-stratification by
//! rejection sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bounds::{regime_for, theta, BoundReport, Regime};
use crate::distance::std_normal_cdf;
use crate::error::{Error, Result};
use crate::layout::StratumLayout;
use crate::matrix::StratifiedMatrix;
use crate::moments::{finite_pop_moment, is_degenerate_variance, stratum_variance};
use crate::montecarlo::{parallel_chunks, CHUNK};
use crate::numeric::{binomial, ksum, next_combination};
use crate::oracle::{enumerate_distribution, ExactDistribution, ATOM_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Sampling,
    Experiment,
}

fn default_weights(layout: &StratumLayout) -> Vec<f64> {
    let n = layout.n() as f64;
    layout.sizes().iter().map(|&s| s as f64 / n).collect()
}

fn check_weights(layout: &StratumLayout, weights: &[f64]) -> Result<()> {
    if weights.len() != layout.num_strata() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} strata",
            weights.len(),
            layout.num_strata()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput(
            "weights must be positive and finite".into(),
        ));
    }
    Ok(())
}

fn check_values(name: &str, layout: &StratumLayout, v: &[f64]) -> Result<()> {
    if v.len() != layout.n() {
        return Err(Error::InvalidInput(format!(
            "{name} has {} values for {} units",
            v.len(),
            layout.n()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has non-finite values")));
    }
    Ok(())
}

/// Stratified simple random sampling without replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDesign {
    layout: StratumLayout,
    outcomes: Vec<f64>,
    sample_sizes: Vec<usize>,
    weights: Vec<f64>,
}

impl SamplingDesign {
    /// Weights default to `n_k / n`.
    pub fn new(
        layout: StratumLayout,
        outcomes: Vec<f64>,
        sample_sizes: Vec<usize>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_values("outcomes", &layout, &outcomes)?;
        if sample_sizes.len() != layout.num_strata() {
            return Err(Error::InvalidInput(
                "one sample size per stratum required".into(),
            ));
        }
        for (k, &s) in sample_sizes.iter().enumerate() {
            if s < 1 || s > layout.size(k) {
                return Err(Error::InvalidInput(format!(
                    "stratum {k}: sample size {s} outside 1..={}",
                    layout.size(k)
                )));
            }
        }
        let weights = weights.unwrap_or_else(|| default_weights(&layout));
        check_weights(&layout, &weights)?;
        Ok(Self {
            layout,
            outcomes,
            sample_sizes,
            weights,
        })
    }

    pub fn layout(&self) -> &StratumLayout {
        &self.layout
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn sample_sizes(&self) -> &[usize] {
        &self.sample_sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Stratified completely randomized experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDesign {
    layout: StratumLayout,
    treated_outcomes: Vec<f64>,
    control_outcomes: Vec<f64>,
    treated_counts: Vec<usize>,
    weights: Vec<f64>,
}

impl ExperimentDesign {
    pub fn new(
        layout: StratumLayout,
        treated_outcomes: Vec<f64>,
        control_outcomes: Vec<f64>,
        treated_counts: Vec<usize>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_values("treated outcomes", &layout, &treated_outcomes)?;
        check_values("control outcomes", &layout, &control_outcomes)?;
        if treated_counts.len() != layout.num_strata() {
            return Err(Error::InvalidInput(
                "one treated count per stratum required".into(),
            ));
        }
        for (k, &t) in treated_counts.iter().enumerate() {
            if t < 1 || t + 1 > layout.size(k) {
                return Err(Error::InvalidInput(format!(
                    "stratum {k}: treated count {t} leaves an arm empty (size {})",
                    layout.size(k)
                )));
            }
        }
        let weights = weights.unwrap_or_else(|| default_weights(&layout));
        check_weights(&layout, &weights)?;
        Ok(Self {
            layout,
            treated_outcomes,
            control_outcomes,
            treated_counts,
            weights,
        })
    }

    pub fn layout(&self) -> &StratumLayout {
        &self.layout
    }

    pub fn treated_outcomes(&self) -> &[f64] {
        &self.treated_outcomes
    }

    pub fn control_outcomes(&self) -> &[f64] {
        &self.control_outcomes
    }

    pub fn treated_counts(&self) -> &[usize] {
        &self.treated_counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Sampling(SamplingDesign),
    Experiment(ExperimentDesign),
}

impl Design {
    pub fn kind(&self) -> DesignKind {
        match self {
            Design::Sampling(_) => DesignKind::Sampling,
            Design::Experiment(_) => DesignKind::Experiment,
        }
    }

    pub fn layout(&self) -> &StratumLayout {
        match self {
            Design::Sampling(d) => d.layout(),
            Design::Experiment(d) => d.layout(),
        }
    }

    /// Number of selected (sampled or treated) units per stratum.
    pub fn selected_counts(&self) -> &[usize] {
        match self {
            Design::Sampling(d) => d.sample_sizes(),
            Design::Experiment(d) => d.treated_counts(),
        }
    }

    /// Population mean `gamma` or average treatment effect `tau`, weighted.
    pub fn target(&self) -> f64 {
        let layout = self.layout();
        match self {
            Design::Sampling(d) => ksum((0..layout.num_strata()).map(|k| {
                let r = layout.range(k);
                d.weights[k] * ksum(d.outcomes[r.clone()].iter().copied()) / r.len() as f64
            })),
            Design::Experiment(d) => ksum((0..layout.num_strata()).map(|k| {
                let r = layout.range(k);
                let diff = ksum(
                    r.clone()
                        .map(|i| d.treated_outcomes[i] - d.control_outcomes[i]),
                );
                d.weights[k] * diff / r.len() as f64
            })),
        }
    }
}

impl From<SamplingDesign> for Design {
    fn from(d: SamplingDesign) -> Self {
        Design::Sampling(d)
    }
}

impl From<ExperimentDesign> for Design {
    fn from(d: ExperimentDesign) -> Self {
        Design::Experiment(d)
    }
}

/// Matrix whose statistic has the law of the design's estimator. Column
/// `j < n_k1` of block `k` stands for "selected".
pub fn build_design_matrix(d: &Design) -> StratifiedMatrix {
    let layout = d.layout().clone();
    let offsets: Vec<usize> = (0..layout.num_strata()).map(|k| layout.offset(k)).collect();
    match d {
        Design::Sampling(s) => StratifiedMatrix::from_fn(layout, |k, i, j| {
            let n1 = s.sample_sizes[k];
            if j < n1 {
                s.weights[k] * s.outcomes[offsets[k] + i] / n1 as f64
            } else {
                0.0
            }
        }),
        Design::Experiment(e) => StratifiedMatrix::from_fn(layout.clone(), |k, i, j| {
            let n1 = e.treated_counts[k];
            let n0 = layout.size(k) - n1;
            if j < n1 {
                e.weights[k] * e.treated_outcomes[offsets[k] + i] / n1 as f64
            } else {
                -e.weights[k] * e.control_outcomes[offsets[k] + i] / n0 as f64
            }
        }),
    }
    .expect("design invariants give a valid matrix")
}

/// Closed-form variance of the estimator for arbitrary positive weights.
pub fn design_variance(d: &Design) -> f64 {
    let layout = d.layout();
    match d {
        Design::Sampling(s) => ksum((0..layout.num_strata()).map(|k| {
            let nk = layout.size(k);
            let n1 = s.sample_sizes[k];
            let s2 = stratum_variance(&s.outcomes[layout.range(k)]);
            s.weights[k].powi(2) * (nk - n1) as f64 / (n1 * nk) as f64 * s2
        })),
        Design::Experiment(e) => ksum((0..layout.num_strata()).map(|k| {
            let nk = layout.size(k);
            let r = layout.range(k);
            let p = e.treated_counts[k] as f64 / nk as f64;
            let s1 = stratum_variance(&e.treated_outcomes[r.clone()]);
            let s0 = stratum_variance(&e.control_outcomes[r.clone()]);
            let tau: Vec<f64> = r
                .map(|i| e.treated_outcomes[i] - e.control_outcomes[i])
                .collect();
            let st = stratum_variance(&tau);
            e.weights[k].powi(2) / nk as f64 * (s1 / p + s0 / (1.0 - p) - st)
        })),
    }
}

/// Plug-in estimate from a selection indicator in unit order.
pub fn estimate(d: &Design, selected: &[bool]) -> Result<f64> {
    let layout = d.layout();
    if selected.len() != layout.n() {
        return Err(Error::InvalidInput(format!(
            "realization has {} entries for {} units",
            selected.len(),
            layout.n()
        )));
    }
    let counts = d.selected_counts();
    for k in 0..layout.num_strata() {
        let found = selected[layout.range(k)].iter().filter(|&&s| s).count();
        if found != counts[k] {
            return Err(Error::CountMismatch {
                stratum: k,
                expected: counts[k],
                found,
            });
        }
    }
    Ok(estimate_unchecked(d, selected))
}

fn estimate_unchecked(d: &Design, selected: &[bool]) -> f64 {
    let layout = d.layout();
    match d {
        Design::Sampling(s) => ksum((0..layout.num_strata()).map(|k| {
            let r = layout.range(k);
            let total = ksum(r.filter(|&i| selected[i]).map(|i| s.outcomes[i]));
            s.weights[k] * total / s.sample_sizes[k] as f64
        })),
        Design::Experiment(e) => ksum((0..layout.num_strata()).map(|k| {
            let r = layout.range(k);
            let n1 = e.treated_counts[k] as f64;
            let n0 = r.len() as f64 - n1;
            let t = ksum(
                r.clone()
                    .filter(|&i| selected[i])
                    .map(|i| e.treated_outcomes[i]),
            );
            let c = ksum(r.filter(|&i| !selected[i]).map(|i| e.control_outcomes[i]));
            e.weights[k] * (t / n1 - c / n0)
        })),
    }
}

/// Exact law of the estimator over every realization of the design.
pub fn enumerate_estimates(d: &Design, budget: u128) -> Result<ExactDistribution> {
    let layout = d.layout();
    let counts = d.selected_counts();
    let needed = (0..layout.num_strata()).fold(1u128, |acc, k| {
        acc.saturating_mul(binomial(layout.size(k), counts[k]))
    });
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let mut combos: Vec<Vec<usize>> = counts.iter().map(|&c| (0..c).collect()).collect();
    let mut values = Vec::new();
    let mut selected = vec![false; layout.n()];
    loop {
        selected.iter_mut().for_each(|s| *s = false);
        for (k, c) in combos.iter().enumerate() {
            for &i in c {
                selected[layout.offset(k) + i] = true;
            }
        }
        values.push((estimate_unchecked(d, &selected), 1));
        let mut k = 0;
        loop {
            if k == combos.len() {
                return Ok(ExactDistribution::from_values(values));
            }
            if next_combination(&mut combos[k], layout.size(k)) {
                break;
            }
            combos[k] = (0..counts[k]).collect();
            k += 1;
        }
    }
}

fn design_rate_quantity(d: &Design, sigma3: f64) -> f64 {
    let layout = d.layout();
    let total = match d {
        Design::Sampling(s) => ksum((0..layout.num_strata()).map(|k| {
            let n1 = s.sample_sizes[k] as f64;
            s.weights[k].powi(3) * finite_pop_moment(&s.outcomes[layout.range(k)], 3) / (n1 * n1)
        })),
        Design::Experiment(e) => ksum((0..layout.num_strata()).map(|k| {
            let r = layout.range(k);
            let n1 = e.treated_counts[k] as f64;
            let n0 = r.len() as f64 - n1;
            let m1 = finite_pop_moment(&e.treated_outcomes[r.clone()], 3);
            let m0 = finite_pop_moment(&e.control_outcomes[r], 3);
            e.weights[k].powi(3) * (m1 / (n1 * n1) + m0 / (n0 * n0))
        })),
    };
    total / sigma3
}

/// Design-level rate quantity, with regime from the compiled matrix.
pub fn rate_design(d: &Design) -> Result<BoundReport> {
    let variance = design_variance(d);
    let matrix = build_design_matrix(d);
    if is_degenerate_variance(variance, &matrix) {
        return Err(Error::DegenerateVariance);
    }
    let q = design_rate_quantity(d, variance.powf(1.5));
    let th = theta(&matrix)?;
    let method = match d.kind() {
        DesignKind::Sampling => "design_sampling",
        DesignKind::Experiment => "design_experiment",
    };
    Ok(BoundReport::raw(
        method,
        q,
        regime_for(matrix.layout(), th),
        th,
    ))
}

/// Outcomes of a population subject to post-stratification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Population {
    Sampling { y: Vec<f64> },
    Experiment { y1: Vec<f64>, y0: Vec<f64> },
}

impl Population {
    pub fn kind(&self) -> DesignKind {
        match self {
            Population::Sampling { .. } => DesignKind::Sampling,
            Population::Experiment { .. } => DesignKind::Experiment,
        }
    }

    fn len(&self) -> usize {
        match self {
            Population::Sampling { y } => y.len(),
            Population::Experiment { y1, .. } => y1.len(),
        }
    }
}

/// Post-stratification setup: covariate levels `0..K`, the global number
/// of sampled (or treated) units, and the base design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostStratSpec {
    pub covariate: Vec<usize>,
    pub n1: usize,
    pub kind: DesignKind,
}

/// Default cap on global draws in [`simulate_post_stratified`].
pub const DEFAULT_RETRY_CAP: usize = 1_000_000;

/// Population regrouped so that strata are contiguous.
struct Grouped {
    layout: StratumLayout,
    population: Population,
    n1: usize,
    kind: DesignKind,
}

impl Grouped {
    fn new(spec: &PostStratSpec, population: &Population) -> Result<Self> {
        let n = spec.covariate.len();
        if population.len() != n {
            return Err(Error::InvalidInput(format!(
                "covariate has {n} units, outcomes have {}",
                population.len()
            )));
        }
        if population.kind() != spec.kind {
            return Err(Error::InvalidInput(
                "outcome columns do not match design kind".into(),
            ));
        }
        if spec.n1 > n {
            return Err(Error::InvalidInput(format!(
                "n1 = {} exceeds n = {n}",
                spec.n1
            )));
        }
        let k = spec.covariate.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; k];
        for &x in &spec.covariate {
            sizes[x] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!(
                "covariate level {empty} has no units"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| spec.covariate[i]);
        let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let population = match population {
            Population::Sampling { y } => Population::Sampling { y: pick(y) },
            Population::Experiment { y1, y0 } => Population::Experiment {
                y1: pick(y1),
                y0: pick(y0),
            },
        };
        Ok(Self {
            layout: StratumLayout::new(sizes)?,
            population,
            n1: spec.n1,
            kind: spec.kind,
        })
    }

    fn in_event(&self, u: &[usize]) -> bool {
        u.iter().enumerate().all(|(k, &c)| match self.kind {
            DesignKind::Sampling => c >= 1,
            DesignKind::Experiment => c >= 1 && c < self.layout.size(k),
        })
    }

    fn feasible(&self) -> bool {
        let kk = self.layout.num_strata();
        match self.kind {
            DesignKind::Sampling => self.n1 >= kk,
            DesignKind::Experiment => {
                self.layout.min_size() >= 2 && self.n1 >= kk && self.layout.n() - self.n1 >= kk
            }
        }
    }

    /// Stratified design with selected counts `u` and weights `n_k / n`.
    fn conditional_design(&self, u: &[usize]) -> Design {
        match &self.population {
            Population::Sampling { y } => {
                SamplingDesign::new(self.layout.clone(), y.clone(), u.to_vec(), None)
                    .map(Design::from)
            }
            Population::Experiment { y1, y0 } => ExperimentDesign::new(
                self.layout.clone(),
                y1.clone(),
                y0.clone(),
                u.to_vec(),
                None,
            )
            .map(Design::from),
        }
        .expect("counts inside the conditioning event form a valid design")
    }

    fn counts(&self, selected: &[bool]) -> Vec<usize> {
        (0..self.layout.num_strata())
            .map(|k| {
                selected[self.layout.range(k)]
                    .iter()
                    .filter(|&&s| s)
                    .count()
            })
            .collect()
    }
}

/// Mixture-normal discrepancy `sup_t |E Phi(sigma t / sigma(U)) - Phi(t)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureDiscrepancy {
    pub value: f64,
    pub argmax: f64,
}

pub const MIXTURE_GRID_POINTS: usize = 2001;
pub const MIXTURE_GRID_LIMIT: f64 = 8.0;

/// Sup over `t` of `|sum_u p_u Phi(sigma t / sigma_u) - Phi(t)|` on a grid
/// with golden-section refinement around the grid maximum.
pub fn mixture_discrepancy(components: &[(f64, f64)], sigma: f64) -> MixtureDiscrepancy {
    let gap = |t: f64| -> f64 {
        let mix = ksum(components.iter().map(|&(p, s)| {
            let cdf = if s > 0.0 {
                std_normal_cdf(sigma * t / s)
            } else if t > 0.0 {
                1.0
            } else if t < 0.0 {
                0.0
            } else {
                0.5
            };
            p * cdf
        }));
        (mix - std_normal_cdf(t)).abs()
    };
    let h = 2.0 * MIXTURE_GRID_LIMIT / (MIXTURE_GRID_POINTS - 1) as f64;
    let (mut best_t, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 0..MIXTURE_GRID_POINTS {
        let t = -MIXTURE_GRID_LIMIT + i as f64 * h;
        let g = gap(t);
        if g > best {
            best = g;
            best_t = t;
        }
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best_t - h, best_t + h);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut g1, mut g2) = (gap(x1), gap(x2));
    for _ in 0..60 {
        if g1 > g2 {
            hi = x2;
            x2 = x1;
            g2 = g1;
            x1 = hi - inv_phi * (hi - lo);
            g1 = gap(x1);
        } else {
            lo = x1;
            x1 = x2;
            g1 = g2;
            x2 = lo + inv_phi * (hi - lo);
            g2 = gap(x2);
        }
    }
    let t = 0.5 * (lo + hi);
    let g = gap(t);
    if g > best {
        MixtureDiscrepancy {
            value: g,
            argmax: t,
        }
    } else {
        MixtureDiscrepancy {
            value: best,
            argmax: best_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostStratReport {
    pub kind: DesignKind,
    pub strata_sizes: Vec<usize>,
    pub n1: usize,
    pub reps: usize,
    pub attempts: usize,
    pub acceptance_rate: f64,
    /// Weighted target `gamma` or `tau` with weights `n_k / n`.
    pub target: f64,
    pub estimate_mean: f64,
    pub estimate_variance: f64,
    /// Monte Carlo mean of `sigma_ps^2(U)` over accepted draws.
    pub sigma2_ps: f64,
    /// Sampling: `E[n_k1^-2 sigma_ps(U)^-3]`. Experiment: `E[n_k1^-2]`.
    pub stratum_plugins: Vec<f64>,
    /// Experiment only: `E[n_k0^-2]`.
    pub stratum_plugins_control: Option<Vec<f64>>,
    /// First-term rate quantity assembled from the plug-ins.
    pub first_term_rate: f64,
    /// Minimum of theta over the distinct `U` seen; `None` if undefined for any.
    pub theta: Option<f64>,
    pub regime: Regime,
    pub mixture_discrepancy: MixtureDiscrepancy,
    /// Whether `p = n1 / n` satisfies the heterogeneity condition for the post-stratified rate.
    pub regularity_condition: bool,
    /// Accepted draws per `U`, keyed by comma-joined counts.
    pub u_histogram: BTreeMap<String, usize>,
}

struct UStats {
    variance: f64,
    theta: Option<f64>,
}

/// Rejection-samples the global design until every stratum is represented
/// (sampling) or has both arms (experiment), `reps` times.
pub fn simulate_post_stratified(
    spec: &PostStratSpec,
    population: &Population,
    reps: usize,
    seed: u64,
    retry_cap: usize,
) -> Result<PostStratReport> {
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let g = Grouped::new(spec, population)?;
    if !g.feasible() {
        return Err(Error::EventUnreachable { draws: 0 });
    }
    let n = g.layout.n();
    // Accepted draws are collected round by round; chunk c of the attempt
    // stream always uses substream c, independent of scheduling.
    const CHUNKS_PER_ROUND: usize = 8;
    let mut accepted: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut attempts = 0usize;
    let mut round = 0u64;
    while accepted.len() < reps && attempts < retry_cap {
        let round_attempts = (CHUNKS_PER_ROUND * CHUNK).min(retry_cap - attempts);
        let round_seed = spec_seed(seed, round);
        let chunks = parallel_chunks(round_attempts, round_seed, |rng, count| {
            let mut units: Vec<usize> = (0..n).collect();
            let mut selected = vec![false; n];
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                for t in 0..g.n1 {
                    let j = t + rng.index(n - t);
                    units.swap(t, j);
                }
                selected.iter_mut().for_each(|s| *s = false);
                for &i in &units[..g.n1] {
                    selected[i] = true;
                }
                let u = g.counts(&selected);
                if g.in_event(&u) {
                    let value = estimate_unchecked(&g.conditional_design(&u), &selected);
                    out.push(Some((u, value)));
                } else {
                    out.push(None);
                }
            }
            out
        });
        for outcome in chunks.into_iter().flatten() {
            if accepted.len() == reps {
                break;
            }
            attempts += 1;
            if let Some(hit) = outcome {
                accepted.push(hit);
            }
        }
        round += 1;
    }
    if accepted.is_empty() {
        return Err(Error::EventUnreachable { draws: attempts });
    }

    let kk = g.layout.num_strata();
    let mut stats: BTreeMap<Vec<usize>, UStats> = BTreeMap::new();
    let mut histogram: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for (u, _) in &accepted {
        *histogram.entry(u.clone()).or_default() += 1;
        if !stats.contains_key(u) {
            let d = g.conditional_design(u);
            let variance = design_variance(&d);
            let th = theta(&build_design_matrix(&d))?;
            stats.insert(
                u.clone(),
                UStats {
                    variance,
                    theta: th,
                },
            );
        }
    }
    let m = accepted.len() as f64;
    let mean_over = |f: &dyn Fn(&[usize]) -> f64| -> f64 {
        ksum(histogram.iter().map(|(u, &c)| c as f64 * f(u))) / m
    };
    let sigma2_ps = mean_over(&|u| stats[u].variance);
    let estimate_mean = ksum(accepted.iter().map(|a| a.1)) / m;
    let estimate_variance = if accepted.len() > 1 {
        ksum(accepted.iter().map(|a| (a.1 - estimate_mean).powi(2))) / (m - 1.0)
    } else {
        0.0
    };
    let grouped_design = g.conditional_design(&vec![1; kk]);
    let target = grouped_design.target();
    let weights = default_weights(&g.layout);

    let (stratum_plugins, stratum_plugins_control, first_term_rate, regularity_condition) =
        match &g.population {
            Population::Sampling { y } => {
                let plugins: Vec<f64> = (0..kk)
                    .map(|k| mean_over(&|u| (u[k] as f64).powi(-2) * stats[u].variance.powf(-1.5)))
                    .collect();
                let rate = ksum((0..kk).map(|k| {
                    weights[k].powi(3) * plugins[k] * finite_pop_moment(&y[g.layout.range(k)], 3)
                }));
                let sds: Vec<f64> = (0..kk)
                    .map(|k| stratum_variance(&y[g.layout.range(k)]).sqrt())
                    .collect();
                let ratio = min_over_max(&sds);
                let p = g.n1 as f64 / n as f64;
                (plugins, None, rate, p > 0.0 && p < ratio)
            }
            Population::Experiment { y1, y0 } => {
                let treated: Vec<f64> = (0..kk)
                    .map(|k| mean_over(&|u| (u[k] as f64).powi(-2)))
                    .collect();
                let control: Vec<f64> = (0..kk)
                    .map(|k| mean_over(&|u| ((g.layout.size(k) - u[k]) as f64).powi(-2)))
                    .collect();
                let rate = ksum((0..kk).map(|k| {
                    let r = g.layout.range(k);
                    weights[k].powi(3)
                        * (treated[k] * finite_pop_moment(&y1[r.clone()], 3)
                            + control[k] * finite_pop_moment(&y0[r], 3))
                })) / sigma2_ps.powf(1.5);
                let s1: Vec<f64> = (0..kk)
                    .map(|k| stratum_variance(&y1[g.layout.range(k)]))
                    .collect();
                let s0: Vec<f64> = (0..kk)
                    .map(|k| stratum_variance(&y0[g.layout.range(k)]))
                    .collect();
                let st: Vec<f64> = (0..kk)
                    .map(|k| {
                        let tau: Vec<f64> = g.layout.range(k).map(|i| y1[i] - y0[i]).collect();
                        stratum_variance(&tau)
                    })
                    .collect();
                let wsum = |v: &[f64]| ksum(v.iter().zip(&weights).map(|(a, w)| a * w));
                let sd1: Vec<f64> = s1.iter().map(|v| v.sqrt()).collect();
                let sd0: Vec<f64> = s0.iter().map(|v| v.sqrt()).collect();
                let p = g.n1 as f64 / n as f64;
                let lhs =
                    min_over_max(&sd1) * wsum(&s1) / p + min_over_max(&sd0) * wsum(&s0) / (1.0 - p);
                (treated, Some(control), rate, lhs > wsum(&st))
            }
        };

    let thetas: Vec<Option<f64>> = histogram.keys().map(|u| stats[u].theta).collect();
    let theta_min = thetas
        .iter()
        .try_fold(f64::INFINITY, |acc, t| t.map(|v| acc.min(v)));
    let sigma = sigma2_ps.sqrt();
    let components: Vec<(f64, f64)> = histogram
        .iter()
        .map(|(u, &c)| (c as f64 / m, stats[u].variance.sqrt()))
        .collect();
    Ok(PostStratReport {
        kind: g.kind,
        strata_sizes: g.layout.sizes().to_vec(),
        n1: g.n1,
        reps: accepted.len(),
        attempts,
        acceptance_rate: accepted.len() as f64 / attempts as f64,
        target,
        estimate_mean,
        estimate_variance,
        sigma2_ps,
        stratum_plugins,
        stratum_plugins_control,
        first_term_rate,
        theta: theta_min,
        regime: regime_for(&g.layout, theta_min),
        mixture_discrepancy: mixture_discrepancy(&components, sigma),
        regularity_condition,
        u_histogram: histogram
            .iter()
            .map(|(u, &c)| {
                let key = u
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                (key, c)
            })
            .collect(),
    })
}

fn spec_seed(seed: u64, round: u64) -> u64 {
    // Rounds reuse the chunk numbering, so each round gets its own seed.
    seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn min_over_max(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    v.iter().cloned().fold(f64::INFINITY, f64::min) / max
}

fn for_each_count_vector(sizes: &[usize], total: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(sizes: &[usize], left: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == sizes.len() {
            if left == 0 {
                f(cur);
            }
            return;
        }
        let k = cur.len();
        for c in 0..=sizes[k].min(left) {
            cur.push(c);
            rec(sizes, left - c, cur, f);
            cur.pop();
        }
    }
    rec(sizes, total, &mut Vec::new(), f);
}

/// Exact probability of the conditioning event under the global design.
pub fn event_probability_exact(sizes: &[usize], n1: usize, kind: DesignKind) -> f64 {
    let n: usize = sizes.iter().sum();
    let mut hits: u128 = 0;
    for_each_count_vector(sizes, n1, &mut |u| {
        let ok = u.iter().zip(sizes).all(|(&c, &s)| match kind {
            DesignKind::Sampling => c >= 1,
            DesignKind::Experiment => c >= 1 && c < s,
        });
        if ok {
            hits += u
                .iter()
                .zip(sizes)
                .map(|(&c, &s)| binomial(s, c))
                .product::<u128>();
        }
    });
    hits as f64 / binomial(n, n1) as f64
}

/// Exact conditional law of the post-stratified estimator given `U`, next
/// to the permutation law of the stratified design with those counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSlice {
    pub u: Vec<usize>,
    pub estimator_law: ExactDistribution,
    pub design_law: ExactDistribution,
    pub matches: bool,
}

/// Enumerates every global draw, groups the estimator by `U`, and pairs
/// each slice with the enumerated law of the matching stratified design.
pub fn conditional_slices_exact(
    spec: &PostStratSpec,
    population: &Population,
    budget: u128,
) -> Result<Vec<ConditionalSlice>> {
    let g = Grouped::new(spec, population)?;
    let n = g.layout.n();
    let needed = binomial(n, g.n1);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let mut by_u: BTreeMap<Vec<usize>, Vec<(f64, u128)>> = BTreeMap::new();
    let mut combo: Vec<usize> = (0..g.n1).collect();
    let mut selected = vec![false; n];
    loop {
        selected.iter_mut().for_each(|s| *s = false);
        for &i in &combo {
            selected[i] = true;
        }
        let u = g.counts(&selected);
        if g.in_event(&u) {
            let value = estimate_unchecked(&g.conditional_design(&u), &selected);
            by_u.entry(u).or_default().push((value, 1));
        }
        if !next_combination(&mut combo, n) {
            break;
        }
    }
    by_u.into_iter()
        .map(|(u, values)| {
            let estimator_law = ExactDistribution::from_values(values);
            let design_law =
                enumerate_distribution(&build_design_matrix(&g.conditional_design(&u)), budget)?;
            let matches = same_law(&estimator_law, &design_law);
            Ok(ConditionalSlice {
                u,
                estimator_law,
                design_law,
                matches,
            })
        })
        .collect()
}

/// Atom-by-atom equality of two laws: values within the atom tolerance and
/// identical probabilities as exact fractions.
pub fn same_law(a: &ExactDistribution, b: &ExactDistribution) -> bool {
    a.atoms.len() == b.atoms.len()
        && a.atoms.iter().zip(&b.atoms).all(|(x, y)| {
            (x.value - y.value).abs() <= ATOM_TOLERANCE * x.value.abs().max(1.0)
                && x.count * b.total == y.count * a.total
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{rate, RateMethod};
    use crate::moments::moments;
    use crate::oracle::DEFAULT_BUDGET;
    use approx::assert_abs_diff_eq;

    fn toy_sampling() -> Design {
        let layout = StratumLayout::new(vec![4]).unwrap();
        SamplingDesign::new(layout, vec![1.0, 2.0, 3.0, 4.0], vec![2], Some(vec![1.0]))
            .unwrap()
            .into()
    }

    #[test]
    fn sampling_matrix_shape() {
        let a = build_design_matrix(&toy_sampling());
        assert_eq!(
            a.block_rows(0),
            vec![
                vec![0.5, 0.5, 0.0, 0.0],
                vec![1.0, 1.0, 0.0, 0.0],
                vec![1.5, 1.5, 0.0, 0.0],
                vec![2.0, 2.0, 0.0, 0.0]
            ]
        );
    }

    #[test]
    fn experiment_matrix_shape() {
        let layout = StratumLayout::new(vec![2]).unwrap();
        let d: Design = ExperimentDesign::new(
            layout,
            vec![3.0, 5.0],
            vec![7.0, 11.0],
            vec![1],
            Some(vec![1.0]),
        )
        .unwrap()
        .into();
        assert_eq!(
            build_design_matrix(&d).block_rows(0),
            vec![vec![3.0, -7.0], vec![5.0, -11.0]]
        );
        assert_eq!(estimate(&d, &[true, false]).unwrap(), 3.0 - 11.0);
    }

    #[test]
    fn toy_sampling_law_and_variance() {
        let d = toy_sampling();
        let law = enumerate_distribution(&build_design_matrix(&d), DEFAULT_BUDGET).unwrap();
        let expect: Vec<(f64, f64)> = vec![
            (1.5, 1.0 / 6.0),
            (2.0, 1.0 / 6.0),
            (2.5, 1.0 / 3.0),
            (3.0, 1.0 / 6.0),
            (3.5, 1.0 / 6.0),
        ];
        for ((x, p), (y, q)) in law.probabilities().iter().zip(&expect) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(design_variance(&d), 5.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(law.variance(), 5.0 / 12.0, epsilon = 1e-12);
        assert!(same_law(
            &law,
            &enumerate_estimates(&d, DEFAULT_BUDGET).unwrap()
        ));
    }

    #[test]
    fn toy_rate() {
        let d = toy_sampling();
        let r = rate_design(&d).unwrap();
        let expect = (5.0f64 / 12.0).powf(-1.5) * 0.25 * 1.75;
        assert_abs_diff_eq!(r.rate_quantity, expect, epsilon = 1e-12);
        let col = rate(&build_design_matrix(&d), RateMethod::Columnwise).unwrap();
        assert_abs_diff_eq!(r.rate_quantity, col.rate_quantity, epsilon = 1e-12);
    }

    #[test]
    fn estimates() {
        let d = toy_sampling();
        assert_eq!(estimate(&d, &[true, true, false, false]).unwrap(), 1.5);
        assert_eq!(
            estimate(&d, &[true, false, false, false]),
            Err(Error::CountMismatch {
                stratum: 0,
                expected: 2,
                found: 1
            })
        );
        let layout = StratumLayout::new(vec![4]).unwrap();
        let full: Design = SamplingDesign::new(layout, vec![1.0, 2.0, 3.0, 4.0], vec![4], None)
            .unwrap()
            .into();
        assert_eq!(estimate(&full, &[true; 4]).unwrap(), full.target());
        assert_eq!(design_variance(&full), 0.0);
    }

    #[test]
    fn constant_outcomes() {
        let layout = StratumLayout::new(vec![3, 3]).unwrap();
        let d: Design = SamplingDesign::new(layout, vec![0.1; 6], vec![1, 2], None)
            .unwrap()
            .into();
        assert_eq!(rate_design(&d), Err(Error::DegenerateVariance));
    }

    #[test]
    fn constant_effect_experiment() {
        let layout = StratumLayout::new(vec![3, 4]).unwrap();
        let y0 = vec![0.3, -1.2, 2.0, 0.7, 1.1, -0.4, 0.9];
        let y1: Vec<f64> = y0.iter().map(|y| y + 2.5).collect();
        let d: Design = ExperimentDesign::new(layout, y1, y0, vec![1, 2], None)
            .unwrap()
            .into();
        let m = moments(&build_design_matrix(&d));
        assert_abs_diff_eq!(design_variance(&d), m.variance, epsilon = 1e-12);
        let law = enumerate_estimates(&d, DEFAULT_BUDGET).unwrap();
        assert_abs_diff_eq!(law.mean(), d.target(), epsilon = 1e-12);
    }

    #[test]
    fn rate_scale_invariance() {
        let layout = StratumLayout::new(vec![3, 4]).unwrap();
        let y = vec![0.3, -1.2, 2.0, 0.7, 1.1, -0.4, 0.9];
        let d: Design = SamplingDesign::new(layout.clone(), y.clone(), vec![2, 3], None)
            .unwrap()
            .into();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v + 1.0).collect();
        let d2: Design = SamplingDesign::new(layout, y2, vec![2, 3], None)
            .unwrap()
            .into();
        assert_abs_diff_eq!(
            rate_design(&d).unwrap().rate_quantity,
            rate_design(&d2).unwrap().rate_quantity,
            epsilon = 1e-12
        );
    }

    #[test]
    fn event_probabilities() {
        assert_abs_diff_eq!(
            event_probability_exact(&[2, 1], 2, DesignKind::Sampling),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(
            event_probability_exact(&[2, 1], 1, DesignKind::Sampling),
            0.0
        );
    }

    #[test]
    fn unreachable_event() {
        let spec = PostStratSpec {
            covariate: vec![0, 0, 1],
            n1: 1,
            kind: DesignKind::Sampling,
        };
        let pop = Population::Sampling {
            y: vec![1.0, 2.0, 3.0],
        };
        assert!(matches!(
            simulate_post_stratified(&spec, &pop, 10, 1, DEFAULT_RETRY_CAP),
            Err(Error::EventUnreachable { .. })
        ));
    }

    #[test]
    fn acceptance_two_thirds() {
        let spec = PostStratSpec {
            covariate: vec![0, 1, 0],
            n1: 2,
            kind: DesignKind::Sampling,
        };
        let pop = Population::Sampling {
            y: vec![1.0, 5.0, 2.0],
        };
        let r = simulate_post_stratified(&spec, &pop, 20_000, 3, DEFAULT_RETRY_CAP).unwrap();
        let p = 2.0 / 3.0;
        let sd = (p * (1.0 - p) / r.attempts as f64).sqrt();
        assert!(
            (r.acceptance_rate - p).abs() < 3.0 * sd,
            "{}",
            r.acceptance_rate
        );
        assert_eq!(r.reps, 20_000);
    }

    #[test]
    fn slices_match_stratified_laws() {
        let spec = PostStratSpec {
            covariate: vec![0, 1, 1, 0, 1, 0],
            n1: 3,
            kind: DesignKind::Sampling,
        };
        let pop = Population::Sampling {
            y: vec![0.4, 1.9, -0.3, 2.2, 0.8, 1.1],
        };
        let slices = conditional_slices_exact(&spec, &pop, DEFAULT_BUDGET).unwrap();
        assert!(!slices.is_empty());
        assert!(slices.iter().all(|s| s.matches));
    }

    #[test]
    fn mixture_of_identical_components_is_zero() {
        let d = mixture_discrepancy(&[(0.5, 2.0), (0.5, 2.0)], 2.0);
        assert!(d.value < 1e-15);
        let e = mixture_discrepancy(&[(0.5, 1.0), (0.5, 3.0)], 5f64.sqrt());
        assert!(e.value > 0.0);
    }
}

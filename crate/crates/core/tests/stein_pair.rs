mod common;

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use stratperm::oracle::{all_pass, for_each_permutation, verify_stein_pair, DEFAULT_BUDGET};
use stratperm::sampling::{sample_permutation, stein_pair_draw, StratifiedPermutation};
use stratperm::{moments, transform, RandomSource, StratifiedMatrix, StratumLayout, TransformMode};

#[test]
fn identities_on_random_instances() {
    let mut rng = RandomSource::new(201);
    for _ in 0..60 {
        let layout = loop {
            let l = common::random_layout(&mut rng, 3, 1, 4);
            if l.degrees_of_freedom() > 0 {
                break l;
            }
        };
        let a = common::normal_matrix(&layout, &mut rng);
        let reports = verify_stein_pair(&a, DEFAULT_BUDGET).unwrap();
        assert!(all_pass(&reports), "{reports:?}");
    }
}

#[test]
fn single_stratum_of_three_linearity() {
    let mut rng = RandomSource::new(202);
    let layout = StratumLayout::new(vec![3]).unwrap();
    let a = transform(
        &common::normal_matrix(&layout, &mut rng),
        TransformMode::Center,
    )
    .unwrap();
    let reports = verify_stein_pair(&a, DEFAULT_BUDGET).unwrap();
    assert!(reports[0].max_violation < 1e-12);
}

#[test]
fn two_blocks_difference_variance() {
    let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let a = StratifiedMatrix::from_rows(vec![b.clone(), b]).unwrap();
    assert_eq!(moments(&a).variance, 2.0);
    let reports = verify_stein_pair(&a, DEFAULT_BUDGET).unwrap();
    assert!(reports[1].max_violation < 1e-12);
}

/// Sampled pairs average to the exact conditional expectation.
#[test]
fn sampled_pairs_regress_linearly() {
    let mut rng = RandomSource::new(203);
    let layout = StratumLayout::new(vec![3, 4]).unwrap();
    let a = transform(
        &common::normal_matrix(&layout, &mut rng),
        TransformMode::Center,
    )
    .unwrap();
    let pi = sample_permutation(&layout, &mut rng);
    let w = a.statistic(pi.images());
    let m = 200_000;
    let draws: Vec<f64> = (0..m)
        .map(|_| stein_pair_draw(&a, &pi, &mut rng).unwrap().w_double_prime)
        .collect();
    let mean = draws.iter().sum::<f64>() / m as f64;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    let expect = (1.0 - 2.0 / 5.0) * w;
    assert!((mean - expect).abs() < 5.0 * sd / (m as f64).sqrt());
}

/// Bowker symmetry test of the sampled joint law of `(W, W'')`.
#[test]
fn sampled_pairs_are_exchangeable() {
    let layout = StratumLayout::new(vec![3, 3]).unwrap();
    let a =
        StratifiedMatrix::from_fn(layout.clone(), |k, i, j| ((i * 2 + j + k) % 3) as f64).unwrap();
    let mut values = Vec::new();
    for_each_permutation(&layout, |p| values.push(a.statistic(p)));
    values.sort_by(f64::total_cmp);
    values.dedup();
    let index = |x: f64| values.iter().position(|&v| v == x).unwrap();

    let mut rng = RandomSource::new(204);
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for _ in 0..100_000 {
        let pi: StratifiedPermutation = sample_permutation(&layout, &mut rng);
        let d = stein_pair_draw(&a, &pi, &mut rng).unwrap();
        *table
            .entry((index(d.w), index(d.w_double_prime)))
            .or_default() += 1;
    }
    let mut stat = 0.0;
    let mut df = 0;
    for x in 0..values.len() {
        for y in x + 1..values.len() {
            let nxy = *table.get(&(x, y)).unwrap_or(&0) as f64;
            let nyx = *table.get(&(y, x)).unwrap_or(&0) as f64;
            if nxy + nyx > 0.0 {
                stat += (nxy - nyx).powi(2) / (nxy + nyx);
                df += 1;
            }
        }
    }
    assert!(df > 0);
    let p = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "Bowker p = {p}");
}

#[test]
fn permutations_preserve_strata_and_replay() {
    let layout = StratumLayout::new(vec![4, 1, 6, 2]).unwrap();
    let draw = |seed| {
        let mut rng = RandomSource::new(seed);
        (0..200)
            .map(|_| sample_permutation(&layout, &mut rng))
            .collect::<Vec<_>>()
    };
    let a = draw(5);
    assert!(a.iter().all(|p| p.is_valid()));
    assert_eq!(a, draw(5));
}

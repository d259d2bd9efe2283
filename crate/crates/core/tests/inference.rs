mod common;

use stratperm::inference::{
    iv_confidence_interval, iv_test, permutation_test, Alternative, TestMethod,
};
use stratperm::numeric::next_combination;
use stratperm::{RandomSource, StratumLayout};

/// Every assignment with the given per-stratum treated counts.
fn all_assignments(layout: &StratumLayout, treated: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut combos: Vec<Vec<usize>> = treated.iter().map(|&t| (0..t).collect()).collect();
    loop {
        let mut z = vec![0.0; layout.n()];
        for (k, c) in combos.iter().enumerate() {
            for &i in c {
                z[layout.offset(k) + i] = 1.0;
            }
        }
        out.push(z);
        let mut k = 0;
        loop {
            if k == combos.len() {
                return out;
            }
            if next_combination(&mut combos[k], layout.size(k)) {
                break;
            }
            combos[k] = (0..treated[k]).collect();
            k += 1;
        }
    }
}

#[test]
fn exact_p_values_are_super_uniform() {
    let mut rng = RandomSource::new(601);
    for _ in 0..25 {
        let layout = common::random_layout(&mut rng, 3, 2, 4);
        let treated: Vec<usize> = layout
            .sizes()
            .iter()
            .map(|&s| 1 + rng.index(s - 1))
            .collect();
        let r = common::normal_vec(layout.n(), &mut rng);
        let assignments = all_assignments(&layout, &treated);
        for alt in [
            Alternative::Greater,
            Alternative::Less,
            Alternative::TwoSided,
        ] {
            let ps: Vec<f64> = assignments
                .iter()
                .map(|z| {
                    permutation_test(z, &r, &layout, alt, TestMethod::Exact, 0, 0)
                        .unwrap()
                        .p_value
                })
                .collect();
            for alpha in [0.01, 0.05, 0.1, 0.2, 0.5] {
                let rejected = ps.iter().filter(|&&p| p <= alpha).count() as f64 / ps.len() as f64;
                assert!(rejected <= alpha + 1e-12, "{rejected} > {alpha}");
            }
        }
    }
}

#[test]
fn monte_carlo_p_values_are_valid() {
    let layout = StratumLayout::new(vec![4, 5, 3]).unwrap();
    let mut rng = RandomSource::new(602);
    let r = common::normal_vec(layout.n(), &mut rng);
    let base = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let nulls = 10_000;
    let mut ps = Vec::with_capacity(nulls);
    for rep in 0..nulls {
        let perm = stratperm::sampling::sample_permutation(&layout, &mut rng);
        let z: Vec<f64> = perm.images().iter().map(|&j| base[j]).collect();
        let t = permutation_test(
            &z,
            &r,
            &layout,
            Alternative::Greater,
            TestMethod::MonteCarlo,
            99,
            rep as u64,
        )
        .unwrap();
        ps.push(t.p_value);
    }
    for alpha in [0.01, 0.05, 0.1] {
        let rate = ps.iter().filter(|&&p| p <= alpha).count() as f64 / nulls as f64;
        let sd = (alpha * (1.0 - alpha) / nulls as f64).sqrt();
        assert!(rate <= alpha + 3.0 * sd, "alpha {alpha}: {rate}");
    }
}

#[test]
fn shift_invariance_and_two_sided() {
    let mut rng = RandomSource::new(603);
    for _ in 0..20 {
        let layout = common::random_layout(&mut rng, 3, 2, 5);
        let treated: Vec<usize> = layout
            .sizes()
            .iter()
            .map(|&s| 1 + rng.index(s - 1))
            .collect();
        let z = all_assignments(&layout, &treated).swap_remove(0);
        let r = common::normal_vec(layout.n(), &mut rng);
        let shifts: Vec<f64> = (0..layout.num_strata())
            .map(|_| 3.0 * rng.standard_normal())
            .collect();
        let shifted: Vec<f64> = (0..layout.n())
            .map(|i| r[i] + shifts[layout.stratum_of(i)])
            .collect();
        let a = permutation_test(
            &z,
            &r,
            &layout,
            Alternative::Greater,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        let b = permutation_test(
            &z,
            &shifted,
            &layout,
            Alternative::Greater,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        assert_eq!(a.p_value, b.p_value);
        let two = permutation_test(
            &z,
            &r,
            &layout,
            Alternative::TwoSided,
            TestMethod::Exact,
            0,
            0,
        )
        .unwrap();
        assert!(two.p_value >= a.p_value.min(two.p_less));
        assert!(two.p_value >= a.p_greater.min(a.p_less));
    }
}

#[test]
fn iv_constant_effect_matches_adjusted_outcomes() {
    let layout = StratumLayout::new(vec![4, 4]).unwrap();
    let mut rng = RandomSource::new(604);
    let z = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let base = common::normal_vec(8, &mut rng);
    let beta = 1.7;
    let y: Vec<f64> = base.iter().zip(&z).map(|(b, zi)| b + beta * zi).collect();
    let iv = iv_test(
        &y,
        &z,
        &z,
        &layout,
        beta,
        Alternative::TwoSided,
        TestMethod::Exact,
        0,
        0,
    )
    .unwrap();
    let adjusted: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a - beta * b).collect();
    let direct = permutation_test(
        &z,
        &adjusted,
        &layout,
        Alternative::TwoSided,
        TestMethod::Exact,
        0,
        0,
    )
    .unwrap();
    assert_eq!(iv.p_value, direct.p_value);
}

#[test]
fn interval_brackets_true_effect() {
    let layout = StratumLayout::new(vec![8, 8]).unwrap();
    let mut rng = RandomSource::new(605);
    let z: Vec<f64> = (0..16).map(|i| ((i % 8) < 4) as u8 as f64).collect();
    let base = common::normal_vec(16, &mut rng);
    let beta = 2.0;
    let y: Vec<f64> = base
        .iter()
        .zip(&z)
        .map(|(b, zi)| 0.5 * b + beta * zi)
        .collect();
    let grid: Vec<f64> = (0..81).map(|i| i as f64 * 0.05).collect();
    let ci =
        iv_confidence_interval(&y, &z, &z, &layout, 0.05, &grid, TestMethod::Exact, 0, 0).unwrap();
    let (lo, hi) = ci.interval.unwrap();
    assert!(lo <= beta && beta <= hi, "{lo} {hi}");
    assert!(!ci.non_convex);
    let single =
        iv_confidence_interval(&y, &z, &z, &layout, 0.05, &[beta], TestMethod::Exact, 0, 0)
            .unwrap();
    assert_eq!(single.interval, Some((beta, beta)));
}

#[test]
fn hand_enumerated_iv_case() {
    // K = 1, n = 3, z = (1, 0, 0), d = (1, 1, 0), y = (4, 2, 1), beta0 = 1:
    // scores (3, 1, 1); reference {3, 1, 1}; P(>= 3) = 1/3.
    let layout = StratumLayout::new(vec![3]).unwrap();
    let t = iv_test(
        &[4.0, 2.0, 1.0],
        &[1.0, 1.0, 0.0],
        &[1.0, 0.0, 0.0],
        &layout,
        1.0,
        Alternative::Greater,
        TestMethod::Exact,
        0,
        0,
    )
    .unwrap();
    assert_eq!(t.p_value, 1.0 / 3.0);
    assert_eq!(t.p_less, 1.0);
}

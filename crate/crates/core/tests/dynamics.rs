use crowdledger::dynamics::{
    equilibrium, lyapunov_from_jacobians, lyapunov_from_series, shannon_entropy, vote_entropy, EquilibriumParams,
    LyapunovEstimate, LyapunovMethod, MapSystem, Matrix, VoteSeries,
};
use proptest::prelude::*;

fn est(exps: &[f64]) -> LyapunovEstimate {
    LyapunovEstimate { exponents: exps.to_vec(), method: LyapunovMethod::JacobianProduct }
}

#[test]
fn entropy_of_eight_up_two_down() {
    let oracle = -0.8f64 * 0.8f64.log2() - 0.2f64 * 0.2f64.log2();
    let h = shannon_entropy(&[8, 2]).unwrap();
    assert!((h - oracle).abs() < 1e-12);
    assert!((h - 0.721928).abs() < 1e-6);
    let votes: Vec<i64> = [1; 8].into_iter().chain([-1; 2]).collect();
    assert_eq!(vote_entropy(&votes).unwrap(), h);
}

#[test]
fn linear_map_exponent_is_log_rate() {
    let sys = MapSystem {
        dim: 1,
        dt: 1.0,
        map: |x: &[f64], _t: f64| vec![0.5 * x[0]],
        map_jacobian: |_x: &[f64], _t: f64| Matrix::from_rows(&[vec![0.5]]),
    };
    let l = lyapunov_from_jacobians(&sys, &[1.0], 0.0, 200.0).unwrap();
    assert_eq!(l.exponents.len(), 1);
    assert!((l.exponents[0] - 0.5f64.ln()).abs() < 1e-6);
}

#[test]
fn identity_map_exponent_is_zero() {
    let sys = MapSystem {
        dim: 2,
        dt: 1.0,
        map: |x: &[f64], _t: f64| x.to_vec(),
        map_jacobian: |_x: &[f64], _t: f64| Matrix::identity(2),
    };
    let l = lyapunov_from_jacobians(&sys, &[0.3, -0.2], 0.0, 50.0).unwrap();
    assert_eq!(l.exponents, vec![0.0, 0.0]);
}

#[test]
fn logistic_map_exponent_is_ln2() {
    let f = |x: f64| 4.0 * x * (1.0 - x);
    let mut x0 = 0.3141592653589793;
    for _ in 0..1000 {
        x0 = f(x0);
    }
    let sys = MapSystem {
        dim: 1,
        dt: 1.0,
        map: move |x: &[f64], _t: f64| vec![f(x[0])],
        map_jacobian: |x: &[f64], _t: f64| Matrix::from_rows(&[vec![4.0 - 8.0 * x[0]]]),
    };
    let steps = 100_000usize;
    let l = lyapunov_from_jacobians(&sys, &[x0], 0.0, steps as f64).unwrap();

    // Oracle: the orbit average of ln|f'(x)|.
    let mut x = x0;
    let mut acc = 0.0;
    for _ in 0..steps {
        acc += (4.0 - 8.0 * x).abs().ln();
        x = f(x);
    }
    let oracle = acc / steps as f64;
    assert!((l.exponents[0] - oracle).abs() < 1e-9, "{} vs oracle {oracle}", l.exponents[0]);
    assert!((l.exponents[0] - 2f64.ln()).abs() < 0.01, "{}", l.exponents[0]);
}

#[test]
fn diagonal_linear_system_gives_log_rates() {
    let rates = [0.5, 1.5, 0.9];
    let sys = MapSystem {
        dim: 3,
        dt: 1.0,
        map: move |x: &[f64], _t: f64| x.iter().zip(rates).map(|(xi, a)| xi * a).collect(),
        map_jacobian: move |_x: &[f64], _t: f64| {
            let mut m = Matrix::zeros(3);
            for (i, a) in rates.iter().enumerate() {
                m[(i, i)] = *a;
            }
            m
        },
    };
    let l = lyapunov_from_jacobians(&sys, &[1.0, 1.0, 1.0], 0.0, 100.0).unwrap();
    let mut got = l.exponents.clone();
    got.sort_by(f64::total_cmp);
    let mut want: Vec<f64> = rates.iter().map(|a: &f64| a.ln()).collect();
    want.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6, "{got:?} vs {want:?}");
    }
}

/// Every combination of the three conjuncts, each at its boundary.
#[test]
fn equilibrium_truth_table() {
    let params = EquilibriumParams { tau: 0.9, c_min: 10 };
    for lyap_ok in [true, false] {
        for entropy_ok in [true, false] {
            for count_ok in [true, false] {
                let l = if lyap_ok { est(&[-1e-12, -3.0]) } else { est(&[-3.0, 0.0]) };
                let h = if entropy_ok { 0.9 - 1e-12 } else { 0.9 };
                let c = if count_ok { 10 } else { 9 };
                assert_eq!(
                    equilibrium(&l, h, &params, c),
                    lyap_ok && entropy_ok && count_ok,
                    "lyap {lyap_ok} entropy {entropy_ok} count {count_ok}"
                );
            }
        }
    }
}

#[test]
fn equilibrium_examples() {
    let p = EquilibriumParams::default();
    assert!(equilibrium(&est(&[-0.1]), 0.3, &p, 50));
    assert!(!equilibrium(&est(&[0.2, -0.5]), 0.0, &p, 1000));
    assert!(!equilibrium(&est(&[-1.0]), 0.0, &p, 5));
}

/// Direct evaluation of the series estimator, written out independently.
fn series_oracle(votes: &[i64]) -> f64 {
    let mut sum = 0.0;
    let means: Vec<f64> = votes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            sum += v as f64;
            sum / (i + 1) as f64
        })
        .collect();
    let d: Vec<f64> = (0..means.len() - 1)
        .map(|t| {
            let x = (means[t + 1] - means[t]).abs();
            if x == 0.0 {
                1e-12
            } else {
                x
            }
        })
        .collect();
    (0..d.len() - 1).map(|t| (d[t + 1] / d[t]).ln()).sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn series_estimator_examples() {
    let unanimous = VoteSeries::new(vec![1; 30]).unwrap();
    assert!(lyapunov_from_series(&unanimous).unwrap().max().abs() < 1e-9);

    let alternating: Vec<i64> = (0..40).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let l = lyapunov_from_series(&VoteSeries::new(alternating.clone()).unwrap()).unwrap().max();
    assert!((l - series_oracle(&alternating)).abs() < 1e-12);
    assert!(l < 0.0);

    let reversal: Vec<i64> = [1; 50].into_iter().chain([-1; 50]).collect();
    let l = lyapunov_from_series(&VoteSeries::new(reversal.clone()).unwrap()).unwrap().max();
    assert!((l - series_oracle(&reversal)).abs() < 1e-12);
    assert!(l >= 0.0);
}

proptest! {
    #[test]
    fn entropy_bounds(counts in prop::collection::vec(0u64..50, 1..8)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let h = shannon_entropy(&counts).unwrap();
        let k = counts.len() as f64;
        prop_assert!(h >= 0.0 && h <= k.log2() + 1e-12);
        let nonzero = counts.iter().filter(|&&c| c > 0).count();
        if nonzero == 1 {
            prop_assert_eq!(h, 0.0);
        } else {
            prop_assert!(h > 0.0);
        }
        if counts.iter().all(|&c| c == counts[0]) {
            prop_assert!((h - k.log2()).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_permutation_invariant(counts in prop::collection::vec(0u64..50, 2..8), rot in 0usize..8) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let mut moved = counts.clone();
        moved.rotate_left(rot % counts.len());
        moved.reverse();
        prop_assert!((shannon_entropy(&counts).unwrap() - shannon_entropy(&moved).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_monotone(
        l in prop::collection::vec(-2.0f64..0.5, 1..4),
        h in 0.0f64..1.0,
        c in 0usize..30,
        dl in prop::collection::vec(0.0f64..1.0, 4),
        dh in 0.0f64..1.0,
        dc in 0usize..30,
    ) {
        let p = EquilibriumParams::default();
        if equilibrium(&est(&l), h, &p, c) {
            let lower: Vec<f64> = l.iter().zip(&dl).map(|(a, d)| a - d).collect();
            prop_assert!(equilibrium(&est(&lower), h * (1.0 - dh), &p, c + dc));
        }
    }

    #[test]
    fn series_estimator_matches_direct_evaluation(votes in prop::collection::vec(prop::bool::ANY, 4..60)) {
        let votes: Vec<i64> = votes.into_iter().map(|b| if b { 1 } else { -1 }).collect();
        let l = lyapunov_from_series(&VoteSeries::new(votes.clone()).unwrap()).unwrap();
        prop_assert!((l.max() - series_oracle(&votes)).abs() < 1e-9);
    }
}

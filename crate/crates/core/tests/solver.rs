use hihtp::ensembles::{rng_from_seed, BlindConvInstance, EnsembleSpec};
use hihtp::experiments::SUCCESS_THRESHOLD;
use hihtp::operators::IdentityOperator;
use hihtp::solver::restricted_least_squares;
use hihtp::{
    hihtp_solve, relative_error, ActiveBlock, BlockShape, Depth, HiSparseVector, HiSupport,
    SolverConfig, SparsityLevels, StopReason,
};
use proptest::prelude::*;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

/// A random `(s, σ)`-sparse vector with Gaussian entries.
fn random_hisparse(mu: usize, n: usize, s: usize, sigma: usize, seed: u64) -> HiSparseVector {
    let mut rng = rng_from_seed(seed);
    let mut data = vec![0.0; mu * n];
    for k in index::sample(&mut rng, mu, s) {
        for j in index::sample(&mut rng, n, sigma) {
            data[k * n + j] = rng.sample(StandardNormal);
        }
    }
    HiSparseVector::new(BlockShape::two_level(mu, n), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_operator_recovers_exactly(
        mu in 1usize..12,
        n in 1usize..12,
        s_frac in 0.0f64..1.0,
        sigma_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let s = 1 + ((mu - 1) as f64 * s_frac) as usize;
        let sigma = 1 + ((n - 1) as f64 * sigma_frac) as usize;
        let w = random_hisparse(mu, n, s, sigma, seed);
        let op = IdentityOperator::new(w.shape());
        let report = hihtp_solve(w.data(), &op, &SparsityLevels::new(s, sigma), &SolverConfig::default()).unwrap();
        prop_assert_eq!(report.iterations, 1);
        prop_assert_eq!(report.estimate.data(), w.data());
    }
}

fn easy_instance(seed: u64) -> BlindConvInstance {
    BlindConvInstance::draw(&EnsembleSpec::single(50, 120, 2, 5, seed)).unwrap()
}

#[test]
fn iterates_stay_feasible_and_reports_are_consistent() {
    let levels = SparsityLevels::new(3, 5);
    for seed in 0..10 {
        let inst = BlindConvInstance::draw(&EnsembleSpec::single(30, 40, 3, 5, seed)).unwrap();
        let report = hihtp_solve(
            &inst.measurements,
            &inst.op,
            &levels,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(report.residual_norms.len(), report.iterations);
        assert_eq!(report.support_history.len(), report.iterations);
        assert!(report.iterations <= 10);
        for sup in &report.support_history {
            assert!(sup.satisfies(&levels));
            assert_eq!(sup.cardinality(), 15);
        }
        let sup = report.estimate.support().unwrap();
        assert_eq!(sup, report.support_history.last().unwrap());
        let nonzeros = report.estimate.data().iter().filter(|v| **v != 0.0).count();
        assert!(nonzeros <= 15);
    }
}

#[test]
fn stall_stop_keeps_least_squares_residual() {
    for seed in 0..10 {
        let inst = easy_instance(seed);
        let levels = SparsityLevels::new(2, 5);
        let cfg = SolverConfig {
            rel_err_target: Some(1e-300),
            ..SolverConfig::default()
        };
        let report = hihtp_solve(&inst.measurements, &inst.op, &levels, &cfg).unwrap();
        if report.stop_reason == StopReason::SupportStalled {
            let last = report.support_history.last().unwrap();
            let ls = restricted_least_squares(&inst.measurements, &inst.op, last, &cfg).unwrap();
            let r_ls = {
                let applied = inst.op.apply(&ls.estimate).unwrap();
                applied
                    .iter()
                    .zip(&inst.measurements)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let r_report = *report.residual_norms.last().unwrap();
            assert!((r_report - r_ls).abs() <= 1e-8 * inst.truth.norm().max(1.0));
        }
    }
}

#[test]
fn inner_residual_is_monotone() {
    let inst = BlindConvInstance::draw(&EnsembleSpec::single(50, 60, 3, 5, 1)).unwrap();
    let levels = SparsityLevels::new(3, 5);
    let report = hihtp_solve(
        &inst.measurements,
        &inst.op,
        &levels,
        &SolverConfig::default(),
    )
    .unwrap();
    for sup in &report.support_history {
        let sol =
            restricted_least_squares(&inst.measurements, &inst.op, sup, &SolverConfig::default())
                .unwrap();
        for w in sol.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
    }
}

#[test]
fn solves_are_deterministic() {
    let inst = easy_instance(17);
    let levels = SparsityLevels::new(2, 5);
    let a = hihtp_solve(
        &inst.measurements,
        &inst.op,
        &levels,
        &SolverConfig::default(),
    )
    .unwrap();
    let b = hihtp_solve(
        &inst.measurements,
        &inst.op,
        &levels,
        &SolverConfig::default(),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn easy_regime_recovers_in_at_least_95_of_100_trials() {
    let levels = SparsityLevels::new(2, 5);
    let successes = (0..100)
        .filter(|&seed| {
            let inst = easy_instance(seed);
            let report = hihtp_solve(
                &inst.measurements,
                &inst.op,
                &levels,
                &SolverConfig::default(),
            )
            .unwrap();
            relative_error(&report.estimate, &inst.truth).unwrap() <= SUCCESS_THRESHOLD
        })
        .count();
    assert!(successes >= 95, "only {successes} of 100 recovered");
}

#[test]
fn zero_measurements_give_zero_after_one_iteration() {
    let inst = easy_instance(3);
    let y = vec![0.0; inst.measurements.len()];
    let report = hihtp_solve(
        &y,
        &inst.op,
        &SparsityLevels::new(2, 5),
        &SolverConfig::default(),
    )
    .unwrap();
    assert_eq!(report.iterations, 1);
    assert!(report.estimate.data().iter().all(|v| *v == 0.0));
}

#[test]
fn single_column_least_squares_is_closed_form() {
    let inst = easy_instance(4);
    let shape = inst.truth.shape();
    let support = HiSupport::new(
        shape,
        Depth::Two,
        vec![ActiveBlock {
            user: 0,
            block: 7,
            entries: vec![11],
        }],
    )
    .unwrap();
    let mut unit = vec![0.0; shape.len()];
    let idx = shape.index(0, 7, 11);
    unit[idx] = 1.0;
    let c = inst
        .op
        .apply(&HiSparseVector::new(shape, unit).unwrap())
        .unwrap();
    let cy: f64 = c.iter().zip(&inst.measurements).map(|(a, b)| a * b).sum();
    let cc: f64 = c.iter().map(|a| a * a).sum();
    let sol = restricted_least_squares(
        &inst.measurements,
        &inst.op,
        &support,
        &SolverConfig::default(),
    )
    .unwrap();
    assert!((sol.estimate.data()[idx] - cy / cc).abs() <= 1e-12 * (cy / cc).abs().max(1.0));
    assert_eq!(sol.estimate.data().iter().filter(|v| **v != 0.0).count(), 1);
}

use hihtp::{
    project_hisparse, project_three_level, BlockShape, Depth, HiSparseVector, HiSupport,
    SparsityLevels,
};
use proptest::prelude::*;

mod common;

use common::{brute_force_distance, sq_dist, subsets};

fn case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..=4, 1usize..=4).prop_flat_map(|(mu, n)| {
        (
            Just(mu),
            Just(n),
            1..=mu,
            1..=n,
            prop::collection::vec(-10.0f64..10.0, mu * n),
        )
    })
}

proptest! {
    #[test]
    fn projection_matches_enumeration((mu, n, s, sigma, data) in case()) {
        let w = HiSparseVector::new(BlockShape::two_level(mu, n), data.clone()).unwrap();
        let (p, _) = project_hisparse(&w, &SparsityLevels::new(s, sigma)).unwrap();
        let got = sq_dist(&data, p.data());
        let want = brute_force_distance(&data, mu, n, s, sigma);
        prop_assert!((got - want).abs() <= 1e-12 * w.norm_sq().max(1.0));
    }

    #[test]
    fn projection_is_idempotent((mu, n, s, sigma, data) in case()) {
        let levels = SparsityLevels::new(s, sigma);
        let w = HiSparseVector::new(BlockShape::two_level(mu, n), data).unwrap();
        let (p, sup) = project_hisparse(&w, &levels).unwrap();
        let (pp, sup2) = project_hisparse(&p, &levels).unwrap();
        prop_assert_eq!(p.data(), pp.data());
        prop_assert_eq!(sup, sup2);
    }

    #[test]
    fn projection_contracts((mu, n, s, sigma, data) in case()) {
        let levels = SparsityLevels::new(s, sigma);
        let w = HiSparseVector::new(BlockShape::two_level(mu, n), data).unwrap();
        let (p, sup) = project_hisparse(&w, &levels).unwrap();
        prop_assert!(p.norm() <= w.norm());
        let nz = HiSupport::of_nonzeros(w.shape(), Depth::Two, w.data()).unwrap();
        if p.norm() == w.norm() {
            prop_assert!(nz.satisfies(&levels));
        }
        if nz.satisfies(&levels) {
            prop_assert_eq!(p.data(), w.data());
        }
        prop_assert!(sup.satisfies(&levels));
        prop_assert_eq!(sup.cardinality(), s * sigma);
    }

    #[test]
    fn projection_is_scale_equivariant((mu, n, s, sigma, data) in case(), c in 0.01f64..100.0) {
        let levels = SparsityLevels::new(s, sigma);
        let shape = BlockShape::two_level(mu, n);
        let w = HiSparseVector::new(shape, data.clone()).unwrap();
        let scaled = HiSparseVector::new(shape, data.iter().map(|v| c * v).collect()).unwrap();
        let (p, sup) = project_hisparse(&w, &levels).unwrap();
        let (q, sup_c) = project_hisparse(&scaled, &levels).unwrap();
        prop_assert_eq!(sup, sup_c);
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((c * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn three_level_matches_enumeration(
        users in 1usize..=3,
        mu in 1usize..=3,
        n in 1usize..=3,
        seed_data in prop::collection::vec(-5.0f64..5.0, 27),
        active_frac in 0.0f64..1.0,
        s_frac in 0.0f64..1.0,
        sigma_frac in 0.0f64..1.0,
    ) {
        let active = 1 + ((users - 1) as f64 * active_frac).round() as usize;
        let s = 1 + ((mu - 1) as f64 * s_frac).round() as usize;
        let sigma = 1 + ((n - 1) as f64 * sigma_frac).round() as usize;
        let len = users * mu * n;
        let data = seed_data[..len].to_vec();
        let w = HiSparseVector::new(BlockShape::three_level(users, mu, n), data.clone()).unwrap();
        let levels = SparsityLevels::three_level(active, s, sigma);
        let (p, sup) = project_three_level(&w, &levels).unwrap();
        prop_assert!(sup.satisfies(&levels));

        // best kept energy per user by enumeration, then best user subset
        let total: f64 = data.iter().map(|v| v * v).sum();
        let user_len = mu * n;
        let per_user: Vec<f64> = (0..users)
            .map(|u| {
                let slice = &data[u * user_len..(u + 1) * user_len];
                slice.iter().map(|v| v * v).sum::<f64>()
                    - brute_force_distance(slice, mu, n, s, sigma)
            })
            .collect();
        let want = subsets(users, active)
            .iter()
            .map(|set| total - set.iter().map(|&u| per_user[u]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let got = sq_dist(&data, p.data());
        prop_assert!((got - want).abs() <= 1e-12 * total.max(1.0));
    }
}

#[test]
fn two_user_example_keeps_larger_magnitude() {
    let w = HiSparseVector::new(BlockShape::three_level(2, 1, 1), vec![5.0, -6.0]).unwrap();
    let (p, _) = project_three_level(&w, &SparsityLevels::three_level(1, 1, 1)).unwrap();
    assert_eq!(p.data(), &[0.0, -6.0]);
    // enumeration: keeping user 0 leaves 36, keeping user 1 leaves 25
    assert_eq!(sq_dist(w.data(), p.data()), 25.0);
}

#[test]
fn three_level_feasible_input_is_fixed() {
    let shape = BlockShape::three_level(3, 2, 2);
    let mut data = vec![0.0; shape.len()];
    data[shape.index(0, 1, 0)] = 2.0;
    data[shape.index(2, 0, 1)] = -1.5;
    data[shape.index(2, 1, 1)] = 0.5;
    let w = HiSparseVector::new(shape, data).unwrap();
    let (p, _) = project_three_level(&w, &SparsityLevels::three_level(2, 2, 1)).unwrap();
    assert_eq!(p.data(), w.data());
}

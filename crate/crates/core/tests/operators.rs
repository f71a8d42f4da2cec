use hihtp::ensembles::{gen_spread, rng_from_seed};
use hihtp::operators::{measure, to_dense_matrix};
use hihtp::solver::restricted_least_squares;
use hihtp::{
    circular_convolve_direct, circular_convolve_fft, rank_one_factor, BlindConvOp, BlockShape,
    Codebook, DemixOp, Depth, HiSparseVector, HiSupport, MeasurementOperator, SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, gaussian_vec(rng, rows * cols))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `C` built entry by entry: column `(k, j)` is `Q e_j` shifted by `k`.
fn lifted_matrix(u: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = u * a;
    let (mu, n) = (q.nrows(), q.ncols());
    DMatrix::from_fn(mu, mu * n, |i, col| {
        let (k, j) = (col / n, col % n);
        q[((i + mu - k) % mu, j)]
    })
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    let scale = norm(b).max(1.0);
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
    }
}

#[test]
fn blind_conv_matches_dense_oracle() {
    let mut rng = rng_from_seed(3);
    for &(mu, m, n) in &[(1, 3, 3), (4, 4, 4), (5, 3, 2), (8, 6, 8), (16, 4, 4)] {
        let u = gaussian_mat(&mut rng, mu, m);
        let a = gaussian_mat(&mut rng, m, n);
        let mut cases = vec![(
            lifted_matrix(&u, &a),
            BlindConvOp::new(u.clone(), Codebook::Dense(a)).unwrap(),
        )];
        if m == n {
            cases.push((
                lifted_matrix(&u, &DMatrix::identity(n, n)),
                BlindConvOp::with_identity_codebook(u).unwrap(),
            ));
        }
        for (dense, op) in cases {
            let w = gaussian_vec(&mut rng, mu * n);
            let y = gaussian_vec(&mut rng, mu);
            let cw = op
                .apply(&HiSparseVector::new(op.shape(), w.clone()).unwrap())
                .unwrap();
            assert_close(&cw, (&dense * DVector::from_vec(w)).as_slice(), 1e-12);
            let cty = op.adjoint(&y).unwrap();
            assert_close(
                cty.data(),
                (dense.transpose() * DVector::from_vec(y)).as_slice(),
                1e-12,
            );
        }
    }
}

#[test]
fn demix_matches_dense_oracle() {
    let mut rng = rng_from_seed(4);
    let (mu, n, antennas, users) = (4, 3, 2, 2);
    let d = gaussian_mat(&mut rng, antennas, users);
    let spreads: Vec<_> = (0..users).map(|_| gaussian_mat(&mut rng, mu, n)).collect();
    let blocks: Vec<_> = spreads
        .iter()
        .map(|u| lifted_matrix(u, &DMatrix::identity(n, n)))
        .collect();
    let dense = DMatrix::from_fn(antennas * mu, users * mu * n, |row, col| {
        let (j, i) = (row / mu, row % mu);
        let (user, c) = (col / (mu * n), col % (mu * n));
        d[(j, user)] * blocks[user][(i, c)]
    });
    let op = DemixOp::new(
        d,
        spreads
            .into_iter()
            .map(|u| BlindConvOp::with_identity_codebook(u).unwrap())
            .collect(),
    )
    .unwrap();
    for _ in 0..5 {
        let w = gaussian_vec(&mut rng, users * mu * n);
        let y = gaussian_vec(&mut rng, antennas * mu);
        let got = op
            .apply(&HiSparseVector::new(op.signal_shape(), w.clone()).unwrap())
            .unwrap();
        assert_close(&got, (&dense * DVector::from_vec(w)).as_slice(), 1e-12);
        let back = op.adjoint(&y).unwrap();
        assert_close(
            back.data(),
            (dense.transpose() * DVector::from_vec(y)).as_slice(),
            1e-12,
        );
    }
}

#[test]
fn materialized_transpose_matches_adjoint() {
    let mut rng = rng_from_seed(5);
    let op = BlindConvOp::with_identity_codebook(gaussian_mat(&mut rng, 8, 8)).unwrap();
    let dense = to_dense_matrix(&op);
    for _ in 0..10 {
        let y = gaussian_vec(&mut rng, 8);
        let want = dense.transpose() * DVector::from_column_slice(&y);
        assert_close(op.adjoint(&y).unwrap().data(), want.as_slice(), 1e-12);
    }
}

#[test]
fn operators_are_linear() {
    let mut rng = rng_from_seed(6);
    let op = BlindConvOp::new(
        gaussian_mat(&mut rng, 12, 6),
        Codebook::Dense(gaussian_mat(&mut rng, 6, 5)),
    )
    .unwrap();
    let shape = op.shape();
    for _ in 0..20 {
        let (alpha, beta): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let w = gaussian_vec(&mut rng, shape.len());
        let v = gaussian_vec(&mut rng, shape.len());
        let combo: Vec<f64> = w
            .iter()
            .zip(&v)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let lhs = op
            .apply(&HiSparseVector::new(shape, combo).unwrap())
            .unwrap();
        let cw = op.apply(&HiSparseVector::new(shape, w).unwrap()).unwrap();
        let cv = op.apply(&HiSparseVector::new(shape, v).unwrap()).unwrap();
        let rhs: Vec<f64> = cw
            .iter()
            .zip(&cv)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        assert!(
            norm(&lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>())
                <= 1e-12 * norm(&rhs)
        );
    }
}

#[test]
fn fft_matches_direct_sum() {
    let mut rng = rng_from_seed(7);
    for mu in [1, 2, 3, 7, 16, 31, 64, 100, 256] {
        for _ in 0..5 {
            let h = gaussian_vec(&mut rng, mu);
            let x = gaussian_vec(&mut rng, mu);
            let direct = circular_convolve_direct(&h, &x).unwrap();
            let fast = circular_convolve_fft(&h, &x).unwrap();
            let diff: Vec<f64> = direct.iter().zip(&fast).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) <= 1e-10 * norm(&direct));
        }
    }
}

#[test]
fn lifted_and_factored_orders_agree() {
    let mut rng = rng_from_seed(8);
    for mu in [5, 40, 96] {
        let op = BlindConvOp::with_identity_codebook(gen_spread(mu, 20, 9).unwrap()).unwrap();
        let h = gaussian_vec(&mut rng, mu);
        let b = gaussian_vec(&mut rng, 20);
        let lifted = op
            .apply(&HiSparseVector::from_factors(&h, &b).unwrap())
            .unwrap();
        let factored = op.apply_factored(&h, &b).unwrap();
        let diff: Vec<f64> = lifted.iter().zip(&factored).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 1e-12 * norm(&lifted));
    }
}

#[test]
fn single_user_demix_reduces_bit_for_bit() {
    let mut rng = rng_from_seed(10);
    let user = BlindConvOp::with_identity_codebook(gaussian_mat(&mut rng, 9, 4)).unwrap();
    let demix = DemixOp::new(DMatrix::from_element(1, 1, 1.0), vec![user.clone()]).unwrap();
    for _ in 0..10 {
        let w = gaussian_vec(&mut rng, 36);
        let y = gaussian_vec(&mut rng, 9);
        let single = user
            .apply(&HiSparseVector::new(user.shape(), w.clone()).unwrap())
            .unwrap();
        let mixed = demix
            .apply(&HiSparseVector::new(demix.signal_shape(), w).unwrap())
            .unwrap();
        assert_eq!(single, mixed);
        assert_eq!(
            user.adjoint(&y).unwrap().data(),
            demix.adjoint(&y).unwrap().data()
        );
    }
}

#[test]
fn rank_one_matches_svd_under_perturbation() {
    let mut rng = rng_from_seed(11);
    for _ in 0..10 {
        let h0 = gaussian_vec(&mut rng, 12);
        let b0 = gaussian_vec(&mut rng, 7);
        let mut w = HiSparseVector::from_factors(&h0, &b0).unwrap().into_data();
        for v in w.iter_mut() {
            *v += 1e-8 * rng.sample::<f64, _>(StandardNormal);
        }
        let m = DMatrix::from_row_slice(12, 7, &w);
        let svd = m.clone().svd(true, true);
        let (idx, _) = svd.singular_values.argmax();
        let mut v1: Vec<f64> = svd.v_t.as_ref().unwrap().row(idx).iter().copied().collect();
        let lead = (0..7)
            .max_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs()))
            .unwrap();
        if v1[lead] < 0.0 {
            v1.iter_mut().for_each(|x| *x = -*x);
        }
        let h_svd: Vec<f64> = (m * DVector::from_vec(v1.clone()))
            .iter()
            .copied()
            .collect();

        let f = rank_one_factor(&HiSparseVector::new(BlockShape::two_level(12, 7), w).unwrap())
            .unwrap();
        let db: Vec<f64> = f.b.iter().zip(&v1).map(|(a, b)| a - b).collect();
        let dh: Vec<f64> = f.h.iter().zip(&h_svd).map(|(a, b)| a - b).collect();
        assert!(norm(&db) <= 1e-6);
        assert!(norm(&dh) <= 1e-6 * norm(&h_svd));
        assert!((f.singular_value - svd.singular_values[idx]).abs() <= 1e-6 * f.singular_value);

        // truth up to the scale convention
        let c = norm(&b0) * b0[lead].signum();
        for (x, t) in f.b.iter().zip(&b0) {
            assert!((x - t / c).abs() <= 1e-6);
        }
    }
}

#[test]
fn restricted_least_squares_matches_dense_solve() {
    let mut rng = rng_from_seed(12);
    let (mu, n) = (16, 16);
    let op = BlindConvOp::with_identity_codebook(gen_spread(mu, n, 13).unwrap()).unwrap();
    let dense = to_dense_matrix(&op);
    let shape = op.shape();
    for _ in 0..10 {
        let h: Vec<f64> = (0..mu)
            .map(|k| {
                if k % 7 == 2 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|j| {
                if j % 5 == 1 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        let truth = HiSparseVector::from_factors(&h, &b).unwrap();
        let support = HiSupport::of_nonzeros(shape, Depth::Two, truth.data()).unwrap();
        let y = measure(&op, &truth).unwrap();
        let noisy: Vec<f64> = y
            .iter()
            .map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let cols = support.flat_indices();
        let sub = DMatrix::from_fn(mu, cols.len(), |i, c| dense[(i, cols[c])]);
        let normal = sub.transpose() * &sub;
        let rhs = sub.transpose() * DVector::from_column_slice(&noisy);
        let want = normal.cholesky().unwrap().solve(&rhs);

        let sol =
            restricted_least_squares(&noisy, &op, &support, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        let got: Vec<f64> = cols.iter().map(|&i| sol.estimate.data()[i]).collect();
        let diff: Vec<f64> = got.iter().zip(want.iter()).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 1e-8 * norm(want.as_slice()));

        // noiseless: the truth itself
        let exact = restricted_least_squares(&y, &op, &support, &SolverConfig::default()).unwrap();
        let diff: Vec<f64> = exact
            .estimate
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| a - b)
            .collect();
        assert!(norm(&diff) <= 1e-8 * truth.norm());
        for w in exact.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }
}

//! Circular convolution and the lifted measurement operators.
//!
//! `BlindConvOp` is the linear map `C` on `μ × n` block vectors with
//! `C(h ⊗ b) = h * (Q b)` and `Q = U A`. Block `k` of the lifted vector is
//! encoded by `Q` and circularly shifted by `k`, so
//! `C(w) = Σ_k shift_k(Q w_k)` and block `k` of `C*(y)` is `Qᵀ shift_{-k}(y)`.
//!
//! `DemixOp` stacks `N` such operators and mixes their outputs onto `M`
//! antennas: row `j` of the output is `Σ_i d_{j,i} C_i(W_i)`.

use std::fmt::Debug;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hier_sparse::{BlockShape, Depth, HiSparseVector, HiSupport};

/// Length at which `circular_convolve` switches to the FFT path.
pub const FFT_THRESHOLD: usize = 32;

/// `y_i = Σ_k h_k x_{(i-k) mod μ}`, evaluated directly in `O(μ²)`.
pub fn circular_convolve_direct(h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len("circular convolution", h.len(), x.len())?;
    let mu = h.len();
    let mut y = vec![0.0; mu];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        for (i, &xi) in x.iter().enumerate() {
            y[(i + k) % mu] += hk * xi;
        }
    }
    Ok(y)
}

/// Circular convolution through the DFT, `O(μ log μ)`.
pub fn circular_convolve_fft(h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len("circular convolution", h.len(), x.len())?;
    let mu = h.len();
    if mu == 0 {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(mu);
    let inverse = planner.plan_fft_inverse(mu);
    let mut hf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut xf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    forward.process(&mut hf);
    forward.process(&mut xf);
    for (a, b) in hf.iter_mut().zip(&xf) {
        *a *= b;
    }
    inverse.process(&mut hf);
    let scale = 1.0 / mu as f64;
    Ok(hf.into_iter().map(|c| c.re * scale).collect())
}

/// Circular convolution, picking the direct sum for short inputs.
pub fn circular_convolve(h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if h.len() < FFT_THRESHOLD {
        circular_convolve_direct(h, x)
    } else {
        circular_convolve_fft(h, x)
    }
}

/// A linear map given only through its action and the action of its adjoint.
pub trait LinearMap: Debug + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// `out = A x`; `out` has length `output_dim`.
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`; `out` has length `input_dim`.
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
}

/// The codebook `A: ℝⁿ → ℝᵐ` that encodes a message before spreading.
#[derive(Clone, Debug)]
pub enum Codebook {
    Identity(usize),
    Dense(DMatrix<f64>),
    Custom(Arc<dyn LinearMap>),
}

impl LinearMap for Codebook {
    fn input_dim(&self) -> usize {
        match self {
            Codebook::Identity(n) => *n,
            Codebook::Dense(a) => a.ncols(),
            Codebook::Custom(map) => map.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Codebook::Identity(n) => *n,
            Codebook::Dense(a) => a.nrows(),
            Codebook::Custom(map) => map.output_dim(),
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Codebook::Identity(_) => out.copy_from_slice(x),
            Codebook::Dense(a) => {
                out.fill(0.0);
                for (j, &xj) in x.iter().enumerate() {
                    if xj != 0.0 {
                        for (o, &aij) in out.iter_mut().zip(a.column(j).iter()) {
                            *o += aij * xj;
                        }
                    }
                }
            }
            Codebook::Custom(map) => map.apply(x, out),
        }
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        match self {
            Codebook::Identity(_) => out.copy_from_slice(y),
            Codebook::Dense(a) => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = a.column(j).iter().zip(y).map(|(aij, yi)| aij * yi).sum();
                }
            }
            Codebook::Custom(map) => map.adjoint(y, out),
        }
    }
}

/// A linear measurement operator acting on flat block vectors.
pub trait MeasurementOperator: Send + Sync {
    /// Shape of the vectors the operator acts on.
    fn signal_shape(&self) -> BlockShape;
    /// Number of scalar measurements produced.
    fn measurement_len(&self) -> usize;
    /// Overwrites `out` with the measurements of `x`.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// Overwrites `out` with the adjoint applied to `y`.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    /// The adjoint restricted to `support`, in `HiSupport::flat_indices` order.
    fn adjoint_on_support(&self, y: &[f64], support: &HiSupport, out: &mut [f64]) {
        let mut full = vec![0.0; self.signal_shape().len()];
        self.adjoint_into(y, &mut full);
        for (o, i) in out.iter_mut().zip(support.flat_indices()) {
            *o = full[i];
        }
    }
}

/// Checked `apply` for any operator.
pub fn measure(op: &dyn MeasurementOperator, x: &HiSparseVector) -> Result<Vec<f64>> {
    if x.shape() != op.signal_shape() {
        return Err(Error::DimensionMismatch {
            context: "operator input",
            expected: op.signal_shape().len(),
            actual: x.shape().len(),
        });
    }
    let mut out = vec![0.0; op.measurement_len()];
    op.apply_into(x.data(), &mut out);
    Ok(out)
}

/// Checked adjoint for any operator.
pub fn back_project(op: &dyn MeasurementOperator, y: &[f64]) -> Result<HiSparseVector> {
    check_len("operator adjoint input", op.measurement_len(), y.len())?;
    let shape = op.signal_shape();
    let mut out = vec![0.0; shape.len()];
    op.adjoint_into(y, &mut out);
    HiSparseVector::new(shape, out)
}

/// Materializes an operator column by column.
pub fn to_dense_matrix(op: &dyn MeasurementOperator) -> DMatrix<f64> {
    let cols = op.signal_shape().len();
    let rows = op.measurement_len();
    let mut mat = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        mat.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    mat
}

/// The lifted blind-convolution operator `C` with `Q = U A`.
#[derive(Clone, Debug)]
pub struct BlindConvOp {
    spread: DMatrix<f64>,
    codebook: Codebook,
}

impl BlindConvOp {
    /// `spread` is `U` (μ × m); the codebook maps `ℝⁿ → ℝᵐ`.
    pub fn new(spread: DMatrix<f64>, codebook: Codebook) -> Result<Self> {
        if spread.nrows() == 0 || spread.ncols() == 0 || codebook.input_dim() == 0 {
            return Err(Error::Config(
                "operator dimensions must be positive".to_string(),
            ));
        }
        check_len("codebook output", spread.ncols(), codebook.output_dim())?;
        if spread.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spreading matrix"));
        }
        Ok(Self { spread, codebook })
    }

    /// `Q = U`, i.e. an identity codebook with `m = n`.
    pub fn with_identity_codebook(spread: DMatrix<f64>) -> Result<Self> {
        let n = spread.ncols();
        Self::new(spread, Codebook::Identity(n))
    }

    pub fn mu(&self) -> usize {
        self.spread.nrows()
    }

    pub fn m(&self) -> usize {
        self.spread.ncols()
    }

    pub fn n(&self) -> usize {
        self.codebook.input_dim()
    }

    pub fn spread(&self) -> &DMatrix<f64> {
        &self.spread
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn shape(&self) -> BlockShape {
        BlockShape::two_level(self.mu(), self.n())
    }

    /// `Q b`, added onto `out` after a circular shift by `shift`.
    fn encode_shifted_add(&self, b: &[f64], shift: usize, out: &mut [f64], scratch: &mut Vec<f64>) {
        let mu = self.mu();
        let mut add_column = |col: &[f64], scale: f64| {
            let (head, tail) = out.split_at_mut(shift);
            // out[(i + shift) mod μ] for i < μ - shift lands in tail
            for (o, &c) in tail.iter_mut().zip(col) {
                *o += scale * c;
            }
            for (o, &c) in head.iter_mut().zip(&col[mu - shift..]) {
                *o += scale * c;
            }
        };
        match &self.codebook {
            Codebook::Identity(_) => {
                for (j, &bj) in b.iter().enumerate() {
                    if bj != 0.0 {
                        add_column(self.spread.column(j).as_slice(), bj);
                    }
                }
            }
            codebook => {
                scratch.resize(self.m(), 0.0);
                codebook.apply(b, scratch);
                for (j, &aj) in scratch.iter().enumerate() {
                    if aj != 0.0 {
                        add_column(self.spread.column(j).as_slice(), aj);
                    }
                }
            }
        }
    }

    /// `Q b`.
    pub fn encode(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("message", self.n(), b.len())?;
        let mut out = vec![0.0; self.mu()];
        self.encode_shifted_add(b, 0, &mut out, &mut Vec::new());
        Ok(out)
    }

    /// `Qᵀ z`.
    pub fn decode_adjoint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint message", self.mu(), z.len())?;
        let uz: Vec<f64> = self
            .spread
            .column_iter()
            .map(|c| c.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = vec![0.0; self.n()];
        self.codebook.adjoint(&uz, &mut out);
        Ok(out)
    }

    /// `C(w) = Σ_k shift_k(Q w_k)`.
    pub fn apply(&self, w: &HiSparseVector) -> Result<Vec<f64>> {
        measure(self, w)
    }

    /// Block `k` of `C*(y)` is `Qᵀ shift_{-k}(y)`.
    pub fn adjoint(&self, y: &[f64]) -> Result<HiSparseVector> {
        back_project(self, y)
    }

    /// `h * (Q b)`: the same map evaluated filter-major on a factored input.
    pub fn apply_factored(&self, h: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        check_len("filter", self.mu(), h.len())?;
        let x = self.encode(b)?;
        circular_convolve(h, &x)
    }

    /// Columns of `Ys` are `shift_{-k}(y)`; returns `Uᵀ Ys` (m × μ).
    fn spread_adjoint_all_shifts(&self, y: &[f64]) -> DMatrix<f64> {
        let mu = self.mu();
        let shifted = DMatrix::from_fn(mu, mu, |i, k| y[(i + k) % mu]);
        self.spread.tr_mul(&shifted)
    }
}

impl MeasurementOperator for BlindConvOp {
    fn signal_shape(&self) -> BlockShape {
        self.shape()
    }

    fn measurement_len(&self) -> usize {
        self.mu()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut scratch = Vec::new();
        for (k, block) in x.chunks_exact(self.n()).enumerate() {
            if block.iter().any(|&v| v != 0.0) {
                self.encode_shifted_add(block, k, out, &mut scratch);
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n();
        let coeffs = self.spread_adjoint_all_shifts(y);
        for (k, block) in out.chunks_exact_mut(n).enumerate() {
            self.codebook.adjoint(coeffs.column(k).as_slice(), block);
        }
    }

    fn adjoint_on_support(&self, y: &[f64], support: &HiSupport, out: &mut [f64]) {
        let mu = self.mu();
        let mut pos = 0;
        let mut rotated = vec![0.0; mu];
        let mut block_out = vec![0.0; self.n()];
        for active in support.blocks() {
            let k = active.block;
            rotated[..mu - k].copy_from_slice(&y[k..]);
            rotated[mu - k..].copy_from_slice(&y[..k]);
            match &self.codebook {
                Codebook::Identity(_) => {
                    for &j in &active.entries {
                        out[pos] = self
                            .spread
                            .column(j)
                            .iter()
                            .zip(&rotated)
                            .map(|(a, b)| a * b)
                            .sum();
                        pos += 1;
                    }
                }
                codebook => {
                    let uz: Vec<f64> = self
                        .spread
                        .column_iter()
                        .map(|c| c.iter().zip(&rotated).map(|(a, b)| a * b).sum())
                        .collect();
                    codebook.adjoint(&uz, &mut block_out);
                    for &j in &active.entries {
                        out[pos] = block_out[j];
                        pos += 1;
                    }
                }
            }
        }
    }
}

/// Multi-user, multi-antenna operator: `y_j = Σ_i d_{j,i} C_i(W_i)`.
#[derive(Clone, Debug)]
pub struct DemixOp {
    mixing: DMatrix<f64>,
    users: Vec<BlindConvOp>,
}

impl DemixOp {
    /// `mixing` is `D` (M × N); one operator per user, all with equal `μ` and `n`.
    pub fn new(mixing: DMatrix<f64>, users: Vec<BlindConvOp>) -> Result<Self> {
        if mixing.nrows() == 0 {
            return Err(Error::Config(
                "mixing matrix needs at least one antenna".to_string(),
            ));
        }
        check_len("mixing columns vs users", mixing.ncols(), users.len())?;
        let first = users
            .first()
            .ok_or_else(|| Error::Config("demixing needs at least one user".to_string()))?;
        let shape = first.shape();
        for u in &users[1..] {
            if u.shape() != shape {
                return Err(Error::DimensionMismatch {
                    context: "user operator shape",
                    expected: shape.len(),
                    actual: u.shape().len(),
                });
            }
        }
        if mixing.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixing matrix"));
        }
        Ok(Self { mixing, users })
    }

    pub fn antennas(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn users(&self) -> &[BlindConvOp] {
        &self.users
    }

    pub fn mu(&self) -> usize {
        self.users[0].mu()
    }

    /// Output is row-major `M × μ`.
    pub fn apply(&self, w: &HiSparseVector) -> Result<Vec<f64>> {
        measure(self, w)
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<HiSparseVector> {
        back_project(self, y)
    }

    /// `Σ_j d_{j,i} Y_j` for user `i`.
    fn combine_rows(&self, y: &[f64], user: usize) -> Vec<f64> {
        let mu = self.mu();
        let mut z = vec![0.0; mu];
        for (j, row) in y.chunks_exact(mu).enumerate() {
            let d = self.mixing[(j, user)];
            for (zi, &yi) in z.iter_mut().zip(row) {
                *zi += d * yi;
            }
        }
        z
    }
}

impl MeasurementOperator for DemixOp {
    fn signal_shape(&self) -> BlockShape {
        BlockShape::three_level(self.users.len(), self.mu(), self.users[0].n())
    }

    fn measurement_len(&self) -> usize {
        self.antennas() * self.mu()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mu = self.mu();
        let user_len = self.signal_shape().user_len();
        out.fill(0.0);
        let mut conv = vec![0.0; mu];
        for (i, (op, wi)) in self.users.iter().zip(x.chunks_exact(user_len)).enumerate() {
            if wi.iter().all(|&v| v == 0.0) {
                continue;
            }
            op.apply_into(wi, &mut conv);
            for (j, row) in out.chunks_exact_mut(mu).enumerate() {
                let d = self.mixing[(j, i)];
                for (o, &c) in row.iter_mut().zip(&conv) {
                    *o += d * c;
                }
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let user_len = self.signal_shape().user_len();
        for (i, (op, block)) in self
            .users
            .iter()
            .zip(out.chunks_exact_mut(user_len))
            .enumerate()
        {
            let z = self.combine_rows(y, i);
            op.adjoint_into(&z, block);
        }
    }

    fn adjoint_on_support(&self, y: &[f64], support: &HiSupport, out: &mut [f64]) {
        let mut pos = 0;
        for user in support.active_users() {
            let blocks: Vec<_> = support
                .blocks()
                .iter()
                .filter(|b| b.user == user)
                .map(|b| crate::hier_sparse::ActiveBlock {
                    user: 0,
                    block: b.block,
                    entries: b.entries.clone(),
                })
                .collect();
            let op = &self.users[user];
            let local = HiSupport::new(op.shape(), Depth::Two, blocks)
                .expect("sub-support of a valid support is valid");
            let count = local.cardinality();
            let z = self.combine_rows(y, user);
            op.adjoint_on_support(&z, &local, &mut out[pos..pos + count]);
            pos += count;
        }
    }
}

/// Identity on `ℝ^{len}`, viewed as a measurement operator on block vectors.
#[derive(Clone, Copy, Debug)]
pub struct IdentityOperator {
    shape: BlockShape,
}

impl IdentityOperator {
    pub fn new(shape: BlockShape) -> Self {
        Self { shape }
    }
}

impl MeasurementOperator for IdentityOperator {
    fn signal_shape(&self) -> BlockShape {
        self.shape
    }

    fn measurement_len(&self) -> usize {
        self.shape.len()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// An explicit matrix acting on flat block vectors.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    shape: BlockShape,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>, shape: BlockShape) -> Result<Self> {
        check_len("dense operator columns", shape.len(), matrix.ncols())?;
        Ok(Self { matrix, shape })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl MeasurementOperator for DenseOperator {
    fn signal_shape(&self) -> BlockShape {
        self.shape
    }

    fn measurement_len(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.matrix.column(j).iter()) {
                    *o += a * xj;
                }
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self
                .matrix
                .column(j)
                .iter()
                .zip(y)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
}

/// Leading singular pair of the `μ × n` matricization of a lifted vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneFactors {
    /// Filter estimate, carrying the singular value.
    pub h: Vec<f64>,
    /// Unit-norm message estimate; its largest-magnitude entry is positive.
    pub b: Vec<f64>,
    pub singular_value: f64,
    /// Set when the top two singular values coincide to relative 1e-6.
    pub ambiguous: bool,
    pub converged: bool,
    pub iterations: usize,
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
const TIE_TOL: f64 = 1e-6;

struct PowerResult {
    v: Vec<f64>,
    sigma: f64,
    converged: bool,
    iterations: usize,
}

fn mat_vec(rows: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    rows.chunks_exact(n)
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(rows: &[f64], n: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (r, &ui) in rows.chunks_exact(n).zip(u) {
        for (o, &a) in out.iter_mut().zip(r) {
            *o += a * ui;
        }
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Power iteration on `MᵀM`, starting from the heaviest row.
fn power_iteration(rows: &[f64], n: usize) -> PowerResult {
    let mut best = (0, -1.0);
    for (i, r) in rows.chunks_exact(n).enumerate() {
        let e: f64 = r.iter().map(|x| x * x).sum();
        if e > best.1 {
            best = (i, e);
        }
    }
    let mut v = rows[best.0 * n..(best.0 + 1) * n].to_vec();
    if normalize(&mut v) == 0.0 {
        return PowerResult {
            v,
            sigma: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut sigma = 0.0;
    for it in 1..=POWER_MAX_ITERS {
        let u = mat_vec(rows, n, &v);
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut next = mat_t_vec(rows, n, &u);
        if normalize(&mut next) == 0.0 {
            return PowerResult {
                v,
                sigma,
                converged: true,
                iterations: it,
            };
        }
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if change <= POWER_TOL {
            let u = mat_vec(rows, n, &v);
            sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            return PowerResult {
                v,
                sigma,
                converged: true,
                iterations: it,
            };
        }
    }
    PowerResult {
        v,
        sigma,
        converged: false,
        iterations: POWER_MAX_ITERS,
    }
}

/// Best rank-one approximation `h ⊗ b` of a two-level lifted vector.
pub fn rank_one_factor(w: &HiSparseVector) -> Result<RankOneFactors> {
    let shape = w.shape();
    if shape.users != 1 {
        return Err(Error::Unsupported(
            "rank-one factorization of a multi-user vector".to_string(),
        ));
    }
    if w.norm_sq() == 0.0 {
        return Err(Error::ZeroInput("rank-one factorization"));
    }
    let n = shape.block_len;
    let rows = w.data();
    let top = power_iteration(rows, n);
    let mut b = top.v;
    let lead = b
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |acc, (j, &x)| {
            if x.abs() > acc.1 {
                (j, x.abs())
            } else {
                acc
            }
        })
        .0;
    if b[lead] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let h = mat_vec(rows, n, &b);

    let deflated: Vec<f64> = rows
        .chunks_exact(n)
        .zip(&h)
        .flat_map(|(r, &hk)| r.iter().zip(&b).map(move |(a, bj)| a - hk * bj))
        .collect();
    let second = power_iteration(&deflated, n);
    let ambiguous = top.sigma > 0.0 && second.sigma >= top.sigma * (1.0 - TIE_TOL);

    Ok(RankOneFactors {
        h,
        b,
        singular_value: top.sigma,
        ambiguous,
        converged: top.converged,
        iterations: top.iterations,
    })
}

/// Serialized codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum CodebookRecord {
    Identity {
        n: usize,
    },
    Dense {
        rows: usize,
        cols: usize,
        entries: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindConvRecord {
    pub mu: usize,
    pub m: usize,
    pub n: usize,
    /// `U`, row-major.
    pub spread: Vec<f64>,
    pub codebook: CodebookRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorRecord {
    BlindConv(BlindConvRecord),
    Demix {
        antennas: usize,
        user_count: usize,
        /// `D`, row-major.
        mixing: Vec<f64>,
        users: Vec<BlindConvRecord>,
    },
}

/// Self-describing operator container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorFile {
    pub format: String,
    pub version: u32,
    pub operator: OperatorRecord,
}

pub const OPERATOR_FORMAT: &str = "hihtp-operator";
pub const OPERATOR_VERSION: u32 = 1;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<DMatrix<f64>> {
    check_len("serialized matrix", rows * cols, entries.len())?;
    Ok(DMatrix::from_row_slice(rows, cols, entries))
}

impl BlindConvOp {
    pub fn to_record(&self) -> Result<BlindConvRecord> {
        let codebook = match &self.codebook {
            Codebook::Identity(n) => CodebookRecord::Identity { n: *n },
            Codebook::Dense(a) => CodebookRecord::Dense {
                rows: a.nrows(),
                cols: a.ncols(),
                entries: row_major(a),
            },
            Codebook::Custom(_) => {
                return Err(Error::Unsupported(
                    "custom codebooks cannot be serialized".to_string(),
                ))
            }
        };
        Ok(BlindConvRecord {
            mu: self.mu(),
            m: self.m(),
            n: self.n(),
            spread: row_major(&self.spread),
            codebook,
        })
    }

    pub fn from_record(rec: &BlindConvRecord) -> Result<Self> {
        let spread = from_row_major(rec.mu, rec.m, &rec.spread)?;
        let codebook = match &rec.codebook {
            CodebookRecord::Identity { n } => Codebook::Identity(*n),
            CodebookRecord::Dense {
                rows,
                cols,
                entries,
            } => Codebook::Dense(from_row_major(*rows, *cols, entries)?),
        };
        let op = Self::new(spread, codebook)?;
        check_len("serialized message length", rec.n, op.n())?;
        Ok(op)
    }
}

impl DemixOp {
    pub fn to_record(&self) -> Result<OperatorRecord> {
        Ok(OperatorRecord::Demix {
            antennas: self.antennas(),
            user_count: self.user_count(),
            mixing: row_major(&self.mixing),
            users: self
                .users
                .iter()
                .map(BlindConvOp::to_record)
                .collect::<Result<_>>()?,
        })
    }
}

/// An operator loaded from disk.
#[derive(Clone, Debug)]
pub enum AnyOperator {
    BlindConv(BlindConvOp),
    Demix(DemixOp),
}

impl AnyOperator {
    pub fn as_measurement(&self) -> &dyn MeasurementOperator {
        match self {
            AnyOperator::BlindConv(op) => op,
            AnyOperator::Demix(op) => op,
        }
    }

    pub fn to_file(&self) -> Result<OperatorFile> {
        let operator = match self {
            AnyOperator::BlindConv(op) => OperatorRecord::BlindConv(op.to_record()?),
            AnyOperator::Demix(op) => op.to_record()?,
        };
        Ok(OperatorFile {
            format: OPERATOR_FORMAT.to_string(),
            version: OPERATOR_VERSION,
            operator,
        })
    }

    pub fn from_file(file: &OperatorFile) -> Result<Self> {
        if file.format != OPERATOR_FORMAT || file.version != OPERATOR_VERSION {
            return Err(Error::Config(format!(
                "unsupported operator container {} v{}",
                file.format, file.version
            )));
        }
        match &file.operator {
            OperatorRecord::BlindConv(rec) => {
                Ok(AnyOperator::BlindConv(BlindConvOp::from_record(rec)?))
            }
            OperatorRecord::Demix {
                antennas,
                user_count,
                mixing,
                users,
            } => {
                let d = from_row_major(*antennas, *user_count, mixing)?;
                let users = users
                    .iter()
                    .map(BlindConvOp::from_record)
                    .collect::<Result<_>>()?;
                Ok(AnyOperator::Demix(DemixOp::new(d, users)?))
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file()?)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: OperatorFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }
}

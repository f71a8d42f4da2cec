//! Hierarchical hard-thresholding pursuit.
//!
//! Each iteration takes a gradient step from the current iterate,
//! identifies a support by projecting onto the hierarchically sparse set, and
//! re-fits the measurements by least squares restricted to that support.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hier_sparse::{project, HiSparseVector, HiSupport, SparsityLevels};
use crate::operators::MeasurementOperator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Gradient step size `τ`, constant over iterations.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop as soon as the identified support repeats.
    pub support_stall_stop: bool,
    /// Inner solve stops once `‖restricted gradient‖ ≤ ls_tol · ‖y‖`.
    pub ls_tol: f64,
    pub ls_max_iters: usize,
    /// Stop once `‖y − A x‖ ≤ rel_err_target · ‖y‖`. Falls back to `ls_tol`.
    pub rel_err_target: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 10,
            support_stall_stop: true,
            ls_tol: 1e-10,
            ls_max_iters: 200,
            rel_err_target: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.step_size) {
            return Err(Error::Config(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        if !positive(self.ls_tol) {
            return Err(Error::Config(format!(
                "ls_tol {} must be positive",
                self.ls_tol
            )));
        }
        if matches!(self.rel_err_target, Some(t) if !positive(t)) {
            return Err(Error::Config("rel_err_target must be positive".to_string()));
        }
        if self.max_iters == 0 || self.ls_max_iters == 0 {
            return Err(Error::Config(
                "iteration caps must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SupportStalled,
    MaxIters,
    ResidualTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub estimate: HiSparseVector,
    /// Support identified in each completed iteration.
    pub support_history: Vec<HiSupport>,
    /// `‖y − A xᵗ‖` after each completed iteration.
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// False if any inner least-squares solve hit its iteration cap.
    pub ls_converged: bool,
}

/// Outcome of a support-restricted least-squares solve.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedSolution {
    pub estimate: HiSparseVector,
    pub converged: bool,
    pub iterations: usize,
    /// `‖y − A x‖` at the start and after every inner iteration.
    pub residual_norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `A` restricted to the columns of a support, acting on compact vectors.
struct RestrictedOperator<'a> {
    op: &'a dyn MeasurementOperator,
    support: &'a HiSupport,
    indices: Vec<usize>,
    full: Vec<f64>,
}

impl<'a> RestrictedOperator<'a> {
    fn new(op: &'a dyn MeasurementOperator, support: &'a HiSupport) -> Self {
        Self {
            op,
            support,
            indices: support.flat_indices(),
            full: vec![0.0; op.signal_shape().len()],
        }
    }

    fn apply(&mut self, z: &[f64], out: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(z) {
            self.full[i] = v;
        }
        self.op.apply_into(&self.full, out);
        for &i in &self.indices {
            self.full[i] = 0.0;
        }
    }

    fn adjoint(&self, r: &[f64], out: &mut [f64]) {
        self.op.adjoint_on_support(r, self.support, out);
    }
}

/// CGLS on the columns selected by `support`, starting from `start`.
fn cgls(
    y: &[f64],
    op: &dyn MeasurementOperator,
    support: &HiSupport,
    start: &[f64],
    cfg: &SolverConfig,
) -> (Vec<f64>, bool, usize, Vec<f64>) {
    let mut a = RestrictedOperator::new(op, support);
    let k = a.indices.len();
    let mut z: Vec<f64> = a.indices.iter().map(|&i| start[i]).collect();
    let mut r = vec![0.0; y.len()];
    a.apply(&z, &mut r);
    for (ri, yi) in r.iter_mut().zip(y) {
        *ri = yi - *ri;
    }
    let mut residuals = vec![norm(&r)];
    let tol = cfg.ls_tol * norm(y);

    let mut g = vec![0.0; k];
    a.adjoint(&r, &mut g);
    let mut p = g.clone();
    let mut gamma = dot(&g, &g);
    let mut q = vec![0.0; y.len()];
    let mut iters = 0;
    let mut converged = gamma.sqrt() <= tol;
    while !converged && iters < cfg.ls_max_iters {
        a.apply(&p, &mut q);
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for (zi, pi) in z.iter_mut().zip(&p) {
            *zi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        iters += 1;
        residuals.push(norm(&r));
        a.adjoint(&r, &mut g);
        let next = dot(&g, &g);
        converged = next.sqrt() <= tol;
        let beta = next / gamma;
        gamma = next;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi = gi + beta * *pi;
        }
    }

    let mut full = vec![0.0; op.signal_shape().len()];
    for (&i, &v) in a.indices.iter().zip(&z) {
        full[i] = v;
    }
    (full, converged, iters, residuals)
}

fn check_inputs(
    y: &[f64],
    op: &dyn MeasurementOperator,
    levels: &SparsityLevels,
    cfg: &SolverConfig,
) -> Result<()> {
    check_len("measurements", op.measurement_len(), y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurements"));
    }
    levels.validate(&op.signal_shape())?;
    cfg.validate()
}

/// Least squares over vectors supported on `support`, solved matrix-free.
pub fn restricted_least_squares(
    y: &[f64],
    op: &dyn MeasurementOperator,
    support: &HiSupport,
    cfg: &SolverConfig,
) -> Result<RestrictedSolution> {
    check_len("measurements", op.measurement_len(), y.len())?;
    cfg.validate()?;
    let shape = op.signal_shape();
    if support.shape() != shape {
        return Err(Error::OutOfRange(
            "support shape differs from operator shape".to_string(),
        ));
    }
    if support.is_empty() {
        return Err(Error::Config(
            "least squares on an empty support".to_string(),
        ));
    }
    let start = vec![0.0; shape.len()];
    let (x, converged, iterations, residual_norms) = cgls(y, op, support, &start, cfg);
    let estimate = HiSparseVector::new(shape, x)?.with_support(support.clone())?;
    Ok(RestrictedSolution {
        estimate,
        converged,
        iterations,
        residual_norms,
    })
}

/// Runs HiHTP from `x⁰ = 0` and returns the last iterate.
///
/// Three-level recovery is selected by giving `levels` an active-user budget.
pub fn hihtp_solve(
    y: &[f64],
    op: &dyn MeasurementOperator,
    levels: &SparsityLevels,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_inputs(y, op, levels, cfg)?;
    let shape = op.signal_shape();
    let len = shape.len();
    let y_norm = norm(y);
    let residual_tol = cfg.rel_err_target.unwrap_or(cfg.ls_tol) * y_norm;

    let mut x = vec![0.0; len];
    let mut residual = y.to_vec();
    let mut grad = vec![0.0; len];
    let mut applied = vec![0.0; y.len()];
    let mut support_history: Vec<HiSupport> = Vec::new();
    let mut residual_norms = Vec::new();
    let mut ls_converged = true;
    let mut estimate_support = None;
    let mut stop_reason = StopReason::MaxIters;

    for _ in 0..cfg.max_iters {
        op.adjoint_into(&residual, &mut grad);
        let step: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(xi, gi)| xi + cfg.step_size * gi)
            .collect();
        let (_, support) = project(&HiSparseVector::new(shape, step.clone())?, levels)?;

        if cfg.support_stall_stop && support_history.last() == Some(&support) {
            stop_reason = StopReason::SupportStalled;
            break;
        }

        let (next, converged, _, _) = cgls(y, op, &support, &step, cfg);
        ls_converged &= converged;
        x = next;
        op.apply_into(&x, &mut applied);
        for ((ri, yi), ai) in residual.iter_mut().zip(y).zip(&applied) {
            *ri = yi - ai;
        }
        let r_norm = norm(&residual);
        residual_norms.push(r_norm);
        estimate_support = Some(support.clone());
        support_history.push(support);

        if r_norm <= residual_tol {
            stop_reason = StopReason::ResidualTarget;
            break;
        }
    }

    let mut estimate = HiSparseVector::new(shape, x)?;
    if let Some(support) = estimate_support {
        estimate = estimate.with_support(support)?;
    }
    Ok(SolveReport {
        estimate,
        iterations: support_history.len(),
        support_history,
        residual_norms,
        stop_reason,
        ls_converged,
    })
}

/// `‖estimate − truth‖ / ‖truth‖` over the lifted vectors.
pub fn relative_error(estimate: &HiSparseVector, truth: &HiSparseVector) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::DimensionMismatch {
            context: "relative error",
            expected: truth.shape().len(),
            actual: estimate.shape().len(),
        });
    }
    let t = truth.norm();
    if t == 0.0 {
        return Err(Error::ZeroInput("relative error reference"));
    }
    let diff = estimate
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / t)
}

//! Pursuit solvers over the convolutional dictionary: global OMP, the
//! bi-level consensus ADMM and the locally operating iterative soft
//! thresholding, plus the shared thresholding and least-squares primitives.

mod admm;
mod ist;
mod omp;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::conv_dict::{norm2, ConvOperator, GlobalCode};
use crate::error::{Error, Result};

pub use admm::{admm_bp, admm_bp_observed, AdmmConfig};
pub use ist::{ist_bp, ist_bp_observed, ist_step_size, IstConfig};
pub use omp::{least_squares_on_support, omp, OmpStop};

/// Which solver produced a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Omp,
    Admm,
    Ist,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Omp => "omp",
            Solver::Admm => "admm",
            Solver::Ist => "ist",
        })
    }
}

/// ℓ1 (soft) or ℓ0 (hard) thresholding in the local coding step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    #[default]
    Soft,
    Hard,
}

/// Geometric decay of λ towards a floor, for approaching the noiseless BP
/// solution with a Lagrangian solver.
///
/// λ is multiplied by `decay` after every iteration. With `gate_tol` set,
/// only after iterations whose iterate already satisfies the lasso
/// certificate for the current λ with that relative slack. IST needs the
/// gate: ungated, its iterates fall behind the solution path and freeze at a
/// non-minimal interpolant once λ reaches the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Continuation {
    /// Factor in (0, 1).
    pub decay: f64,
    /// λ₀ as a fraction of `‖DᵀY‖∞`.
    pub start_fraction: f64,
    pub floor: f64,
    pub gate_tol: Option<f64>,
}

impl Default for Continuation {
    fn default() -> Self {
        Self {
            decay: 0.97,
            start_fraction: 0.1,
            floor: 1e-10,
            gate_tol: None,
        }
    }
}

impl Continuation {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("continuation decay must lie in (0, 1)"));
        }
        if !(self.start_fraction > 0.0) || !(self.floor >= 0.0) {
            return Err(Error::invalid("continuation start and floor must be positive"));
        }
        if self.gate_tol.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::invalid("continuation gate tolerance must be positive"));
        }
        Ok(())
    }
}

/// λ schedule shared by the Lagrangian solvers.
#[derive(Clone, Debug)]
pub(crate) struct LambdaSchedule {
    current: f64,
    target: f64,
    decay: f64,
    gate_tol: Option<f64>,
}

impl LambdaSchedule {
    pub(crate) fn new(lambda: f64, continuation: Option<&Continuation>, max_corr: f64) -> Self {
        match continuation {
            Some(c) => {
                let start = (c.start_fraction * max_corr).max(c.floor);
                Self {
                    current: start,
                    target: c.floor,
                    decay: c.decay,
                    gate_tol: c.gate_tol,
                }
            }
            None => Self {
                current: lambda,
                target: lambda,
                decay: 1.0,
                gate_tol: None,
            },
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.current
    }

    pub(crate) fn settled(&self) -> bool {
        self.current <= self.target
    }

    pub(crate) fn gate_tol(&self) -> Option<f64> {
        self.gate_tol
    }

    pub(crate) fn advance(&mut self) {
        self.current = (self.current * self.decay).max(self.target);
    }
}

/// `sign(x)·max(|x| − t, 0)`.
#[inline]
pub fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `x·1[|x| > t]`.
#[inline]
pub fn hard(x: f64, t: f64) -> f64 {
    if x.abs() > t {
        x
    } else {
        0.0
    }
}

pub fn soft_threshold(x: &[f64], t: f64) -> Vec<f64> {
    x.iter().map(|&v| soft(v, t)).collect()
}

pub fn hard_threshold(x: &[f64], t: f64) -> Vec<f64> {
    x.iter().map(|&v| hard(v, t)).collect()
}

/// Lasso optimality check for `½‖Y − DΓ‖² + λ‖Γ‖1`.
///
/// With `g = Dᵀ(Y − DΓ)`: off the support `|g_j| ≤ λ`, on it
/// `g_j = λ·sign(Γ_j)`. Both are tested up to `λ·tol + atol`, where `atol`
/// scales with `‖DᵀY‖∞` so that λ → 0 stays checkable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LassoCertificate {
    pub lambda: f64,
    pub tol: f64,
    pub atol: f64,
    pub max_abs_correlation: f64,
    pub support_violation: f64,
    pub holds: bool,
}

/// Relative absolute floor of the certificate, times `‖DᵀY‖∞`.
pub const CERTIFICATE_ATOL: f64 = 1e-12;

pub fn lasso_certificate(
    op: &ConvOperator,
    y: &[f64],
    code: &[f64],
    lambda: f64,
    tol: f64,
) -> Result<LassoCertificate> {
    let corr_y = op.apply_adjoint(y)?;
    let scale = corr_y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let fit = op.apply_dense(code)?;
    let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
    let g = op.apply_adjoint(&r)?;
    Ok(certificate_from_gradient(
        &g,
        code,
        lambda,
        tol,
        CERTIFICATE_ATOL * scale,
    ))
}

pub(crate) fn certificate_from_gradient(g: &[f64], code: &[f64], lambda: f64, tol: f64, atol: f64) -> LassoCertificate {
    let mut max_abs: f64 = 0.0;
    let mut violation: f64 = 0.0;
    for (gj, cj) in g.iter().zip(code) {
        max_abs = max_abs.max(gj.abs());
        if *cj != 0.0 {
            violation = violation.max((gj - lambda * cj.signum()).abs());
        }
    }
    let slack = lambda * tol + atol;
    LassoCertificate {
        lambda,
        tol,
        atol,
        max_abs_correlation: max_abs,
        support_violation: violation,
        holds: max_abs <= lambda + slack && violation <= slack,
    }
}

/// One row of a solver trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elapsed_s: f64,
    pub objective: f64,
    pub residual_l2: f64,
    pub consensus_gap: Option<f64>,
    pub lambda: Option<f64>,
}

/// What an observer sees after each iteration.
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub elapsed: std::time::Duration,
    pub code: &'a [f64],
}

/// Output of any solver.
#[derive(Clone, Debug, PartialEq)]
pub struct PursuitResult {
    pub solver: Solver,
    pub code: GlobalCode,
    /// Sorted non-zero indices of `code`.
    pub support: Vec<usize>,
    /// `‖Y − D·code‖2`, recomputed from the returned code.
    pub residual_l2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rank_deficient: bool,
    /// Set for the hard-threshold variants.
    pub no_convergence_guarantee: bool,
    pub certificate: Option<LassoCertificate>,
    pub trace: Option<Vec<TraceRecord>>,
}

impl PursuitResult {
    pub(crate) fn finish(
        op: &ConvOperator,
        y: &[f64],
        solver: Solver,
        code: GlobalCode,
        iterations: usize,
        converged: bool,
    ) -> Result<Self> {
        let fit = op.apply(&code)?;
        let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
        Ok(Self {
            solver,
            support: code.support(),
            residual_l2: norm2(&r),
            code,
            iterations,
            converged,
            rank_deficient: false,
            no_convergence_guarantee: false,
            certificate: None,
            trace: None,
        })
    }
}

impl Serialize for PursuitResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<(usize, f64)> = self.code.iter().collect();
        let mut st = s.serialize_struct("PursuitResult", 11)?;
        st.serialize_field("solver", &self.solver)?;
        st.serialize_field("code_len", &self.code.len())?;
        st.serialize_field("code", &entries)?;
        st.serialize_field("support", &self.support)?;
        st.serialize_field("residual_l2", &self.residual_l2)?;
        st.serialize_field("iterations", &self.iterations)?;
        st.serialize_field("converged", &self.converged)?;
        st.serialize_field("rank_deficient", &self.rank_deficient)?;
        st.serialize_field("no_convergence_guarantee", &self.no_convergence_guarantee)?;
        st.serialize_field("certificate", &self.certificate)?;
        st.serialize_field("trace", &self.trace)?;
        st.end()
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub(crate) fn check_signal(op: &ConvOperator, y: &[f64]) -> Result<()> {
    if y.len() != op.signal_len() {
        return Err(Error::LengthMismatch {
            what: "signal",
            expected: op.signal_len(),
            got: y.len(),
        });
    }
    if let Some(k) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("signal sample {k} is not finite")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(soft_threshold(&[2.0, -0.5], 1.0), vec![1.0, 0.0]);
        assert_eq!(soft_threshold(&[2.0, -0.5, 0.0], 0.0), vec![2.0, -0.5, 0.0]);
        assert_eq!(hard_threshold(&[2.0, -0.5], 1.0), vec![2.0, 0.0]);
        assert_eq!(hard_threshold(&[2.0, -0.5], 0.0), vec![2.0, -0.5]);
    }

    proptest! {
        // soft(x, t) is the prox of t|·|: 0 ∈ z − x + t·∂|z| per coordinate.
        #[test]
        fn soft_threshold_is_l1_prox(x in prop::collection::vec(-10.0f64..10.0, 1..20), t in 0.0f64..5.0) {
            for (z, xv) in soft_threshold(&x, t).into_iter().zip(&x) {
                if z != 0.0 {
                    prop_assert!((xv - z - t * z.signum()).abs() < 1e-12);
                } else {
                    prop_assert!(xv.abs() <= t + 1e-12);
                }
            }
        }
    }

    #[test]
    fn schedule_reaches_floor() {
        let c = Continuation::default();
        let mut s = LambdaSchedule::new(0.0, Some(&c), 10.0);
        assert!((s.value() - 1.0).abs() < 1e-15);
        let mut steps = 0;
        while !s.settled() {
            s.advance();
            steps += 1;
        }
        assert_eq!(s.value(), 1e-10);
        assert!(steps > 600 && steps < 800);
    }
}

use std::time::Instant;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    certificate_from_gradient, check_signal, hard, max_abs, soft, Continuation, LambdaSchedule, PursuitResult,
    Snapshot, Solver, ThresholdMode, TraceRecord, CERTIFICATE_ATOL,
};
use crate::conv_dict::{build_stripe_dictionary, norm2, ConvOperator, GlobalCode, LocalDictionary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Penalty. Under continuation this is the value at the starting λ and
    /// ρ then shrinks in proportion to λ.
    pub rho: f64,
    pub lambda: f64,
    pub max_iters: usize,
    /// Bound on `max_i ‖Qγ_i − α_i‖∞` and `max_i ‖S_iΓ − γ_i‖∞`.
    pub tol_primal: f64,
    /// Bound on `ρ·max(‖ΔΓ‖∞, ‖Δα‖∞)` between iterations.
    pub tol_dual: f64,
    /// Relative slack of the lasso certificate.
    pub cert_tol: f64,
    pub mode: ThresholdMode,
    pub continuation: Option<Continuation>,
    pub trace: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda: 0.0,
            max_iters: 5000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            cert_tol: 1e-4,
            mode: ThresholdMode::Soft,
            continuation: None,
            trace: false,
        }
    }
}

impl AdmmConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0 && self.cert_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if let Some(c) = &self.continuation {
            c.validate()?;
        }
        Ok(())
    }
}

/// Factored stripe system `Z = ρQᵀQ + (1/n)ΩᵀΩ + ρI = ρD + (1/n)ΩᵀΩ`.
///
/// With `M = nρI + ΩD⁻¹Ωᵀ` and `K = D⁻¹ΩᵀM⁻¹`, the stripe update
/// `Z⁻¹((1/n)Ωᵀx + ρv)` equals `D⁻¹v + K(x − ΩD⁻¹v)`. Only the n × n
/// matrix `M` is factored, and nothing is divided by ρ, so the update stays
/// accurate when ρ is tiny.
pub(crate) struct StripeSystem {
    d_inv: Vec<f64>,
    /// `ΩD⁻¹`.
    od: DMatrix<f64>,
    /// `ΩD⁻¹Ωᵀ`.
    odo: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl StripeSystem {
    pub(crate) fn new(local: &LocalDictionary, rho: f64) -> Result<Self> {
        let n = local.n();
        let m = local.m();
        let omega = build_stripe_dictionary(local).omega().clone();
        let w = omega.ncols();
        let centre = (n - 1) * m;
        let d_inv: Vec<f64> = (0..w)
            .map(|c| if (centre..centre + m).contains(&c) { 0.5 } else { 1.0 })
            .collect();
        let mut od = omega.clone();
        for (c, s) in d_inv.iter().enumerate() {
            od.column_mut(c).scale_mut(*s);
        }
        let odo = &od * omega.transpose();
        let mut sys = Self {
            d_inv,
            od,
            odo,
            k: DMatrix::zeros(w, n),
        };
        sys.set_rho(rho)?;
        Ok(sys)
    }

    pub(crate) fn set_rho(&mut self, rho: f64) -> Result<()> {
        let n = self.odo.nrows();
        let mut inner = self.odo.clone();
        for d in 0..n {
            inner[(d, d)] += n as f64 * rho;
        }
        let chol = inner
            .cholesky()
            .ok_or_else(|| Error::invalid("stripe system is not positive definite"))?;
        // K = (M⁻¹ ΩD⁻¹)ᵀ since M is symmetric.
        self.k = chol.solve(&self.od).transpose();
        Ok(())
    }

    /// Stripe update for `cols` stripes: `v` holds W-vectors, `x` the
    /// matching n-sample patches, `out` receives W-vectors.
    pub(crate) fn solve_block(&self, v: &[f64], x: &[f64], out: &mut [f64], cols: usize) {
        let w = self.d_inv.len();
        let n = self.odo.nrows();
        let vv = DMatrixView::from_slice(v, w, cols);
        let mut t = DMatrix::from_column_slice(n, cols, x);
        t.gemm(-1.0, &self.od, &vv, 1.0);
        for (oc, vc) in out.chunks_exact_mut(w).zip(v.chunks_exact(w)) {
            for ((o, vv), d) in oc.iter_mut().zip(vc).zip(&self.d_inv) {
                *o = d * vv;
            }
        }
        let mut ov = DMatrixViewMut::from_slice(out, w, cols);
        ov.gemm(1.0, &self.k, &t, 1.0);
    }
}

/// Stripes per parallel work item of the stripe projection.
const STRIPE_BLOCK: usize = 32;

/// Global column base of position `t` in stripe `i`.
#[inline]
fn stripe_base(i: usize, t: usize, n: usize, m: usize, big_n: usize) -> usize {
    ((i + big_n + t - (n - 1)) % big_n) * m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn admm_bp(op: &ConvOperator, y: &[f64], cfg: &AdmmConfig) -> Result<PursuitResult> {
    admm_bp_observed(op, y, cfg, |_| {})
}

/// Bi-level consensus ADMM for `½‖Y − DΓ‖² + λ‖Γ‖1`.
///
/// Each stripe `i` keeps its own stripe code `γ_i`, a local code `α_i` tied
/// to its centre and the duals `u_i`, `ū_i`. The returned code is the
/// concatenation of the `α_i`, which is exactly sparse. `observe` sees that
/// code after every iteration.
pub fn admm_bp_observed<F>(op: &ConvOperator, y: &[f64], cfg: &AdmmConfig, mut observe: F) -> Result<PursuitResult>
where
    F: FnMut(&Snapshot<'_>),
{
    check_signal(op, y)?;
    op.require_stripe_geometry()?;
    cfg.validate()?;
    let start = Instant::now();
    let big_n = op.signal_len();
    let n = op.patch_len();
    let m = op.filters();
    let shifts = op.stripe_shifts();
    let w = op.stripe_len();
    let centre = (n - 1) * m;
    let hard_mode = cfg.mode == ThresholdMode::Hard;

    let corr_y = op.apply_adjoint(y)?;
    let scale = max_abs(&corr_y);
    let atol = CERTIFICATE_ATOL * scale;
    let mut schedule = LambdaSchedule::new(cfg.lambda, cfg.continuation.as_ref(), scale);

    if scale == 0.0 {
        let code = GlobalCode::zeros(op.code_len());
        let mut res = PursuitResult::finish(op, y, Solver::Admm, code, 0, true)?;
        res.no_convergence_guarantee = hard_mode;
        if !hard_mode {
            res.certificate = Some(certificate_from_gradient(
                &corr_y,
                &vec![0.0; op.code_len()],
                schedule.value(),
                cfg.cert_tol,
                0.0,
            ));
        }
        res.trace = cfg.trace.then(Vec::new);
        return Ok(res);
    }

    // Under continuation ρ shrinks with λ so the threshold λ/ρ stays fixed.
    let lam_start = schedule.value();
    let rho_at = |lam: f64| {
        if cfg.continuation.is_some() {
            cfg.rho * lam / lam_start
        } else {
            cfg.rho
        }
    };
    let mut rho = rho_at(lam_start);
    let mut system = StripeSystem::new(op.local(), rho)?;
    let ext = op.extended(y);
    let mut patches = vec![0.0; big_n * n];
    for (i, c) in patches.chunks_exact_mut(n).enumerate() {
        c.copy_from_slice(&ext[i..i + n]);
    }

    let mut gamma = vec![0.0; big_n * w];
    let mut rhs = vec![0.0; big_n * w];
    let mut ubar = vec![0.0; big_n * w];
    let mut alpha = vec![0.0; big_n * m];
    let mut u = vec![0.0; big_n * m];
    let mut big_gamma = vec![0.0; big_n * m];
    let mut prev_alpha = alpha.clone();
    let mut prev_big_gamma = big_gamma.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut fit = vec![0.0; big_n];
    let mut grad = vec![0.0; op.code_len()];
    let avg = 1.0 / shifts as f64;

    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let lam = schedule.value();
        if rho_at(lam) != rho {
            rho = rho_at(lam);
            system.set_rho(rho)?;
        }

        // Local sparse coding.
        let thr = if hard_mode { (2.0 * lam / rho).sqrt() } else { lam / rho };
        for i in 0..big_n {
            for j in 0..m {
                let v = gamma[i * w + centre + j] + u[i * m + j];
                alpha[i * m + j] = if hard_mode { hard(v, thr) } else { soft(v, thr) };
            }
        }

        // Stripe projection.
        {
            let (alpha, u, ubar, big_gamma, system, patches) = (&alpha, &u, &ubar, &big_gamma, &system, &patches);
            rhs.par_chunks_mut(w).enumerate().for_each(|(i, v)| {
                let ub = &ubar[i * w..(i + 1) * w];
                for t in 0..shifts {
                    let base = stripe_base(i, t, n, m, big_n);
                    for j in 0..m {
                        let p = t * m + j;
                        v[p] = big_gamma[base + j] + ub[p];
                    }
                }
                for j in 0..m {
                    v[centre + j] += alpha[i * m + j] - u[i * m + j];
                }
            });
            gamma
                .par_chunks_mut(w * STRIPE_BLOCK)
                .zip(rhs.par_chunks(w * STRIPE_BLOCK))
                .zip(patches.par_chunks(n * STRIPE_BLOCK))
                .for_each(|((g, v), x)| system.solve_block(v, x, g, v.len() / w));
        }

        // Global aggregation.
        big_gamma.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..big_n {
            for t in 0..shifts {
                let base = stripe_base(i, t, n, m, big_n);
                for j in 0..m {
                    let p = i * w + t * m + j;
                    big_gamma[base + j] += gamma[p] - ubar[p];
                }
            }
        }
        big_gamma.iter_mut().for_each(|v| *v *= avg);

        // Dual updates.
        let mut primal: f64 = 0.0;
        for i in 0..big_n {
            for j in 0..m {
                let d = gamma[i * w + centre + j] - alpha[i * m + j];
                u[i * m + j] += d;
                primal = primal.max(d.abs());
            }
            for t in 0..shifts {
                let base = stripe_base(i, t, n, m, big_n);
                for j in 0..m {
                    let p = i * w + t * m + j;
                    let d = big_gamma[base + j] - gamma[p];
                    ubar[p] += d;
                    primal = primal.max(d.abs());
                }
            }
        }
        let dual = rho * max_abs_diff(&big_gamma, &prev_big_gamma).max(max_abs_diff(&alpha, &prev_alpha));
        prev_big_gamma.copy_from_slice(&big_gamma);
        prev_alpha.copy_from_slice(&alpha);

        observe(&Snapshot {
            iteration: iter,
            elapsed: start.elapsed(),
            code: &alpha,
        });
        if cfg.trace {
            op.apply_into(&alpha, &mut fit);
            let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
            let rn = norm2(&r);
            let l1: f64 = alpha.iter().map(|v| v.abs()).sum();
            trace.push(TraceRecord {
                iteration: iter,
                elapsed_s: start.elapsed().as_secs_f64(),
                objective: 0.5 * rn * rn + lam * l1,
                residual_l2: rn,
                consensus_gap: Some(primal),
                lambda: Some(lam),
            });
        }

        if schedule.settled() {
            if primal < cfg.tol_primal && dual < cfg.tol_dual {
                if hard_mode {
                    converged = true;
                    break;
                }
                op.apply_into(&alpha, &mut fit);
                let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
                op.adjoint_into(&r, &mut grad);
                if certificate_from_gradient(&grad, &alpha, lam, cfg.cert_tol, atol).holds {
                    converged = true;
                    break;
                }
            }
        } else {
            let open = match schedule.gate_tol() {
                Some(t) if !hard_mode => {
                    op.apply_into(&alpha, &mut fit);
                    let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
                    op.adjoint_into(&r, &mut grad);
                    certificate_from_gradient(&grad, &alpha, lam, t, atol).holds
                }
                _ => true,
            };
            if open {
                schedule.advance();
            }
        }
    }

    let lam = schedule.value();
    let code = GlobalCode::from_dense(&alpha);
    let mut res = PursuitResult::finish(op, y, Solver::Admm, code, iterations, converged)?;
    res.no_convergence_guarantee = hard_mode;
    if !hard_mode {
        op.apply_into(&alpha, &mut fit);
        let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
        op.adjoint_into(&r, &mut grad);
        res.certificate = Some(certificate_from_gradient(&grad, &alpha, lam, cfg.cert_tol, atol));
    }
    res.trace = cfg.trace.then_some(trace);
    Ok(res)
}

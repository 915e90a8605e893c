use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    certificate_from_gradient, check_signal, hard, max_abs, soft, Continuation, LambdaSchedule, PursuitResult,
    Snapshot, Solver, ThresholdMode, TraceRecord, CERTIFICATE_ATOL,
};
use crate::conv_dict::{dot, norm2, ConvOperator, GlobalCode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IstConfig {
    pub lambda: f64,
    /// Step constant; `None` uses [`ist_step_size`].
    pub c: Option<f64>,
    pub max_iters: usize,
    /// Relative slack of the lasso certificate (soft mode) or bound on the
    /// largest coefficient change (hard mode).
    pub tol: f64,
    pub mode: ThresholdMode,
    pub continuation: Option<Continuation>,
    pub trace: bool,
}

impl Default for IstConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            c: None,
            max_iters: 5000,
            tol: 1e-6,
            mode: ThresholdMode::Soft,
            continuation: None,
            trace: false,
        }
    }
}

impl IstConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if let Some(c) = self.c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("step constant c must be positive"));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if let Some(c) = &self.continuation {
            c.validate()?;
        }
        Ok(())
    }
}

/// `1.05·‖D‖2²`, safely above the spectral norm.
pub fn ist_step_size(op: &ConvOperator) -> Result<f64> {
    Ok(1.05 * op.spectral_norm_sq(1e-6)?.value)
}

/// `g_i = D_Lᵀ r_i` for every cyclic patch `r_i` of `r`.
fn local_correlations(op: &ConvOperator, r: &[f64], ext: &mut Vec<f64>, g: &mut [f64]) {
    let n = op.patch_len();
    let m = op.filters();
    ext.clear();
    ext.extend_from_slice(r);
    ext.extend_from_slice(&r[..n - 1]);
    for (i, gi) in g.chunks_exact_mut(m).enumerate() {
        let patch = &ext[i..i + n];
        for (j, v) in gi.iter_mut().enumerate() {
            *v = dot(op.local().atom(j), patch);
        }
    }
}

/// `X̂ = Σ R_iᵀ D_L α_i`.
fn aggregate(op: &ConvOperator, alpha: &[f64], ext: &mut Vec<f64>, out: &mut [f64]) {
    let n = op.patch_len();
    let m = op.filters();
    let big_n = op.signal_len();
    ext.clear();
    ext.resize(big_n + n - 1, 0.0);
    for (i, ai) in alpha.chunks_exact(m).enumerate() {
        for (j, &v) in ai.iter().enumerate() {
            if v != 0.0 {
                for (x, d) in ext[i..i + n].iter_mut().zip(op.local().atom(j)) {
                    *x += d * v;
                }
            }
        }
    }
    out.copy_from_slice(&ext[..big_n]);
    for (k, v) in ext[big_n..].iter().enumerate() {
        out[k] += v;
    }
}

pub fn ist_bp(op: &ConvOperator, y: &[f64], cfg: &IstConfig) -> Result<PursuitResult> {
    ist_bp_observed(op, y, cfg, |_| {})
}

/// Iterative soft thresholding run patch by patch:
/// `α_i ← S_{λ/c}(α_i + (1/c)D_Lᵀ r_i)`, then `X̂ = Σ R_iᵀ D_L α_i` and
/// `r_i = R_i(Y − X̂)`.
pub fn ist_bp_observed<F>(op: &ConvOperator, y: &[f64], cfg: &IstConfig, mut observe: F) -> Result<PursuitResult>
where
    F: FnMut(&Snapshot<'_>),
{
    check_signal(op, y)?;
    cfg.validate()?;
    let start = Instant::now();
    let c = match cfg.c {
        Some(c) => c,
        None => ist_step_size(op)?,
    };
    let hard_mode = cfg.mode == ThresholdMode::Hard;
    let big_n = op.signal_len();
    let len = op.code_len();

    let mut ext = Vec::with_capacity(big_n + op.patch_len());
    let mut g = vec![0.0; len];
    local_correlations(op, y, &mut ext, &mut g);
    let scale = max_abs(&g);
    let atol = CERTIFICATE_ATOL * scale;
    let mut schedule = LambdaSchedule::new(cfg.lambda, cfg.continuation.as_ref(), scale);

    let mut alpha = vec![0.0; len];
    let mut xhat = vec![0.0; big_n];
    let mut r = y.to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let lam = schedule.value();
        let thr = if hard_mode { (2.0 * lam / c).sqrt() } else { lam / c };
        let mut change: f64 = 0.0;
        for (a, gv) in alpha.iter_mut().zip(&g) {
            let z = *a + gv / c;
            let next = if hard_mode { hard(z, thr) } else { soft(z, thr) };
            change = change.max((next - *a).abs());
            *a = next;
        }
        aggregate(op, &alpha, &mut ext, &mut xhat);
        for ((rv, yv), xv) in r.iter_mut().zip(y).zip(&xhat) {
            *rv = yv - xv;
        }
        local_correlations(op, &r, &mut ext, &mut g);

        observe(&Snapshot {
            iteration: iter,
            elapsed: start.elapsed(),
            code: &alpha,
        });
        if cfg.trace {
            let rn = norm2(&r);
            let l1: f64 = alpha.iter().map(|v| v.abs()).sum();
            trace.push(TraceRecord {
                iteration: iter,
                elapsed_s: start.elapsed().as_secs_f64(),
                objective: 0.5 * rn * rn + lam * l1,
                residual_l2: rn,
                consensus_gap: None,
                lambda: Some(lam),
            });
        }
        if schedule.settled() {
            let done = if hard_mode {
                change < cfg.tol
            } else {
                certificate_from_gradient(&g, &alpha, lam, cfg.tol, atol).holds
            };
            if done {
                converged = true;
                break;
            }
        } else {
            let open = match schedule.gate_tol() {
                Some(t) if !hard_mode => certificate_from_gradient(&g, &alpha, lam, t, atol).holds,
                _ => true,
            };
            if open {
                schedule.advance();
            }
        }
    }

    let lam = schedule.value();
    let mut res = PursuitResult::finish(
        op,
        y,
        Solver::Ist,
        GlobalCode::from_dense(&alpha),
        iterations,
        converged,
    )?;
    res.no_convergence_guarantee = hard_mode;
    if !hard_mode {
        res.certificate = Some(certificate_from_gradient(&g, &alpha, lam, cfg.tol, atol));
    }
    res.trace = cfg.trace.then_some(trace);
    Ok(res)
}

use nalgebra::DMatrix;

use super::{check_signal, PursuitResult, Solver, TraceRecord};
use crate::conv_dict::{norm2, ConvOperator, GlobalCode};
use crate::error::{Error, Result};

/// OMP stopping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OmpStop {
    /// Run exactly this many selections (fewer if the residual vanishes).
    Iterations(usize),
    /// Run until `‖r‖2 ≤ ε`.
    Residual(f64),
}

const PIVOT_FLOOR: f64 = 1e-10;

/// Growing Cholesky factor of the support Gram matrix.
struct GramFactor {
    // Row-major lower triangle; row k holds k + 1 entries.
    rows: Vec<Vec<f64>>,
}

impl GramFactor {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Appends a column with cross products `g` and self product `diag`.
    /// Returns false when the new pivot is too small.
    fn push(&mut self, g: &[f64], diag: f64) -> bool {
        let w = self.forward(g);
        let d = diag - w.iter().map(|v| v * v).sum::<f64>();
        if d <= PIVOT_FLOOR {
            return false;
        }
        let mut row = w;
        row.push(d.sqrt());
        self.rows.push(row);
        true
    }

    fn from_matrix(chol_l: &DMatrix<f64>) -> Self {
        let k = chol_l.nrows();
        let rows = (0..k).map(|i| (0..=i).map(|j| chol_l[(i, j)]).collect()).collect();
        Self { rows }
    }

    fn min_pivot(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| *r.last().unwrap())
            .fold(f64::INFINITY, f64::min)
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&x).map(|(l, v)| l * v).sum();
            x.push((b[i] - s) / row[i]);
        }
        x
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.forward(b);
        let k = x.len();
        for i in (0..k).rev() {
            let mut s = x[i];
            for j in i + 1..k {
                s -= self.rows[j][i] * x[j];
            }
            x[i] = s / self.rows[i][i];
        }
        x
    }
}

fn support_gram(op: &ConvOperator, support: &[usize]) -> DMatrix<f64> {
    let k = support.len();
    DMatrix::from_fn(k, k, |a, b| op.atom_inner(support[a], support[b]))
}

fn factor_from_scratch(op: &ConvOperator, support: &[usize]) -> Option<GramFactor> {
    let chol = support_gram(op, support).cholesky()?;
    let f = GramFactor::from_matrix(&chol.l());
    (f.min_pivot() * f.min_pivot() > PIVOT_FLOOR).then_some(f)
}

fn residual_of(op: &ConvOperator, y: &[f64], support: &[usize], coef: &[f64]) -> Result<Vec<f64>> {
    let code = GlobalCode::from_entries(op.code_len(), support.iter().copied().zip(coef.iter().copied()))?;
    let fit = op.apply(&code)?;
    Ok(y.iter().zip(&fit).map(|(a, b)| a - b).collect())
}

/// `D_Tᵀ r` computed atom by atom.
fn support_correlations(op: &ConvOperator, r: &[f64], support: &[usize]) -> Vec<f64> {
    let n = op.patch_len();
    let big_n = op.signal_len();
    support
        .iter()
        .map(|&c| {
            let a = op.atom_of(c);
            let atom = op.local().atom(a.filter);
            (0..n).map(|t| atom[t] * r[(a.shift + t) % big_n]).sum()
        })
        .collect()
}

/// Normal-equation solve with one step of iterative refinement.
fn refined_solve(
    op: &ConvOperator,
    y: &[f64],
    support: &[usize],
    factor: &GramFactor,
    rhs: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut coef = factor.solve(rhs);
    let r = residual_of(op, y, support, &coef)?;
    let corr = support_correlations(op, &r, support);
    let delta = factor.solve(&corr);
    coef.iter_mut().zip(&delta).for_each(|(c, d)| *c += d);
    let r = residual_of(op, y, support, &coef)?;
    Ok((coef, r))
}

/// Least-squares coefficients of `y` on the columns in `support`.
pub fn least_squares_on_support(op: &ConvOperator, y: &[f64], support: &[usize]) -> Result<Vec<f64>> {
    check_signal(op, y)?;
    if support.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&bad) = support.iter().find(|&&c| c >= op.code_len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            bound: op.code_len(),
        });
    }
    let factor = factor_from_scratch(op, support).ok_or(Error::RankDeficient {
        support_len: support.len(),
    })?;
    let rhs = support_correlations(op, y, support);
    Ok(refined_solve(op, y, support, &factor, &rhs)?.0)
}

/// Orthogonal matching pursuit over the global dictionary.
///
/// Each step picks the atom most correlated with the residual (smallest index
/// on exact ties), then re-fits all selected atoms by least squares. On a
/// rank-deficient support the run stops with `rank_deficient` set and the
/// last valid fit.
pub fn omp(op: &ConvOperator, y: &[f64], stop: OmpStop) -> Result<PursuitResult> {
    check_signal(op, y)?;
    let max_iters = match stop {
        OmpStop::Iterations(k) => {
            if k > op.code_len() {
                return Err(Error::invalid(format!(
                    "requested {k} OMP iterations but the dictionary has {} atoms",
                    op.code_len()
                )));
            }
            k
        }
        OmpStop::Residual(eps) => {
            if !(eps >= 0.0) {
                return Err(Error::invalid("residual target must be non-negative"));
            }
            op.code_len().min(op.signal_len())
        }
    };
    let start = std::time::Instant::now();
    let y_norm = norm2(y);
    let vanish = 1e-12 * y_norm.max(f64::MIN_POSITIVE);
    let mut support: Vec<usize> = Vec::new();
    let mut selected = vec![false; op.code_len()];
    let mut rhs: Vec<f64> = Vec::new();
    let mut coef: Vec<f64> = Vec::new();
    let mut factor = GramFactor::new();
    let mut r = y.to_vec();
    let mut r_norm = y_norm;
    let mut corr = vec![0.0; op.code_len()];
    let corr_y = op.apply_adjoint(y)?;
    let mut trace = Vec::new();
    let mut rank_deficient = false;

    while support.len() < max_iters {
        if let OmpStop::Residual(eps) = stop {
            if r_norm <= eps {
                break;
            }
        }
        if r_norm <= vanish {
            break;
        }
        op.adjoint_into(&r, &mut corr);
        let mut best: Option<(usize, f64)> = None;
        for (c, v) in corr.iter().enumerate() {
            if selected[c] {
                continue;
            }
            if best.is_none_or(|(_, b)| v.abs() > b) {
                best = Some((c, v.abs()));
            }
        }
        let Some((pick, _)) = best else { break };
        let g: Vec<f64> = support.iter().map(|&s| op.atom_inner(s, pick)).collect();
        let diag = op.atom_inner(pick, pick);
        support.push(pick);
        if !factor.push(&g, diag) {
            match factor_from_scratch(op, &support) {
                Some(f) => factor = f,
                None => {
                    support.pop();
                    rank_deficient = true;
                    break;
                }
            }
        }
        selected[pick] = true;
        rhs.push(corr_y[pick]);
        let (c, res) = refined_solve(op, y, &support, &factor, &rhs)?;
        coef = c;
        r = res;
        r_norm = norm2(&r);
        trace.push(TraceRecord {
            iteration: support.len(),
            elapsed_s: start.elapsed().as_secs_f64(),
            objective: 0.5 * r_norm * r_norm,
            residual_l2: r_norm,
            consensus_gap: None,
            lambda: None,
        });
    }

    let iterations = support.len();
    let code = GlobalCode::from_entries(op.code_len(), support.iter().copied().zip(coef))?;
    let converged = !rank_deficient
        && match stop {
            OmpStop::Iterations(_) => true,
            OmpStop::Residual(eps) => r_norm <= eps,
        };
    let mut result = PursuitResult::finish(op, y, Solver::Omp, code, iterations, converged)?;
    result.rank_deficient = rank_deficient;
    result.trace = Some(trace);
    Ok(result)
}

//! Reference global solvers (interior point, via clarabel) used as oracles.
#![allow(dead_code)]

pub mod props;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use convsparse::ConvOperator;

/// Column-compressed `[a·D, b·D]` block rows offset by `row0`, plus extra
/// entries per column appended by `extra`.
fn conv_columns(op: &ConvOperator) -> Vec<Vec<(usize, f64)>> {
    let big_n = op.signal_len();
    let n = op.patch_len();
    let m = op.filters();
    (0..op.code_len())
        .map(|c| {
            let (i, j) = (c / m, c % m);
            let atom = op.local().atom(j);
            let mut col: Vec<(usize, f64)> = (0..n).map(|r| ((i + r) % big_n, atom[r])).collect();
            col.sort_by_key(|e| e.0);
            col
        })
        .collect()
}

fn csc(rows: usize, cols: Vec<Vec<(usize, f64)>>) -> CscMatrix<f64> {
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    let ncols = cols.len();
    for col in cols {
        for (r, v) in col {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, ncols, colptr, rowval, nzval)
}

fn solve(p: CscMatrix<f64>, q: Vec<f64>, a: CscMatrix<f64>, b: Vec<f64>, cones: Vec<SupportedConeT<f64>>) -> Vec<f64> {
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).unwrap();
    solver.solve();
    assert!(
        matches!(
            solver.solution.status,
            SolverStatus::Solved | SolverStatus::AlmostSolved
        ),
        "reference solver status {:?}",
        solver.solution.status
    );
    solver.solution.x.clone()
}

/// `argmin ‖Γ‖1 s.t. DΓ = y` as an LP in `Γ = u − v`, `u, v ≥ 0`.
pub fn reference_bp(op: &ConvOperator, y: &[f64]) -> Vec<f64> {
    let big_n = op.signal_len();
    let len = op.code_len();
    let base = conv_columns(op);
    let mut cols = Vec::with_capacity(2 * len);
    for sign in [1.0, -1.0] {
        for (c, col) in base.iter().enumerate() {
            let mut e: Vec<(usize, f64)> = col.iter().map(|&(r, v)| (r, sign * v)).collect();
            let k = if sign > 0.0 { c } else { len + c };
            e.push((big_n + k, -1.0));
            cols.push(e);
        }
    }
    let a = csc(big_n + 2 * len, cols);
    let mut b = y.to_vec();
    b.extend(std::iter::repeat_n(0.0, 2 * len));
    let x = solve(
        CscMatrix::zeros((2 * len, 2 * len)),
        vec![1.0; 2 * len],
        a,
        b,
        vec![
            SupportedConeT::ZeroConeT(big_n),
            SupportedConeT::NonnegativeConeT(2 * len),
        ],
    );
    (0..len).map(|c| x[c] - x[len + c]).collect()
}

/// `argmin ½‖y − DΓ‖² + λ‖Γ‖1` as a QP in `(r, u, v)` with `r + D(u − v) = y`.
pub fn reference_lasso(op: &ConvOperator, y: &[f64], lambda: f64) -> Vec<f64> {
    let big_n = op.signal_len();
    let len = op.code_len();
    let nv = big_n + 2 * len;
    let base = conv_columns(op);
    let mut cols: Vec<Vec<(usize, f64)>> = (0..big_n).map(|r| vec![(r, 1.0)]).collect();
    for sign in [1.0, -1.0] {
        for (c, col) in base.iter().enumerate() {
            let mut e: Vec<(usize, f64)> = col.iter().map(|&(r, v)| (r, sign * v)).collect();
            let k = if sign > 0.0 { c } else { len + c };
            e.push((big_n + k, -1.0));
            cols.push(e);
        }
    }
    let a = csc(big_n + 2 * len, cols);
    let pcols: Vec<Vec<(usize, f64)>> = (0..nv)
        .map(|k| if k < big_n { vec![(k, 1.0)] } else { Vec::new() })
        .collect();
    let p = csc(nv, pcols);
    let mut q = vec![0.0; big_n];
    q.extend(std::iter::repeat_n(lambda, 2 * len));
    let mut b = y.to_vec();
    b.extend(std::iter::repeat_n(0.0, 2 * len));
    let x = solve(
        p,
        q,
        a,
        b,
        vec![
            SupportedConeT::ZeroConeT(big_n),
            SupportedConeT::NonnegativeConeT(2 * len),
        ],
    );
    (0..len).map(|c| x[big_n + c] - x[big_n + len + c]).collect()
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

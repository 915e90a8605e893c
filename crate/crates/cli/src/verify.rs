//! Invariant checks on a dictionary or a saved instance.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use convsparse::conv_dict::dense_limit;
use convsparse::io::load_dictionary;
use convsparse::measures::{
    dense_mutual_coherence, estimate_srip, gram_eigen_interval, random_support_with_l0inf, shifted_mutual_coherence,
    welch_bound,
};
use convsparse::rng::rng_for;
use convsparse::synth::{AmplitudeLaw, SyntheticInstance};
use convsparse::{ConvOperator, GlobalCode};

use crate::{operator, CmdResult, Failure, Outcome};

const APPLY_TOL: f64 = 1e-10;
const COHERENCE_TOL: f64 = 1e-12;

#[derive(Args, Debug)]
pub(crate) struct VerifyArgs {
    /// Local dictionary CSV
    #[arg(long, required_unless_present = "instance", conflicts_with = "instance")]
    dict: Option<PathBuf>,
    /// Signal length N
    #[arg(
        long = "signal-len",
        required_unless_present = "instance",
        conflicts_with = "instance"
    )]
    signal_len: Option<usize>,
    /// Instance JSON; supplies both dictionary and signal length
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Random draws per sampled check
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    /// None when skipped.
    passed: Option<bool>,
    value: f64,
    limit: f64,
    note: String,
}

impl Check {
    fn bound(name: &'static str, value: f64, limit: f64) -> Self {
        Check {
            name,
            passed: Some(value <= limit),
            value,
            limit,
            note: String::new(),
        }
    }

    fn skipped(name: &'static str, note: String) -> Self {
        Check {
            name,
            passed: None,
            value: f64::NAN,
            limit: f64::NAN,
            note,
        }
    }
}

fn gaussian(len: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, stream);
    (0..len).map(|_| AmplitudeLaw::GaussianUnit.sample(&mut rng)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn run(a: VerifyArgs) -> CmdResult {
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let (op, instance) = match &a.instance {
        Some(path) => {
            let inst = SyntheticInstance::load(path)?;
            (inst.op.clone(), Some(inst))
        }
        None => {
            let local = load_dictionary(a.dict.as_ref().expect("clap requires --dict"))?;
            (
                operator(local, a.signal_len.expect("clap requires --signal-len"))?,
                None,
            )
        }
    };
    op.require_stripe_geometry()?;
    let mut checks = run_checks(&op, a.seed, a.samples)?;
    if let Some(inst) = &instance {
        checks.push(match inst.validate() {
            Ok(()) => Check::bound("instance_consistent", 0.0, 0.0),
            Err(e) => Check {
                passed: Some(false),
                note: e.to_string(),
                ..Check::bound("instance_consistent", 1.0, 0.0)
            },
        });
    }
    let passed = checks.iter().all(|c| c.passed != Some(false));
    for c in checks.iter().filter(|c| c.passed == Some(false)) {
        eprintln!("failed: {} ({} > {}) {}", c.name, c.value, c.limit, c.note);
    }
    Ok(Outcome {
        code: if passed { 0 } else { 2 },
        body: Some(json!({
            "n": op.patch_len(),
            "m": op.filters(),
            "signal_len": op.signal_len(),
            "seed": a.seed,
            "passed": passed,
            "checks": checks,
        })),
    })
}

fn run_checks(op: &ConvOperator, seed: u64, samples: usize) -> Result<Vec<Check>, Failure> {
    let n = op.patch_len();
    let big_n = op.signal_len();
    let profile = shifted_mutual_coherence(op.local());
    let mu = profile.mu_global();
    let mut checks = vec![Check::bound("unit_norm_atoms", op.local().max_norm_defect(), 1e-12)];

    let mut adjoint_gap: f64 = 0.0;
    let mut stripe_gap: f64 = 0.0;
    let mut overlap_gap: f64 = 0.0;
    let stripes = convsparse::build_stripe_dictionary(op.local());
    for s in 0..samples as u64 {
        let gamma = GlobalCode::from_dense(&gaussian(op.code_len(), seed, 2 * s));
        let y = gaussian(big_n, seed, 2 * s + 1);
        let x = op.apply(&gamma)?;
        let g = op.apply_adjoint(&y)?;
        let lhs: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = gamma.iter().map(|(c, v)| v * g[c]).sum();
        adjoint_gap = adjoint_gap.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        for i in 0..big_n {
            let patch = op.extract_patch(&x, i)?;
            let fit = stripes.apply(&op.extract_stripe(&gamma, i)?)?;
            stripe_gap = stripe_gap.max(max_diff(&patch, &fit));
        }
        // Summing every cyclic patch back in place counts each sample n times.
        let mut acc = vec![0.0; big_n];
        for i in 0..big_n {
            for (k, v) in op.extract_patch(&y, i)?.into_iter().enumerate() {
                acc[(i + k) % big_n] += v;
            }
        }
        let scaled: Vec<f64> = y.iter().map(|v| v * n as f64).collect();
        overlap_gap = overlap_gap.max(max_diff(&acc, &scaled));
    }
    checks.push(Check::bound("adjoint_identity", adjoint_gap, APPLY_TOL));
    checks.push(Check::bound("stripe_reproduces_patches", stripe_gap, APPLY_TOL));
    checks.push(Check::bound("patch_overlap_count", overlap_gap, APPLY_TOL));
    checks.push(Check::bound(
        "welch_below_mu",
        welch_bound(n, op.filters()) - mu,
        COHERENCE_TOL,
    ));

    let mut k_max = 1;
    for k in 2..=3.min(op.stripe_len()) {
        let delta = estimate_srip(op, k, samples, seed)?;
        checks.push(Check::bound(
            if k == 2 { "srip_cap_k2" } else { "srip_cap_k3" },
            delta,
            (k - 1) as f64 * mu + COHERENCE_TOL,
        ));
        k_max = k;
    }

    let entries = big_n * op.code_len();
    if entries > dense_limit() {
        checks.push(Check::skipped(
            "dense_apply",
            format!("dense matrix needs {entries} entries, limit {}", dense_limit()),
        ));
        return Ok(checks);
    }
    let dense = op.build_dense()?;
    let mut apply_gap: f64 = 0.0;
    for s in 0..samples as u64 {
        let coeffs = gaussian(op.code_len(), seed, 2 * s);
        let y = gaussian(big_n, seed, 2 * s + 1);
        let fast = op.apply_dense(&coeffs)?;
        let slow = &dense * nalgebra_vec(&coeffs);
        apply_gap = apply_gap.max(max_diff(&fast, slow.as_slice()));
        let fast_t = op.apply_adjoint(&y)?;
        let slow_t = dense.transpose() * nalgebra_vec(&y);
        apply_gap = apply_gap.max(max_diff(&fast_t, slow_t.as_slice()));
    }
    checks.push(Check::bound("dense_apply", apply_gap, APPLY_TOL));
    checks.push(Check::bound(
        "coherence_matches_dense",
        (mu - dense_mutual_coherence(&dense)).abs(),
        COHERENCE_TOL,
    ));

    let mut worst: f64 = 0.0;
    let mut rng = rng_for(seed, u64::MAX);
    for s in 0..samples {
        let k = 1 + s % k_max;
        let support = random_support_with_l0inf(op, k, &mut rng)?;
        let spec = gram_eigen_interval(op, &dense, &support, mu)?;
        let radius = (spec.l0inf as f64 - 1.0) * mu;
        worst = worst.max((1.0 - radius - spec.lambda_min).max(spec.lambda_max - 1.0 - radius));
    }
    checks.push(Check::bound("gram_eigen_interval", worst, COHERENCE_TOL));
    Ok(checks)
}

fn nalgebra_vec(v: &[f64]) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(v)
}

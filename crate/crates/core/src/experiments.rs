//! Monte-Carlo experiment harness: the noiseless phase transition, the noisy
//! OMP and BP stability studies and the local solver convergence study.
//!
//! Trial `t` of a run draws everything from `rng_for(seed, t)`, where `t`
//! enumerates (cardinality, amplitude law, repetition) in that nesting order.
//! The convergence study reuses the same streams for every noise level, so a
//! trial sees the same code and the same noise direction at each σ.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv_dict::{ConvOperator, GlobalCode, LocalDictionary};
use crate::error::{Error, Result};
use crate::io::{dictionary_to_csv, fmt_f64, load_dictionary, write_atomic};
use crate::measures::{shifted_mutual_coherence, stripe_coherence, thresholds, BoundReport, CoherenceProfile};
use crate::pursuit::{
    admm_bp_observed, ist_bp_observed, omp, AdmmConfig, Continuation, IstConfig, OmpStop, PursuitResult, Snapshot,
    Solver,
};
use crate::rng::{rng_for, PRNG_NAME};
use crate::synth::{
    coherence_search, dct_local_dictionary, random_local_dictionary, AmplitudeLaw, NoiseTarget, SyntheticInstance,
};

/// A coefficient of a continuous solver's output counts as in-support when
/// its magnitude exceeds this fraction of the largest magnitude.
pub const SUPPORT_REL_THRESHOLD: f64 = 1e-4;

/// Full recovery: support match and `‖Γ̂ − Γ‖2 ≤ RECOVERY_REL_TOL·‖Γ‖2`.
pub const RECOVERY_REL_TOL: f64 = 1e-4;

/// Relative slack on the noisy OMP error bound, for rounding in the
/// least-squares fit.
const OMP_BOUND_SLACK: f64 = 1e-9;

/// The `15/2` of the noisy BP ℓ∞ bound.
const BP_LINF_FACTOR: f64 = 7.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PhaseTransition,
    NoisyOmp,
    NoisyBp,
    LocalConvergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DictionarySource {
    Dct {
        n: usize,
        m: usize,
    },
    Random {
        n: usize,
        m: usize,
        seed: u64,
    },
    Search {
        n: usize,
        m: usize,
        candidates: usize,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl DictionarySource {
    pub fn load(&self) -> Result<LocalDictionary> {
        match self {
            Self::Dct { n, m } => dct_local_dictionary(*n, *m),
            Self::Random { n, m, seed } => random_local_dictionary(*n, *m, *seed),
            Self::Search { n, m, candidates, seed } => Ok(coherence_search(*n, *m, *candidates, *seed)?.dictionary),
            Self::File { path } => load_dictionary(path),
        }
    }
}

/// Solver settings shared by the experiments. λ is set per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    /// BP solvers to run. Defaults to IST, and to both solvers for the
    /// convergence study.
    pub bp: Option<Vec<Solver>>,
    /// Its `continuation` is used by noiseless runs only; unset means a
    /// gated default.
    pub ist: IstConfig,
    /// Its `continuation` is used by noiseless runs only; unset means the
    /// ungated default.
    pub admm: AdmmConfig,
    /// ADMM penalty for fixed-λ runs as a multiple of λ. Unset uses
    /// `admm.rho`.
    pub rho_per_lambda: Option<f64>,
    /// Noisy BP uses `λ = lambda_factor·ε_L`.
    pub lambda_factor: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            bp: None,
            ist: IstConfig {
                max_iters: 200_000,
                tol: 1e-4,
                ..IstConfig::default()
            },
            admm: AdmmConfig {
                max_iters: 50_000,
                ..AdmmConfig::default()
            },
            rho_per_lambda: Some(0.7),
            lambda_factor: 4.0,
        }
    }
}

impl SolverSpec {
    fn bp_solvers(&self, kind: ExperimentKind) -> Vec<Solver> {
        match &self.bp {
            Some(v) => v.clone(),
            None if kind == ExperimentKind::LocalConvergence => vec![Solver::Admm, Solver::Ist],
            None => vec![Solver::Ist],
        }
    }

    /// Runs a BP solver at `lambda`, or with continuation when `lambda` is
    /// `None`.
    pub fn run_bp<F>(
        &self,
        solver: Solver,
        op: &ConvOperator,
        y: &[f64],
        lambda: Option<f64>,
        observe: F,
    ) -> Result<PursuitResult>
    where
        F: FnMut(&Snapshot<'_>),
    {
        match solver {
            Solver::Ist => {
                let mut cfg = self.ist.clone();
                match lambda {
                    Some(l) => {
                        cfg.lambda = l;
                        cfg.continuation = None;
                    }
                    None => {
                        cfg.continuation.get_or_insert(Continuation {
                            gate_tol: Some(0.1),
                            ..Continuation::default()
                        });
                    }
                }
                ist_bp_observed(op, y, &cfg, observe)
            }
            Solver::Admm => {
                let mut cfg = self.admm.clone();
                match lambda {
                    Some(l) => {
                        cfg.lambda = l;
                        cfg.continuation = None;
                        if let Some(f) = self.rho_per_lambda {
                            if l > 0.0 {
                                cfg.rho = f * l;
                            }
                        }
                    }
                    None => {
                        cfg.continuation.get_or_insert_with(Continuation::default);
                    }
                }
                admm_bp_observed(op, y, &cfg, observe)
            }
            Solver::Omp => Err(Error::invalid("OMP is not a BP solver")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub signal_len: usize,
    pub dictionary: DictionarySource,
    pub cardinalities: Vec<usize>,
    /// Repetitions per (cardinality, amplitude law) cell.
    pub trials: usize,
    /// Defaults: Gaussian for the phase transition, uniform on [−1, 1] for
    /// the noisy studies, the ±[1, 2] ring for the convergence study.
    #[serde(default)]
    pub amplitudes: Option<Vec<AmplitudeLaw>>,
    /// Noisy studies only; defaults to `‖E‖2 = 0.1`.
    #[serde(default)]
    pub noise: Option<NoiseTarget>,
    /// Convergence study only: per-sample noise levels, 0 for noiseless.
    #[serde(default)]
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Convergence study: keep every this many iterations in the traces.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_trace_every() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() as u64 + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |k| k + 1) + 1;
                Error::parse(line, column, e.message())
            }
            None => Error::Config(e.message().to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.cardinalities.is_empty() {
            return bad("cardinalities must not be empty".into());
        }
        if self.cardinalities.contains(&0) {
            return bad("cardinalities must be positive".into());
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1".into());
        }
        for law in self.amplitude_laws() {
            law.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(n) = &self.noise {
            n.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        match self.kind {
            ExperimentKind::LocalConvergence => {
                if self.sigmas.is_empty() {
                    return bad("local_convergence needs at least one sigma".into());
                }
                if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return bad("sigmas must be finite and non-negative".into());
                }
            }
            _ if !self.sigmas.is_empty() => {
                return bad("sigmas only apply to local_convergence".into());
            }
            _ => {}
        }
        let max_card = *self.cardinalities.iter().max().expect("non-empty");
        if matches!(self.kind, ExperimentKind::PhaseTransition | ExperimentKind::NoisyOmp) && max_card > self.signal_len
        {
            return bad(format!(
                "OMP cannot select {max_card} atoms in a signal of length {}",
                self.signal_len
            ));
        }
        let solvers = self.solver.bp_solvers(self.kind);
        if solvers.is_empty() || solvers.contains(&Solver::Omp) {
            return bad("solver.bp must list ist and/or admm".into());
        }
        if let Some(f) = self.solver.rho_per_lambda {
            if !(f > 0.0 && f.is_finite()) {
                return bad("rho_per_lambda must be positive".into());
            }
        }
        if !(self.solver.lambda_factor > 0.0 && self.solver.lambda_factor.is_finite()) {
            return bad("lambda_factor must be positive".into());
        }
        self.solver.ist.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.solver.admm.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn amplitude_laws(&self) -> Vec<AmplitudeLaw> {
        match &self.amplitudes {
            Some(v) if !v.is_empty() => v.clone(),
            _ => vec![match self.kind {
                ExperimentKind::PhaseTransition => AmplitudeLaw::GaussianUnit,
                ExperimentKind::NoisyOmp | ExperimentKind::NoisyBp => AmplitudeLaw::UniformSymmetric { a: 1.0 },
                ExperimentKind::LocalConvergence => AmplitudeLaw::UniformRing { lo: 1.0, hi: 2.0 },
            }],
        }
    }

    fn noise_target(&self) -> NoiseTarget {
        self.noise.unwrap_or(NoiseTarget::GlobalNorm(0.1))
    }
}

/// One solver run on one trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    /// Stream index within the run.
    pub trial: u64,
    pub seed: u64,
    pub cardinality: usize,
    /// Index into the amplitude law list.
    pub law: usize,
    /// Convergence study only.
    pub sigma: Option<f64>,
    pub l0inf: usize,
    pub max_stripe_coherence: f64,
    pub eps_global: f64,
    pub eps_local: f64,
    pub gamma_min: f64,
    pub ratio_epsl_gamma_min: f64,
    pub solver: Solver,
    pub lambda: Option<f64>,
    /// Whether the trial meets the hypothesis of the theorem this study
    /// checks.
    pub hypothesis: bool,
    /// The theorem's bound on `l2_error²` (noisy OMP) or on `linf_error`
    /// (noisy BP).
    pub bound: Option<f64>,
    pub success_support: bool,
    pub recovered: bool,
    pub support_size: usize,
    pub l2_error: f64,
    pub linf_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

const RECORD_HEADER: [&str; 24] = [
    "trial",
    "seed",
    "cardinality",
    "law",
    "sigma",
    "l0inf",
    "max_stripe_coherence",
    "eps_global",
    "eps_local",
    "gamma_min",
    "ratio_epsl_gamma_min",
    "solver",
    "lambda",
    "hypothesis",
    "bound",
    "success_support",
    "recovered",
    "support_size",
    "l2_error",
    "linf_error",
    "iterations",
    "converged",
    "wall_time",
    "support_threshold",
];

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl TrialRecord {
    fn csv_row(&self) -> Vec<String> {
        vec![
            self.trial.to_string(),
            self.seed.to_string(),
            self.cardinality.to_string(),
            self.law.to_string(),
            opt_f64(self.sigma),
            self.l0inf.to_string(),
            fmt_f64(self.max_stripe_coherence),
            fmt_f64(self.eps_global),
            fmt_f64(self.eps_local),
            fmt_f64(self.gamma_min),
            fmt_f64(self.ratio_epsl_gamma_min),
            self.solver.to_string(),
            opt_f64(self.lambda),
            self.hypothesis.to_string(),
            opt_f64(self.bound),
            self.success_support.to_string(),
            self.recovered.to_string(),
            self.support_size.to_string(),
            fmt_f64(self.l2_error),
            fmt_f64(self.linf_error),
            self.iterations.to_string(),
            self.converged.to_string(),
            format!("{:.6}", self.wall_time),
            fmt_f64(SUPPORT_REL_THRESHOLD),
        ]
    }
}

/// Aggregate over one (solver, σ, ℓ0,∞) bucket. The convergence study
/// buckets by (solver, σ) only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub solver: Solver,
    pub sigma: Option<f64>,
    pub l0inf: Option<usize>,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Non-increasing fit of `success_rate` over ℓ0,∞, per solver.
    pub success_rate_monotone: Option<f64>,
    pub hypothesis_trials: usize,
    pub converged: usize,
    pub median_l2_error: f64,
    pub max_l2_error: f64,
    pub max_linf_error: f64,
}

const SUMMARY_HEADER: [&str; 12] = [
    "solver",
    "sigma",
    "l0inf",
    "trials",
    "successes",
    "success_rate",
    "success_rate_monotone",
    "hypothesis_trials",
    "converged",
    "median_l2_error",
    "max_l2_error",
    "max_linf_error",
];

impl SummaryRow {
    fn csv_row(&self) -> Vec<String> {
        vec![
            self.solver.to_string(),
            opt_f64(self.sigma),
            self.l0inf.map(|v| v.to_string()).unwrap_or_default(),
            self.trials.to_string(),
            self.successes.to_string(),
            fmt_f64(self.success_rate),
            opt_f64(self.success_rate_monotone),
            self.hypothesis_trials.to_string(),
            self.converged.to_string(),
            fmt_f64(self.median_l2_error),
            fmt_f64(self.max_l2_error),
            fmt_f64(self.max_linf_error),
        ]
    }
}

/// Distance to the true code along a solver run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub trial: u64,
    pub sigma: f64,
    pub solver: Solver,
    pub iteration: usize,
    pub elapsed_s: f64,
    pub l2_distance: f64,
}

/// A trial inside a theorem's hypothesis whose outcome contradicts it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub trial: u64,
    pub solver: Solver,
    pub theorem: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentMeta {
    pub config: ExperimentConfig,
    pub dictionary_sha256: String,
    pub n: usize,
    pub m: usize,
    pub mu_hat: f64,
    pub thresholds: BoundReport,
    pub prng: String,
    pub seed_split: String,
    pub support_threshold: f64,
    pub recovery_rel_tol: f64,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub meta: ExperimentMeta,
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SummaryRow>,
    pub traces: Vec<TracePoint>,
}

impl ExperimentOutcome {
    pub fn violations(&self) -> &[Violation] {
        &self.meta.violations
    }

    pub fn records_csv(&self) -> Result<String> {
        to_csv(&RECORD_HEADER, self.records.iter().map(TrialRecord::csv_row))
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&SUMMARY_HEADER, self.summary.iter().map(SummaryRow::csv_row))
    }

    pub fn traces_csv(&self) -> Result<String> {
        let header = ["trial", "sigma", "solver", "iteration", "elapsed_s", "l2_distance"];
        to_csv(
            &header,
            self.traces.iter().map(|t| {
                vec![
                    t.trial.to_string(),
                    fmt_f64(t.sigma),
                    t.solver.to_string(),
                    t.iteration.to_string(),
                    format!("{:.6}", t.elapsed_s),
                    fmt_f64(t.l2_distance),
                ]
            }),
        )
    }

    /// Writes records.csv, summary.csv, meta.json and, for the convergence
    /// study, traces.csv into `dir`. Each file is replaced atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("records.csv"), self.records_csv()?.as_bytes())?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv()?.as_bytes())?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        write_atomic(&dir.join("meta.json"), meta.as_bytes())?;
        if self.meta.config.kind == ExperimentKind::LocalConvergence {
            write_atomic(&dir.join("traces.csv"), self.traces_csv()?.as_bytes())?;
        }
        Ok(())
    }
}

fn to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(&r).map_err(io_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Thresholded support of a solver output.
pub fn effective_support(code: &GlobalCode) -> Vec<usize> {
    let cut = SUPPORT_REL_THRESHOLD * code.max_abs();
    code.iter().filter(|(_, v)| v.abs() > cut).map(|(i, _)| i).collect()
}

struct Context {
    op: ConvOperator,
    profile: CoherenceProfile,
    bounds: BoundReport,
}

struct Job {
    trial: u64,
    cardinality: usize,
    law_index: usize,
    law: AmplitudeLaw,
    sigma: Option<f64>,
}

struct TrialOutput {
    records: Vec<TrialRecord>,
    traces: Vec<TracePoint>,
    violations: Vec<Violation>,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let laws = cfg.amplitude_laws();
    let mut cells = Vec::new();
    let mut trial = 0u64;
    for &cardinality in &cfg.cardinalities {
        for (law_index, law) in laws.iter().enumerate() {
            for _ in 0..cfg.trials {
                cells.push((trial, cardinality, law_index, *law));
                trial += 1;
            }
        }
    }
    let sigmas: Vec<Option<f64>> = if cfg.kind == ExperimentKind::LocalConvergence {
        cfg.sigmas.iter().map(|s| Some(*s)).collect()
    } else {
        vec![None]
    };
    sigmas
        .iter()
        .flat_map(|&sigma| {
            cells.iter().map(move |&(trial, cardinality, law_index, law)| Job {
                trial,
                cardinality,
                law_index,
                law,
                sigma,
            })
        })
        .collect()
}

/// Runs the experiment named by `cfg.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let local = cfg.dictionary.load()?;
    let op = ConvOperator::new(local, cfg.signal_len)?;
    op.require_stripe_geometry()?;
    let profile = shifted_mutual_coherence(op.local());
    let bounds = thresholds(&profile);
    let ctx = Context { op, profile, bounds };

    let outputs: Vec<TrialOutput> = jobs(cfg)
        .into_par_iter()
        .map(|job| run_trial(cfg, &ctx, &job))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut violations = Vec::new();
    for o in outputs {
        records.extend(o.records);
        traces.extend(o.traces);
        violations.extend(o.violations);
    }
    let summary = summarize(cfg.kind, &records);
    let digest = Sha256::digest(dictionary_to_csv(ctx.op.local()).as_bytes());
    let meta = ExperimentMeta {
        config: cfg.clone(),
        dictionary_sha256: hex::encode(digest),
        n: ctx.op.patch_len(),
        m: ctx.op.filters(),
        mu_hat: ctx.bounds.mu_global,
        thresholds: ctx.bounds.clone(),
        prng: PRNG_NAME.to_string(),
        seed_split: "trial t draws its code, then its noise, from rng_for(seed, t)".to_string(),
        support_threshold: SUPPORT_REL_THRESHOLD,
        recovery_rel_tol: RECOVERY_REL_TOL,
        violations,
    };
    Ok(ExperimentOutcome {
        meta,
        records,
        summary,
        traces,
    })
}

/// Noiseless phase transition: OMP and BP on every trial, success meaning
/// full recovery of the code.
pub fn phase_transition(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_kind(cfg, ExperimentKind::PhaseTransition)
}

/// Noisy OMP with a known cardinality: ℓ2 error against
/// `ε²/(1 − μ̂(k − 1))` and support recovery.
pub fn noisy_omp_study(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_kind(cfg, ExperimentKind::NoisyOmp)
}

/// Noisy BP at `λ = 4ε_L`: ℓ∞ error against `7.5ε_L`, support containment
/// and recovery of the large coefficients.
pub fn noisy_bp_study(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_kind(cfg, ExperimentKind::NoisyBp)
}

/// Distance-to-truth traces of ADMM and IST at several noise levels. Noisy
/// runs use `λ = σ√(2 ln mN)`, noiseless runs use continuation.
pub fn local_solver_convergence(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_kind(cfg, ExperimentKind::LocalConvergence)
}

fn run_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentOutcome> {
    if cfg.kind != kind {
        return Err(Error::Config(format!("config is for {:?}, not {:?}", cfg.kind, kind)));
    }
    run_experiment(cfg)
}

fn l2_and_linf(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut inf: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
        inf = inf.max(d.abs());
    }
    (sq.sqrt(), inf)
}

fn run_trial(cfg: &ExperimentConfig, ctx: &Context, job: &Job) -> Result<TrialOutput> {
    let op = &ctx.op;
    let mut rng = rng_for(cfg.seed, job.trial);
    let noise = match cfg.kind {
        ExperimentKind::PhaseTransition => None,
        ExperimentKind::NoisyOmp | ExperimentKind::NoisyBp => Some(cfg.noise_target()),
        ExperimentKind::LocalConvergence => job.sigma.filter(|s| *s > 0.0).map(NoiseTarget::PerSampleSigma),
    };
    let inst = SyntheticInstance::generate(op, job.cardinality, job.law, noise, &mut rng)?;
    let truth = inst.gamma_true.to_dense();
    let true_support = inst.gamma_true.support();
    let true_norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let zeta = stripe_coherence(&inst.gamma_true, op, &ctx.profile)?.max;
    let ratio = if inst.gamma_min > 0.0 {
        inst.eps_local / inst.gamma_min
    } else {
        f64::INFINITY
    };
    let k = inst.l0inf_true;
    let bounds = &ctx.bounds;

    let mut out = TrialOutput {
        records: Vec::new(),
        traces: Vec::new(),
        violations: Vec::new(),
    };
    let record = |res: &PursuitResult, lambda: Option<f64>, wall: f64| -> TrialRecord {
        let est = res.code.to_dense();
        let (l2, linf) = l2_and_linf(&est, &truth);
        let support = effective_support(&res.code);
        let success_support = support == true_support;
        TrialRecord {
            trial: job.trial,
            seed: cfg.seed,
            cardinality: job.cardinality,
            law: job.law_index,
            sigma: job.sigma,
            l0inf: k,
            max_stripe_coherence: zeta,
            eps_global: inst.eps_global,
            eps_local: inst.eps_local,
            gamma_min: inst.gamma_min,
            ratio_epsl_gamma_min: ratio,
            solver: res.solver,
            lambda,
            hypothesis: false,
            bound: None,
            success_support,
            recovered: success_support && l2 <= RECOVERY_REL_TOL * true_norm,
            support_size: support.len(),
            l2_error: l2,
            linf_error: linf,
            iterations: res.iterations,
            converged: res.converged,
            wall_time: wall,
        }
    };
    let violate = |out: &mut TrialOutput, solver: Solver, theorem: &str, detail: String| {
        out.violations.push(Violation {
            trial: job.trial,
            solver,
            theorem: theorem.to_string(),
            detail,
        });
    };

    match cfg.kind {
        ExperimentKind::PhaseTransition => {
            let hyp = bounds.max_admissible_l0inf.is_none_or(|t| k <= t);
            let t0 = Instant::now();
            let res = omp(op, &inst.y, OmpStop::Iterations(job.cardinality))?;
            let mut rec = record(&res, None, t0.elapsed().as_secs_f64());
            rec.hypothesis = hyp;
            if hyp && !rec.recovered {
                violate(
                    &mut out,
                    Solver::Omp,
                    "noiseless OMP recovery",
                    format!("l0inf {k}, l2 error {:e}", rec.l2_error),
                );
            }
            out.records.push(rec);
            for solver in cfg.solver.bp_solvers(cfg.kind) {
                let t0 = Instant::now();
                let res = cfg.solver.run_bp(solver, op, &inst.y, None, |_| {})?;
                let mut rec = record(&res, None, t0.elapsed().as_secs_f64());
                rec.hypothesis = hyp;
                if hyp && !rec.recovered {
                    violate(
                        &mut out,
                        solver,
                        "noiseless BP recovery",
                        format!("l0inf {k}, l2 error {:e}, converged {}", rec.l2_error, rec.converged),
                    );
                }
                out.records.push(rec);
            }
        }
        ExperimentKind::NoisyOmp => {
            let hyp = inst.gamma_min > 0.0 && bounds.noisy_omp_threshold(inst.eps_local, inst.gamma_min)? > k as f64;
            let t0 = Instant::now();
            let res = omp(op, &inst.y, OmpStop::Iterations(job.cardinality))?;
            let mut rec = record(&res, None, t0.elapsed().as_secs_f64());
            rec.hypothesis = hyp;
            rec.bound = bounds.omp_error_upper(k.max(1), inst.eps_global).ok();
            if hyp {
                let sq = rec.l2_error * rec.l2_error;
                match rec.bound {
                    Some(b) if rec.success_support && sq <= b * (1.0 + OMP_BOUND_SLACK) => {}
                    b => violate(
                        &mut out,
                        Solver::Omp,
                        "noisy OMP stability",
                        format!(
                            "l0inf {k}, support ok {}, l2 error² {sq:e}, bound {b:?}",
                            rec.success_support
                        ),
                    ),
                }
            }
            out.records.push(rec);
        }
        ExperimentKind::NoisyBp => {
            let hyp = bounds.max_admissible_l0inf_noisy_bp.is_none_or(|t| k <= t);
            let lambda = cfg.solver.lambda_factor * inst.eps_local;
            let linf_bound = BP_LINF_FACTOR * inst.eps_local;
            for solver in cfg.solver.bp_solvers(cfg.kind) {
                let t0 = Instant::now();
                let res = cfg.solver.run_bp(solver, op, &inst.y, Some(lambda), |_| {})?;
                let mut rec = record(&res, Some(lambda), t0.elapsed().as_secs_f64());
                rec.hypothesis = hyp;
                rec.bound = Some(linf_bound);
                if hyp {
                    let support = effective_support(&res.code);
                    let contained = support.iter().all(|i| true_support.binary_search(i).is_ok());
                    let large_found = inst
                        .gamma_true
                        .iter()
                        .filter(|(_, v)| v.abs() > linf_bound)
                        .all(|(i, _)| support.binary_search(&i).is_ok());
                    if !(res.converged && rec.linf_error <= linf_bound && contained && large_found) {
                        violate(
                            &mut out,
                            solver,
                            "noisy BP stability",
                            format!(
                                "l0inf {k}, converged {}, linf error {:e} vs {:e}, contained {contained}, large coefficients found {large_found}",
                                res.converged, rec.linf_error, linf_bound
                            ),
                        );
                    }
                }
                out.records.push(rec);
            }
        }
        ExperimentKind::LocalConvergence => {
            let sigma = job.sigma.unwrap_or(0.0);
            let mn = (op.code_len()) as f64;
            let lambda = (sigma > 0.0).then(|| sigma * (2.0 * mn.ln()).sqrt());
            for solver in cfg.solver.bp_solvers(cfg.kind) {
                let mut points = Vec::new();
                let t0 = Instant::now();
                let res = cfg.solver.run_bp(solver, op, &inst.y, lambda, |s| {
                    if s.iteration % cfg.trace_every == 0 {
                        points.push(TracePoint {
                            trial: job.trial,
                            sigma,
                            solver,
                            iteration: s.iteration,
                            elapsed_s: s.elapsed.as_secs_f64(),
                            l2_distance: l2_and_linf(s.code, &truth).0,
                        });
                    }
                })?;
                let wall = t0.elapsed().as_secs_f64();
                let rec = record(&res, lambda, wall);
                if points.last().is_none_or(|p| p.iteration != res.iterations) {
                    points.push(TracePoint {
                        trial: job.trial,
                        sigma,
                        solver,
                        iteration: res.iterations,
                        elapsed_s: wall,
                        l2_distance: rec.l2_error,
                    });
                }
                out.traces.extend(points);
                out.records.push(rec);
            }
        }
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

/// Weighted least-squares non-increasing fit (pool adjacent violators).
fn monotone_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // Blocks of (mean, weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (b, a) = (blocks[blocks.len() - 1], blocks[blocks.len() - 2]);
            if a.0 >= b.0 {
                break;
            }
            let w = a.1 + b.1;
            blocks.truncate(blocks.len() - 2);
            blocks.push(((a.0 * a.1 + b.0 * b.1) / w, w, a.2 + b.2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, _, c)| std::iter::repeat_n(v, c))
        .collect()
}

fn summarize(kind: ExperimentKind, records: &[TrialRecord]) -> Vec<SummaryRow> {
    let by_l0inf = kind != ExperimentKind::LocalConvergence;
    let mut groups: BTreeMap<(String, u64, usize), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.solver.to_string(),
            r.sigma.map_or(0, f64::to_bits),
            if by_l0inf { r.l0inf } else { 0 },
        );
        groups.entry(key).or_default().push(r);
    }
    let success = |r: &TrialRecord| match kind {
        ExperimentKind::PhaseTransition | ExperimentKind::LocalConvergence => r.recovered,
        ExperimentKind::NoisyOmp | ExperimentKind::NoisyBp => r.success_support,
    };
    let mut rows: Vec<SummaryRow> = groups
        .into_values()
        .map(|g| {
            let first = g[0];
            let successes = g.iter().filter(|r| success(r)).count();
            let mut l2: Vec<f64> = g.iter().map(|r| r.l2_error).collect();
            SummaryRow {
                solver: first.solver,
                sigma: first.sigma,
                l0inf: by_l0inf.then_some(first.l0inf),
                trials: g.len(),
                successes,
                success_rate: successes as f64 / g.len() as f64,
                success_rate_monotone: None,
                hypothesis_trials: g.iter().filter(|r| r.hypothesis).count(),
                converged: g.iter().filter(|r| r.converged).count(),
                max_l2_error: l2.iter().copied().fold(0.0, f64::max),
                max_linf_error: g.iter().map(|r| r.linf_error).fold(0.0, f64::max),
                median_l2_error: median(&mut l2),
            }
        })
        .collect();
    if by_l0inf {
        // Rows are sorted by (solver, σ, ℓ0,∞), so each solver is one run.
        let mut start = 0;
        while start < rows.len() {
            let end = rows[start..]
                .iter()
                .position(|r| r.solver != rows[start].solver || r.sigma != rows[start].sigma)
                .map_or(rows.len(), |p| start + p);
            let vals: Vec<f64> = rows[start..end].iter().map(|r| r.success_rate).collect();
            let w: Vec<f64> = rows[start..end].iter().map(|r| r.trials as f64).collect();
            for (r, v) in rows[start..end].iter_mut().zip(monotone_decreasing(&vals, &w)) {
                r.success_rate_monotone = Some(v);
            }
            start = end;
        }
    }
    rows
}

//! `convsparse`: dictionary generation, localized measures, pursuit and
//! experiment runs.
//!
//! Data goes to stdout (or the requested files), diagnostics to stderr.
//! Exit codes: 0 success, 1 invalid input, 2 runtime or convergence failure.

mod verify;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use convsparse::experiments::ExperimentConfig;
use convsparse::io::{code_to_csv, dictionary_to_csv, fmt_f64, load_code, load_dictionary, load_signal, write_atomic};
use convsparse::measures::{
    l0_inf, local_counts, shifted_mutual_coherence, stripe_coherence, stripe_counts, thresholds,
};
use convsparse::pursuit::{
    admm_bp, ist_bp, omp, AdmmConfig, Continuation, IstConfig, OmpStop, PursuitResult, ThresholdMode,
};
use convsparse::synth::{coherence_search, dct_local_dictionary, random_local_dictionary};
use convsparse::{ConvOperator, Error, LocalDictionary};

#[derive(Parser, Debug)]
#[command(name = "convsparse", author, version, about = "Convolutional sparse coding toolkit")]
struct Cli {
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a local dictionary and report its mutual coherence
    GenDict(GenDictArgs),
    /// Coherence profile, bound thresholds and, with a code, its localized measures
    Measures(MeasuresArgs),
    /// Run a pursuit solver on a signal
    Pursue(PursueArgs),
    /// Run an experiment described by a TOML config
    Experiment(ExperimentArgs),
    /// Check operator and measure invariants on a dictionary or instance
    Verify(verify::VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DictKind {
    Random,
    Dct,
    Search,
}

#[derive(Args, Debug)]
struct GenDictArgs {
    kind: DictKind,
    /// Atom length
    n: usize,
    /// Number of filters
    m: usize,
    /// Required for random and search
    #[arg(long)]
    seed: Option<u64>,
    /// Candidates tried by search
    #[arg(long, default_value_t = 1000)]
    candidates: usize,
    /// Output CSV; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MeasuresArgs {
    /// Local dictionary CSV
    #[arg(long)]
    dict: PathBuf,
    /// Signal length N
    #[arg(long = "signal-len")]
    signal_len: usize,
    /// Code CSV (shift,filter,value)
    #[arg(long)]
    code: Option<PathBuf>,
    /// Also write the coherence profile as CSV (s,mu_s)
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Omp,
    Admm,
    Ist,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Soft,
    Hard,
}

#[derive(Args, Debug)]
struct PursueArgs {
    #[arg(long, value_enum)]
    solver: SolverArg,
    /// Local dictionary CSV
    #[arg(long)]
    dict: PathBuf,
    /// Signal CSV, one value per row
    #[arg(long)]
    signal: PathBuf,
    /// Expected signal length; checked against the file
    #[arg(long = "signal-len")]
    signal_len: Option<usize>,
    /// OMP: number of selections
    #[arg(long, conflicts_with = "residual")]
    sparsity: Option<usize>,
    /// OMP: stop once the residual norm is at most this
    #[arg(long)]
    residual: Option<f64>,
    /// BP: Lagrangian weight
    #[arg(long)]
    lambda: Option<f64>,
    /// ADMM: penalty
    #[arg(long)]
    rho: Option<f64>,
    /// IST: step constant (default 1.05·‖D‖₂²)
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// IST: certificate slack. ADMM: primal and dual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Drive λ geometrically down to the noiseless limit
    #[arg(long)]
    continuation: bool,
    #[arg(long, requires = "continuation")]
    decay: Option<f64>,
    /// Advance λ only once the certificate holds with this slack
    #[arg(long, requires = "continuation")]
    gate: Option<f64>,
    /// Record a per-iteration trace in the result
    #[arg(long)]
    trace: bool,
    /// Write the code as CSV
    #[arg(long)]
    code_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// TOML config
    config: PathBuf,
    /// Output directory; overrides `output` in the config
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: exit status plus the JSON error object.
pub(crate) struct Failure {
    code: u8,
    body: Value,
}

impl Failure {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            body: json!({ "error": { "kind": "invalid_argument", "message": msg.into() } }),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::NotConverged { .. } => (2, "not_converged"),
            Error::RankDeficient { .. } => (2, "rank_deficient"),
            Error::Parse { .. } | Error::Json(_) => (1, "parse"),
            Error::Io(_) => (1, "io"),
            Error::Config(_) => (1, "config"),
            Error::Geometry(_) => (1, "geometry"),
            Error::DenseLimit { .. } => (1, "dense_limit"),
            _ => (1, "invalid_argument"),
        };
        let mut err = json!({ "kind": kind, "message": e.to_string() });
        match &e {
            Error::Parse { line, column, .. } => {
                err["line"] = json!(line);
                err["column"] = json!(column);
            }
            Error::Json(j) => {
                err["line"] = json!(j.line());
                err["column"] = json!(j.column());
            }
            _ => {}
        }
        Failure {
            code,
            body: json!({ "error": err }),
        }
    }
}

/// Successful output plus the exit status to report with it.
pub(crate) struct Outcome {
    code: u8,
    body: Option<Value>,
}

impl Outcome {
    pub(crate) fn ok(body: Value) -> Self {
        Outcome {
            code: 0,
            body: Some(body),
        }
    }
}

type CmdResult = Result<Outcome, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            print_json(&json!({ "error": { "kind": "usage", "message": e.kind().to_string() } }));
            return ExitCode::from(1);
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return finish(Err(Failure::usage("--threads must be at least 1")));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return finish(Err(Failure::usage(format!("thread pool: {e}"))));
        }
    }
    let result = match cli.command {
        Command::GenDict(a) => gen_dict(a),
        Command::Measures(a) => measures(a),
        Command::Pursue(a) => pursue(a),
        Command::Experiment(a) => experiment(a),
        Command::Verify(a) => verify::run(a),
    };
    finish(result)
}

fn finish(result: CmdResult) -> ExitCode {
    match result {
        Ok(out) => {
            if let Some(body) = out.body {
                print_json(&body);
            }
            ExitCode::from(out.code)
        }
        Err(f) => {
            if let Some(msg) = f.body["error"]["message"].as_str() {
                eprintln!("error: {msg}");
            }
            print_json(&f.body);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

pub(crate) fn operator(local: LocalDictionary, signal_len: usize) -> Result<ConvOperator, Failure> {
    let op = ConvOperator::new(local, signal_len)?;
    op.require_stripe_geometry()?;
    Ok(op)
}

fn gen_dict(a: GenDictArgs) -> CmdResult {
    let need_seed = || {
        a.seed
            .ok_or_else(|| Failure::usage("--seed is required for random and search dictionaries"))
    };
    let (local, mu, candidate) = match a.kind {
        DictKind::Dct => {
            let d = dct_local_dictionary(a.n, a.m)?;
            let mu = shifted_mutual_coherence(&d).mu_global();
            (d, mu, None)
        }
        DictKind::Random => {
            let d = random_local_dictionary(a.n, a.m, need_seed()?)?;
            let mu = shifted_mutual_coherence(&d).mu_global();
            (d, mu, None)
        }
        DictKind::Search => {
            let r = coherence_search(a.n, a.m, a.candidates, need_seed()?)?;
            (r.dictionary, r.mu, Some(r.candidate))
        }
    };
    let csv = dictionary_to_csv(&local);
    match &a.out {
        Some(path) => {
            write_file(path, &csv)?;
            Ok(Outcome::ok(json!({
                "n": a.n,
                "m": a.m,
                "mu_hat": mu,
                "candidate": candidate,
                "out": path,
            })))
        }
        None => {
            eprintln!("mu_hat = {}", fmt_f64(mu));
            print!("{csv}");
            Ok(Outcome { code: 0, body: None })
        }
    }
}

fn measures(a: MeasuresArgs) -> CmdResult {
    let local = load_dictionary(&a.dict)?;
    let profile = shifted_mutual_coherence(&local);
    let op = operator(local, a.signal_len)?;
    let report = thresholds(&profile);
    let mut body = json!({
        "signal_len": a.signal_len,
        "bounds": report,
    });
    if let Some(path) = &a.code {
        let code = load_code(path, &op)?;
        let zeta = stripe_coherence(&code, &op, &profile)?;
        body["code"] = json!({
            "nnz": code.nnz(),
            "l0inf": l0_inf(&code, &op)?,
            "local_counts": local_counts(&code, &op)?,
            "stripe_counts": stripe_counts(&code, &op)?,
            "zeta": zeta.zeta,
            "mean_mu": zeta.mean_mu,
            "max_stripe_coherence": zeta.max,
        });
    }
    if let Some(path) = &a.profile_out {
        let mut csv = String::from("s,mu_s\n");
        for (s, mu) in profile.shifts() {
            let _ = writeln!(csv, "{s},{}", fmt_f64(mu));
        }
        write_file(path, &csv)?;
    }
    Ok(Outcome::ok(body))
}

fn pursue(a: PursueArgs) -> CmdResult {
    let local = load_dictionary(&a.dict)?;
    let y = load_signal(&a.signal)?;
    if let Some(n) = a.signal_len {
        if n != y.len() {
            return Err(Failure::usage(format!(
                "--signal-len is {n} but the signal has {} samples",
                y.len()
            )));
        }
    }
    let op = operator(local, y.len())?;
    let reject = |set: bool, flag: &str| -> Result<(), Failure> {
        if set {
            Err(Failure::usage(
                format!("{flag} does not apply to {:?}", a.solver).to_lowercase(),
            ))
        } else {
            Ok(())
        }
    };
    let mode = match a.mode {
        Some(ModeArg::Hard) => ThresholdMode::Hard,
        _ => ThresholdMode::Soft,
    };
    let continuation = a.continuation.then(|| Continuation {
        decay: a.decay.unwrap_or(Continuation::default().decay),
        gate_tol: a.gate,
        ..Continuation::default()
    });
    let bp_lambda = || -> Result<f64, Failure> {
        match (a.lambda, a.continuation) {
            (Some(l), false) => Ok(l),
            (None, true) => Ok(0.0),
            (Some(_), true) => Err(Failure::usage("--lambda and --continuation are exclusive")),
            (None, false) => Err(Failure::usage("BP solvers need --lambda or --continuation")),
        }
    };

    let res: PursuitResult = match a.solver {
        SolverArg::Omp => {
            reject(a.lambda.is_some(), "--lambda")?;
            reject(a.rho.is_some(), "--rho")?;
            reject(a.c.is_some(), "--c")?;
            reject(a.mode.is_some(), "--mode")?;
            reject(a.max_iters.is_some(), "--max-iters")?;
            reject(a.tol.is_some(), "--tol")?;
            reject(a.continuation, "--continuation")?;
            let stop = match (a.sparsity, a.residual) {
                (Some(k), None) => OmpStop::Iterations(k),
                (None, Some(eps)) => OmpStop::Residual(eps),
                _ => return Err(Failure::usage("OMP needs --sparsity or --residual")),
            };
            omp(&op, &y, stop)?
        }
        SolverArg::Admm => {
            reject(a.c.is_some(), "--c")?;
            reject(a.sparsity.is_some(), "--sparsity")?;
            reject(a.residual.is_some(), "--residual")?;
            let mut cfg = AdmmConfig {
                lambda: bp_lambda()?,
                mode,
                continuation,
                trace: a.trace,
                ..AdmmConfig::default()
            };
            if let Some(r) = a.rho {
                cfg.rho = r;
            }
            if let Some(k) = a.max_iters {
                cfg.max_iters = k;
            }
            if let Some(t) = a.tol {
                cfg.tol_primal = t;
                cfg.tol_dual = t;
            }
            admm_bp(&op, &y, &cfg)?
        }
        SolverArg::Ist => {
            reject(a.rho.is_some(), "--rho")?;
            reject(a.sparsity.is_some(), "--sparsity")?;
            reject(a.residual.is_some(), "--residual")?;
            let mut cfg = IstConfig {
                lambda: bp_lambda()?,
                c: a.c,
                mode,
                continuation,
                trace: a.trace,
                ..IstConfig::default()
            };
            if let Some(k) = a.max_iters {
                cfg.max_iters = k;
            }
            if let Some(t) = a.tol {
                cfg.tol = t;
            }
            ist_bp(&op, &y, &cfg)?
        }
    };

    if let Some(path) = &a.code_out {
        write_file(path, &code_to_csv(&res.code, &op))?;
    }
    let body = serde_json::to_value(&res).map_err(Error::from)?;
    if res.converged {
        Ok(Outcome::ok(body))
    } else {
        eprintln!(
            "error: {} did not converge within {} iterations",
            res.solver, res.iterations
        );
        Ok(Outcome {
            code: 2,
            body: Some(body),
        })
    }
}

fn experiment(a: ExperimentArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config)?;
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set `output` in the config"))?;
    let outcome = convsparse::experiments::run_experiment(&cfg)?;
    outcome.write(&dir)?;
    let violations = outcome.violations();
    for v in violations {
        eprintln!(
            "violation: trial {} ({}, {}): {}",
            v.trial, v.solver, v.theorem, v.detail
        );
    }
    let body = json!({
        "out": dir,
        "records": outcome.records.len(),
        "mu_hat": outcome.meta.mu_hat,
        "violations": violations,
    });
    Ok(Outcome {
        code: if violations.is_empty() { 0 } else { 2 },
        body: Some(body),
    })
}

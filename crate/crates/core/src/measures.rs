//! Localized sparsity and coherence measures, and the threshold/bound
//! calculators that consume them.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv_dict::{local_cross_correlation, ConvOperator, GlobalCode, LocalDictionary};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Per-shift non-zero counts `v[i] = ‖α_i‖0`.
pub fn local_counts(code: &GlobalCode, op: &ConvOperator) -> Result<Vec<usize>> {
    if code.len() != op.code_len() {
        return Err(Error::LengthMismatch {
            what: "global code",
            expected: op.code_len(),
            got: code.len(),
        });
    }
    let m = op.filters();
    let mut counts = vec![0usize; op.signal_len()];
    for (c, _) in code.iter() {
        counts[c / m] += 1;
    }
    Ok(counts)
}

/// Per-stripe non-zero counts `n_i` for every cyclic stripe.
pub fn stripe_counts(code: &GlobalCode, op: &ConvOperator) -> Result<Vec<usize>> {
    op.require_stripe_geometry()?;
    let v = local_counts(code, op)?;
    let big_n = v.len();
    let half = op.patch_len() - 1;
    // Sliding window of width 2n − 1 centred at each shift.
    let mut window: usize = (0..=2 * half).map(|t| v[(t + big_n - half) % big_n]).sum();
    let mut out = Vec::with_capacity(big_n);
    for i in 0..big_n {
        out.push(window);
        window += v[(i + half + 1) % big_n];
        window -= v[(i + big_n - half) % big_n];
    }
    Ok(out)
}

/// ℓ0,∞: the non-zero count of the densest stripe.
pub fn l0_inf(code: &GlobalCode, op: &ConvOperator) -> Result<usize> {
    Ok(stripe_counts(code, op)?.into_iter().max().unwrap_or(0))
}

/// ℓ0,∞ of a support given as column indices.
pub fn support_l0_inf(support: &[usize], op: &ConvOperator) -> Result<usize> {
    let code = GlobalCode::from_entries(op.code_len(), support.iter().map(|&c| (c, 1.0)))?;
    l0_inf(&code, op)
}

/// Shifted mutual coherences `μ_s` for `s ∈ [−n+1, n−1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceProfile {
    n: usize,
    m: usize,
    mu: Vec<f64>,
}

impl CoherenceProfile {
    pub fn from_values(n: usize, m: usize, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != 2 * n - 1 {
            return Err(Error::LengthMismatch {
                what: "coherence profile",
                expected: 2 * n - 1,
                got: mu.len(),
            });
        }
        Ok(Self { n, m, mu })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Values ordered by shift, `s = −n+1` first.
    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_at(&self, s: isize) -> f64 {
        let n = self.n as isize;
        if s <= -n || s >= n {
            0.0
        } else {
            self.mu[(s + n - 1) as usize]
        }
    }

    /// `(s, μ_s)` pairs.
    pub fn shifts(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        let n = self.n as isize;
        (-n + 1..n).zip(self.mu.iter().copied())
    }

    /// Global mutual coherence, max over all shifts.
    pub fn mu_global(&self) -> f64 {
        self.mu.iter().copied().fold(0.0, f64::max)
    }

    pub fn mu_zero(&self) -> f64 {
        self.mu_at(0)
    }
}

/// `μ_s = max |⟨d_i, shift_s(d_j)⟩|` over filter pairs, excluding `i = j` at `s = 0`.
pub fn shifted_mutual_coherence(local: &LocalDictionary) -> CoherenceProfile {
    let n = local.n() as isize;
    let m = local.m();
    let mut mu = Vec::with_capacity((2 * n - 1) as usize);
    for s in -n + 1..n {
        let mut best: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                if s == 0 && a == b {
                    continue;
                }
                best = best.max(local_cross_correlation(local, a, b, s).abs());
            }
        }
        mu.push(best);
    }
    CoherenceProfile { n: local.n(), m, mu }
}

/// Per-stripe coherences `ζ_i = Σ_s n_{i,s} μ_s`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StripeCoherence {
    pub zeta: Vec<f64>,
    /// `ζ_i / n_i`, absent for empty stripes.
    pub mean_mu: Vec<Option<f64>>,
    pub max: f64,
}

/// Stripe coherence for every stripe, via cyclic convolution of the local
/// non-zero counts with the coherence profile.
pub fn stripe_coherence(code: &GlobalCode, op: &ConvOperator, profile: &CoherenceProfile) -> Result<StripeCoherence> {
    op.require_stripe_geometry()?;
    if profile.n() != op.patch_len() {
        return Err(Error::LengthMismatch {
            what: "coherence profile",
            expected: 2 * op.patch_len() - 1,
            got: profile.values().len(),
        });
    }
    let v = local_counts(code, op)?;
    let counts = stripe_counts(code, op)?;
    let big_n = v.len() as isize;
    let occupied: Vec<usize> = (0..v.len()).filter(|&t| v[t] > 0).collect();
    let mut zeta = vec![0.0; v.len()];
    // Only occupied shifts contribute; scatter each into the stripes that see it.
    for &t in &occupied {
        for (s, mu) in profile.shifts() {
            let i = (t as isize - s).rem_euclid(big_n) as usize;
            zeta[i] += v[t] as f64 * mu;
        }
    }
    let mean_mu = zeta
        .iter()
        .zip(&counts)
        .map(|(z, &c)| (c > 0).then(|| z / c as f64))
        .collect();
    let max = zeta.iter().copied().fold(0.0, f64::max);
    Ok(StripeCoherence { zeta, mean_mu, max })
}

/// Welch-type lower bound on the coherence of a convolutional dictionary.
pub fn welch_bound(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    ((m - 1.0) / (m * (2.0 * n - 1.0) - 1.0)).sqrt()
}

fn finite_or_null<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Scalar thresholds and bound functions derived from a coherence profile.
///
/// All "threshold" values are strict upper limits on ℓ0,∞ except
/// `bp_noisy_threshold`, which is inclusive. Non-finite thresholds (μ = 0)
/// serialize as `null` with `mu_is_zero` set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub m: usize,
    pub mu_global: f64,
    pub mu_zero: f64,
    pub mu_is_zero: bool,
    pub welch_lower: f64,
    /// `½(1 + 1/μ)`: uniqueness, noiseless OMP and BP, ERC.
    #[serde(serialize_with = "finite_or_null")]
    pub uniqueness_threshold: f64,
    /// Largest integer ℓ0,∞ strictly below `uniqueness_threshold`.
    pub max_admissible_l0inf: Option<usize>,
    /// `1 + 1/μ`.
    #[serde(serialize_with = "finite_or_null")]
    pub stripe_spark_lower: f64,
    /// `⅓(1 + 1/μ)`.
    #[serde(serialize_with = "finite_or_null")]
    pub bp_noisy_threshold: f64,
    /// Largest integer ℓ0,∞ not exceeding `bp_noisy_threshold`.
    pub max_admissible_l0inf_noisy_bp: Option<usize>,
    /// `½(1 + μ_0)`, compared against the maximal stripe coherence.
    pub stripe_coherence_threshold: f64,
}

/// Thresholds for a given profile.
pub fn thresholds(profile: &CoherenceProfile) -> BoundReport {
    let mu = profile.mu_global();
    let mu_is_zero = mu == 0.0;
    let inv = if mu_is_zero { f64::INFINITY } else { 1.0 / mu };
    let uniqueness = 0.5 * (1.0 + inv);
    let noisy_bp = (1.0 + inv) / 3.0;
    BoundReport {
        n: profile.n(),
        m: profile.m(),
        mu_global: mu,
        mu_zero: profile.mu_zero(),
        mu_is_zero,
        welch_lower: welch_bound(profile.n(), profile.m()),
        uniqueness_threshold: uniqueness,
        max_admissible_l0inf: largest_integer_below(uniqueness),
        stripe_spark_lower: 1.0 + inv,
        bp_noisy_threshold: noisy_bp,
        max_admissible_l0inf_noisy_bp: noisy_bp.is_finite().then(|| noisy_bp.floor() as usize),
        stripe_coherence_threshold: 0.5 * (1.0 + profile.mu_zero()),
    }
}

fn largest_integer_below(t: f64) -> Option<usize> {
    if !t.is_finite() {
        return None;
    }
    let f = t.floor();
    Some(if f == t { f as usize - 1 } else { f as usize })
}

impl BoundReport {
    /// Builds a report for a bare coherence value (no profile).
    pub fn for_mu(n: usize, m: usize, mu: f64) -> Self {
        let mut mus = vec![0.0; 2 * n - 1];
        mus[0] = mu;
        let profile = CoherenceProfile { n, m, mu: mus };
        thresholds(&profile)
    }

    /// SRIP cap `(k − 1)μ`.
    pub fn srip_upper(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("ℓ0,∞ value k must be at least 1"));
        }
        Ok((k - 1) as f64 * self.mu_global)
    }

    /// `4ε² / (1 − (2k − 1)μ)`.
    pub fn stability_upper(&self, k: usize, eps: f64) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("ℓ0,∞ value k must be at least 1"));
        }
        let denom = 1.0 - (2 * k - 1) as f64 * self.mu_global;
        if denom <= 0.0 {
            return Err(Error::invalid(format!(
                "k = {k} makes 1 - (2k-1)mu = {denom} non-positive"
            )));
        }
        Ok(4.0 * eps * eps / denom)
    }

    /// `ε² / (1 − μ(k − 1))`.
    pub fn omp_error_upper(&self, k: usize, eps: f64) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("ℓ0,∞ value k must be at least 1"));
        }
        let denom = 1.0 - (k - 1) as f64 * self.mu_global;
        if denom <= 0.0 {
            return Err(Error::invalid(format!(
                "k = {k} makes 1 - mu(k-1) = {denom} non-positive"
            )));
        }
        Ok(eps * eps / denom)
    }

    /// `½(1 + 1/μ) − (1/μ)·ε_L/|Γ_min|`: strict bound on ℓ0,∞ for noisy OMP.
    pub fn noisy_omp_threshold(&self, eps_local: f64, gamma_min: f64) -> Result<f64> {
        if !(gamma_min > 0.0) {
            return Err(Error::invalid("|Γ_min| must be positive"));
        }
        if self.mu_is_zero {
            return Ok(f64::INFINITY);
        }
        Ok(self.uniqueness_threshold - eps_local / (self.mu_global * gamma_min))
    }

    /// `(μ/2)(1 + 1/μ) − μk`: strict bound on `ε_L/|Γ_min|` for noisy OMP.
    pub fn noisy_omp_ratio_boundary(&self, k: usize) -> f64 {
        let mu = self.mu_global;
        0.5 * (mu + 1.0) - mu * k as f64
    }
}

/// Gram matrix `D_Tᵀ D_T` of a support.
fn support_gram(dense: &DMatrix<f64>, support: &[usize]) -> DMatrix<f64> {
    let dt = dense.select_columns(support);
    dt.transpose() * dt
}

/// Exact recovery coefficient `θ = 1 − max_{i∉T} ‖D_T† d_i‖1`.
pub fn compute_erc(dense: &DMatrix<f64>, support: &[usize]) -> Result<f64> {
    if support.is_empty() {
        return Ok(1.0);
    }
    let dt = dense.select_columns(support);
    let chol = (dt.transpose() * &dt).cholesky().ok_or(Error::RankDeficient {
        support_len: support.len(),
    })?;
    let svd_min = dt.clone().svd(false, false).singular_values.min();
    if svd_min <= 1e-10 {
        return Err(Error::RankDeficient {
            support_len: support.len(),
        });
    }
    let in_support: std::collections::HashSet<usize> = support.iter().copied().collect();
    let mut worst: f64 = 0.0;
    for i in 0..dense.ncols() {
        if in_support.contains(&i) {
            continue;
        }
        let rhs = dt.transpose() * dense.column(i);
        let coef = chol.solve(&rhs);
        worst = worst.max(coef.lp_norm(1));
    }
    Ok(1.0 - worst)
}

/// Eigenvalue extremes of a support Gram matrix and whether they sit inside
/// `[1 − (k−1)μ, 1 + (k−1)μ]` with `k` the support's ℓ0,∞.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GramSpectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub l0inf: usize,
    pub bound_ok: bool,
}

pub fn gram_eigen_interval(
    op: &ConvOperator,
    dense: &DMatrix<f64>,
    support: &[usize],
    mu: f64,
) -> Result<GramSpectrum> {
    if support.is_empty() {
        return Err(Error::invalid("support must be non-empty"));
    }
    let k = support_l0_inf(support, op)?;
    let eig = support_gram(dense, support).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let radius = (k - 1) as f64 * mu;
    let slack = 1e-12;
    Ok(GramSpectrum {
        lambda_min: lo,
        lambda_max: hi,
        l0inf: k,
        bound_ok: lo >= 1.0 - radius - slack && hi <= 1.0 + radius + slack,
    })
}

/// Outcome of [`stripe_spark_bruteforce`].
#[derive(Clone, Debug, PartialEq)]
pub enum StripeSpark {
    /// Smallest ℓ0,∞ among null-space vectors whose support has at most
    /// `max_card` atoms, with a witness (first non-zero scaled to 1).
    Found { value: usize, witness: GlobalCode },
    /// No null-space vector with at most `max_card` atoms exists.
    AboveLimit { max_card: usize },
}

pub const MAX_SPARK_CARD: usize = 12;

/// Exhaustive search for the sparsest (in ℓ0,∞) null-space vector over
/// supports of at most `max_card` atoms, in lexicographic order.
pub fn stripe_spark_bruteforce(op: &ConvOperator, max_card: usize) -> Result<StripeSpark> {
    if max_card > MAX_SPARK_CARD {
        return Err(Error::invalid(format!("max_card must be at most {MAX_SPARK_CARD}")));
    }
    op.require_stripe_geometry()?;
    let dense = op.build_dense()?;
    let cols = dense.ncols();
    let mut best: Option<(usize, Vec<usize>)> = None;
    for card in 1..=max_card.min(cols) {
        let mut combo: Vec<usize> = (0..card).collect();
        loop {
            let k = support_l0_inf(&combo, op)?;
            let improves = best.as_ref().is_none_or(|(b, _)| k < *b);
            if improves && is_rank_deficient(&dense, &combo) {
                best = Some((k, combo.clone()));
            }
            if !next_combination(&mut combo, cols) {
                break;
            }
        }
    }
    match best {
        None => Ok(StripeSpark::AboveLimit { max_card }),
        Some((value, support)) => {
            let witness = null_vector(&dense, &support, op.code_len())?;
            Ok(StripeSpark::Found { value, witness })
        }
    }
}

fn rank_tolerance(dt: &DMatrix<f64>) -> f64 {
    1e-10 * dt.nrows().max(dt.ncols()) as f64
}

fn is_rank_deficient(dense: &DMatrix<f64>, support: &[usize]) -> bool {
    if support.len() > dense.nrows() {
        return true;
    }
    let dt = dense.select_columns(support);
    let tol = rank_tolerance(&dt);
    dt.svd(false, false).singular_values.min() <= tol
}

fn null_vector(dense: &DMatrix<f64>, support: &[usize], len: usize) -> Result<GlobalCode> {
    let dt = dense.select_columns(support);
    // Pad with zero rows so the SVD exposes a full right basis.
    let rows = dt.nrows().max(dt.ncols());
    let mut padded = DMatrix::zeros(rows, dt.ncols());
    padded.rows_mut(0, dt.nrows()).copy_from(&dt);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("SVD failed"))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty support");
    let mut vec: Vec<f64> = v_t.row(idx).iter().copied().collect();
    let tol = 1e-9;
    let lead = vec
        .iter()
        .copied()
        .find(|v| v.abs() > tol)
        .ok_or_else(|| Error::invalid("degenerate null vector"))?;
    for v in vec.iter_mut() {
        *v = if v.abs() > tol { *v / lead } else { 0.0 };
    }
    GlobalCode::from_entries(len, support.iter().copied().zip(vec))
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for t in i + 1..k {
                combo[t] = combo[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Draws a random support with ℓ0,∞ exactly `k`: `k` atoms inside one stripe,
/// then extra atoms anywhere as long as no stripe exceeds `k`.
pub fn random_support_with_l0inf<R: Rng>(op: &ConvOperator, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    op.require_stripe_geometry()?;
    if k == 0 || k > op.stripe_len() || k > op.code_len() {
        return Err(Error::invalid(format!(
            "no support with l0,inf = {k} fits (stripe holds {} atoms)",
            op.stripe_len()
        )));
    }
    let big_n = op.signal_len();
    let m = op.filters();
    let half = op.patch_len() - 1;
    let center = rng.random_range(0..big_n);
    let picks = sample(rng, op.stripe_len(), k);
    let mut chosen: Vec<usize> = picks
        .iter()
        .map(|p| {
            let shift = (center + big_n - half + p / m) % big_n;
            shift * m + p % m
        })
        .collect();
    let mut counts = vec![0usize; big_n];
    for &c in &chosen {
        counts[c / m] += 1;
    }
    let extra_attempts = rng.random_range(0..=2 * big_n);
    let mut taken: std::collections::HashSet<usize> = chosen.iter().copied().collect();
    for _ in 0..extra_attempts {
        let c = rng.random_range(0..op.code_len());
        if taken.contains(&c) {
            continue;
        }
        let shift = c / m;
        let fits = (0..=2 * half).all(|w| {
            // every stripe containing `shift` must stay within k
            let centre = (shift + big_n + half - w) % big_n;
            let total: usize = (0..=2 * half)
                .map(|t| counts[(centre + big_n - half + t) % big_n])
                .sum();
            total < k
        });
        if fits {
            counts[shift] += 1;
            taken.insert(c);
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Sampled lower estimate of the SRIP constant `δ_k`.
///
/// Each sample draws a support with ℓ0,∞ = `k` and takes the exact distortion
/// `max(1 − λ_min, λ_max − 1)` of its Gram matrix.
pub fn estimate_srip(op: &ConvOperator, k: usize, n_samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 0);
    let mut best: f64 = 0.0;
    for _ in 0..n_samples {
        let support = random_support_with_l0inf(op, k, &mut rng)?;
        let s = support.len();
        let mut g = DMatrix::zeros(s, s);
        for a in 0..s {
            for b in a..s {
                let v = op.atom_inner(support[a], support[b]);
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let eig = g.symmetric_eigenvalues();
        best = best.max((1.0 - eig.min()).max(eig.max() - 1.0));
    }
    Ok(best)
}

/// `‖Dᵀ(Y − X_LS)‖∞` where `X_LS` is the least-squares fit of `y` on `support`.
pub fn ls_residual_correlation(op: &ConvOperator, y: &[f64], support: &[usize]) -> Result<f64> {
    let coef = crate::pursuit::least_squares_on_support(op, y, support)?;
    let code = GlobalCode::from_entries(op.code_len(), support.iter().copied().zip(coef))?;
    let fit = op.apply(&code)?;
    let r: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
    Ok(op.apply_adjoint(&r)?.iter().fold(0.0, |a, v| a.max(v.abs())))
}

/// Dual certificate for noiseless basis pursuit:
/// `max_{i∉T} |d_iᵀ D_T (D_TᵀD_T)⁻¹ sign(Γ_T)|`.
///
/// A value below one (with `D_T` of full rank) proves that `code` is the
/// unique minimizer of `‖Γ‖1` subject to `DΓ = D·code`.
pub fn bp_dual_certificate(op: &ConvOperator, code: &GlobalCode) -> Result<f64> {
    if code.len() != op.code_len() {
        return Err(Error::LengthMismatch {
            what: "global code",
            expected: op.code_len(),
            got: code.len(),
        });
    }
    let support = code.support();
    if support.is_empty() {
        return Ok(0.0);
    }
    let k = support.len();
    let gram = DMatrix::from_fn(k, k, |a, b| op.atom_inner(support[a], support[b]));
    let chol = gram.cholesky().ok_or(Error::RankDeficient { support_len: k })?;
    let signs = nalgebra::DVector::from_iterator(k, support.iter().map(|&c| code.get(c).signum()));
    let v = chol.solve(&signs);
    let dual_code = GlobalCode::from_entries(op.code_len(), support.iter().copied().zip(v.iter().copied()))?;
    let w = op.apply(&dual_code)?;
    let corr = op.apply_adjoint(&w)?;
    let on: std::collections::HashSet<usize> = support.into_iter().collect();
    Ok(corr
        .iter()
        .enumerate()
        .filter(|(i, _)| !on.contains(i))
        .fold(0.0, |a, (_, v)| a.max(v.abs())))
}

/// Maximum off-diagonal `|G|` of a dense dictionary: the dense-oracle coherence.
pub fn dense_mutual_coherence(dense: &DMatrix<f64>) -> f64 {
    let g = dense.transpose() * dense;
    let mut best: f64 = 0.0;
    for a in 0..g.nrows() {
        for b in 0..g.ncols() {
            if a != b {
                best = best.max(g[(a, b)].abs());
            }
        }
    }
    best
}

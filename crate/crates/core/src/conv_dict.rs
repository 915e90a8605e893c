//! Convolutional dictionary machinery.
//!
//! The global dictionary `D` (N × mN) is never stored. It is the
//! concatenation of `m` banded circulant matrices built from the columns of a
//! local dictionary `D_L` (n × m). Columns are interlaced: column `c = i·m + j`
//! is filter `j` placed at sample `i`, wrapping cyclically. The same ordering
//! is used on disk.
//!
//! Dense matrices are only built on request ([`ConvOperator::build_dense`]) and
//! serve as an oracle and for small combinatorial computations.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default cap on the number of entries of a dense global dictionary.
pub const DEFAULT_DENSE_LIMIT: usize = 1_000_000;

/// Environment variable overriding [`DEFAULT_DENSE_LIMIT`].
pub const DENSE_LIMIT_ENV: &str = "CONVSPARSE_DENSE_LIMIT";

const UNIT_NORM_TOL: f64 = 1e-12;
const POWER_ITERATION_CAP: usize = 10_000;

/// Effective dense-matrix cap, honoring `CONVSPARSE_DENSE_LIMIT`.
pub fn dense_limit() -> usize {
    std::env::var(DENSE_LIMIT_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_DENSE_LIMIT)
}

/// The n × m local dictionary with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDictionary {
    atoms: DMatrix<f64>,
}

/// Normalizes every column of `raw` to unit ℓ2 norm.
pub fn make_local_dictionary(raw: &DMatrix<f64>) -> Result<LocalDictionary> {
    LocalDictionary::new(raw.clone())
}

impl LocalDictionary {
    pub fn new(mut raw: DMatrix<f64>) -> Result<Self> {
        if raw.nrows() == 0 || raw.ncols() == 0 {
            return Err(Error::invalid(format!(
                "local dictionary must be at least 1x1, got {}x{}",
                raw.nrows(),
                raw.ncols()
            )));
        }
        for (column, col) in raw.column_iter().enumerate() {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, column });
            }
        }
        for (column, mut col) in raw.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm == 0.0 {
                return Err(Error::ZeroColumn { column });
            }
            // Leave already-unit columns alone so that a reloaded dictionary
            // is bit-identical to the saved one.
            if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                col /= norm;
            }
        }
        Ok(Self { atoms: raw })
    }

    /// Builds from column-major data of shape n × m.
    pub fn from_column_major(n: usize, m: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::LengthMismatch {
                what: "local dictionary data",
                expected: n * m,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_column_slice(n, m, data))
    }

    /// Patch length `n`.
    pub fn n(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of filters `m`.
    pub fn m(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    /// Column `j` as a contiguous slice.
    pub fn atom(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.atoms.as_slice()[j * n..(j + 1) * n]
    }

    /// Largest deviation of a column norm from one.
    pub fn max_norm_defect(&self) -> f64 {
        self.atoms
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn is_normalized(&self) -> bool {
        self.max_norm_defect() <= UNIT_NORM_TOL
    }
}

/// Position of a global atom: filter `filter` starting at sample `shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub shift: usize,
    pub filter: usize,
}

/// A global sparse code of length mN. Zero entries are never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalCode {
    len: usize,
    entries: BTreeMap<usize, f64>,
}

impl GlobalCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        Self {
            len: values.len(),
            entries,
        }
    }

    pub fn from_entries(len: usize, entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut code = Self::zeros(len);
        for (index, value) in entries {
            code.set(index, value)?;
        }
        Ok(code)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of stored (non-zero) entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries.get(&index).copied().unwrap_or(0.0)
    }

    /// Sets an entry; writing zero removes it.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if index >= self.len {
            return Err(Error::IndexOutOfRange { index, bound: self.len });
        }
        if value == 0.0 {
            self.entries.remove(&index);
        } else {
            self.entries.insert(index, value);
        }
        Ok(())
    }

    /// Sorted non-zero column indices.
    pub fn support(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (k, v) in self.iter() {
            out[k] = v;
        }
        out
    }

    /// Entry-wise sum; used for ℓ0,∞ triangle-inequality checks.
    pub fn add(&self, other: &GlobalCode) -> Result<GlobalCode> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                what: "code addition",
                expected: self.len,
                got: other.len,
            });
        }
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.set(k, out.get(k) + v)?;
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Smallest non-zero magnitude, or `None` for the zero code.
    pub fn min_abs_nonzero(&self) -> Option<f64> {
        self.entries.values().map(|v| v.abs()).min_by(|a, b| a.total_cmp(b))
    }

    pub(crate) fn range(&self, lo: usize, hi: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.range(lo..hi).map(|(k, v)| (*k, *v))
    }
}

/// The implicit N × mN global dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvOperator {
    local: LocalDictionary,
    signal_len: usize,
}

impl ConvOperator {
    /// Requires `signal_len ≥ n`. Stripe-based computations additionally need
    /// `signal_len ≥ 2n − 1`, see [`ConvOperator::require_stripe_geometry`].
    pub fn new(local: LocalDictionary, signal_len: usize) -> Result<Self> {
        if signal_len < local.n() {
            return Err(Error::Geometry(format!(
                "signal length {} is shorter than the patch length {}",
                signal_len,
                local.n()
            )));
        }
        if !local.is_normalized() {
            return Err(Error::invalid("local dictionary columns are not unit norm"));
        }
        Ok(Self { local, signal_len })
    }

    pub fn local(&self) -> &LocalDictionary {
        &self.local
    }

    /// Global signal length N.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// Patch length n.
    pub fn patch_len(&self) -> usize {
        self.local.n()
    }

    /// Number of filters m.
    pub fn filters(&self) -> usize {
        self.local.m()
    }

    /// mN.
    pub fn code_len(&self) -> usize {
        self.signal_len * self.local.m()
    }

    /// Number of local codes in a stripe, 2n − 1.
    pub fn stripe_shifts(&self) -> usize {
        2 * self.patch_len() - 1
    }

    /// (2n − 1)m.
    pub fn stripe_len(&self) -> usize {
        self.stripe_shifts() * self.filters()
    }

    pub fn has_stripe_geometry(&self) -> bool {
        self.signal_len >= self.stripe_shifts()
    }

    /// Stripes are only well defined (no local code appears twice) for N ≥ 2n − 1.
    pub fn require_stripe_geometry(&self) -> Result<()> {
        if self.has_stripe_geometry() {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "stripe computations need N >= 2n-1 = {}, got N = {}",
                self.stripe_shifts(),
                self.signal_len
            )))
        }
    }

    pub fn column(&self, atom: Atom) -> usize {
        atom.shift * self.filters() + atom.filter
    }

    pub fn atom_of(&self, column: usize) -> Atom {
        Atom {
            shift: column / self.filters(),
            filter: column % self.filters(),
        }
    }

    /// Inner product of two global atoms, computed from the local dictionary.
    pub fn atom_inner(&self, a: usize, b: usize) -> f64 {
        let (aa, ab) = (self.atom_of(a), self.atom_of(b));
        let big_n = self.signal_len as isize;
        let d = (ab.shift as isize - aa.shift as isize).rem_euclid(big_n);
        // Below stripe geometry an atom pair can overlap on both sides.
        local_cross_correlation(&self.local, aa.filter, ab.filter, d)
            + local_cross_correlation(&self.local, aa.filter, ab.filter, d - big_n)
    }

    fn check_code_len(&self, got: usize) -> Result<()> {
        if got != self.code_len() {
            return Err(Error::LengthMismatch {
                what: "global code",
                expected: self.code_len(),
                got,
            });
        }
        Ok(())
    }

    fn check_signal_len(&self, got: usize) -> Result<()> {
        if got != self.signal_len {
            return Err(Error::LengthMismatch {
                what: "signal",
                expected: self.signal_len,
                got,
            });
        }
        Ok(())
    }

    /// `D·Γ`: the cyclic superposition of `D_L α_i` placed at sample `i`.
    pub fn apply(&self, code: &GlobalCode) -> Result<Vec<f64>> {
        self.check_code_len(code.len())?;
        let n = self.patch_len();
        let m = self.filters();
        let mut ext = vec![0.0; self.signal_len + n - 1];
        for (c, v) in code.iter() {
            let i = c / m;
            let atom = self.local.atom(c % m);
            for (dst, a) in ext[i..i + n].iter_mut().zip(atom) {
                *dst += a * v;
            }
        }
        Ok(self.fold(ext))
    }

    /// `D·Γ` for a dense coefficient vector.
    pub fn apply_dense(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_code_len(coeffs.len())?;
        let mut out = vec![0.0; self.signal_len];
        self.apply_into(coeffs, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.patch_len();
        let m = self.filters();
        let big_n = self.signal_len;
        let mut ext = vec![0.0; big_n + n - 1];
        for (i, block) in coeffs.chunks_exact(m).enumerate() {
            for (j, &v) in block.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let atom = self.local.atom(j);
                for (dst, a) in ext[i..i + n].iter_mut().zip(atom) {
                    *dst += a * v;
                }
            }
        }
        out.copy_from_slice(&ext[..big_n]);
        for (k, v) in ext[big_n..].iter().enumerate() {
            out[k] += v;
        }
    }

    fn fold(&self, mut ext: Vec<f64>) -> Vec<f64> {
        let big_n = self.signal_len;
        let tail: Vec<f64> = ext.drain(big_n..).collect();
        for (k, v) in tail.into_iter().enumerate() {
            ext[k] += v;
        }
        ext
    }

    /// Signal with its first n − 1 samples appended, so every cyclic patch is
    /// a contiguous window.
    pub(crate) fn extended(&self, signal: &[f64]) -> Vec<f64> {
        let n = self.patch_len();
        let mut ext = Vec::with_capacity(signal.len() + n - 1);
        ext.extend_from_slice(signal);
        ext.extend_from_slice(&signal[..n - 1]);
        ext
    }

    /// `Dᵀ·y`: block `i` is `D_Lᵀ` times the cyclic patch at `i`.
    pub fn apply_adjoint(&self, signal: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(signal.len())?;
        let mut out = vec![0.0; self.code_len()];
        self.adjoint_into(signal, &mut out);
        Ok(out)
    }

    pub(crate) fn adjoint_into(&self, signal: &[f64], out: &mut [f64]) {
        let n = self.patch_len();
        let m = self.filters();
        let ext = self.extended(signal);
        for (i, block) in out.chunks_exact_mut(m).enumerate() {
            let patch = &ext[i..i + n];
            for (j, dst) in block.iter_mut().enumerate() {
                *dst = dot(self.local.atom(j), patch);
            }
        }
    }

    /// Dense N × mN dictionary under the limit from [`dense_limit`].
    pub fn build_dense(&self) -> Result<DMatrix<f64>> {
        self.build_dense_with_limit(dense_limit())
    }

    pub fn build_dense_with_limit(&self, limit: usize) -> Result<DMatrix<f64>> {
        let big_n = self.signal_len;
        let required = big_n * self.code_len();
        if required > limit {
            return Err(Error::DenseLimit { required, limit });
        }
        let n = self.patch_len();
        let m = self.filters();
        let mut dense = DMatrix::zeros(big_n, self.code_len());
        for i in 0..big_n {
            for j in 0..m {
                let col = i * m + j;
                for r in 0..n {
                    dense[((i + r) % big_n, col)] += self.local.atoms()[(r, j)];
                }
            }
        }
        Ok(dense)
    }

    /// Samples `i … i+n−1` of `signal`, wrapping cyclically.
    pub fn extract_patch(&self, signal: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_signal_len(signal.len())?;
        self.check_shift(i)?;
        let big_n = self.signal_len;
        Ok((0..self.patch_len()).map(|r| signal[(i + r) % big_n]).collect())
    }

    /// Largest ℓ2 norm over all N cyclic patches.
    pub fn max_patch_norm(&self, signal: &[f64]) -> Result<f64> {
        self.check_signal_len(signal.len())?;
        let n = self.patch_len();
        let sq: Vec<f64> = self.extended(signal).iter().map(|v| v * v).collect();
        let mut best: f64 = 0.0;
        for i in 0..self.signal_len {
            let e: f64 = sq[i..i + n].iter().sum();
            best = best.max(e);
        }
        Ok(best.sqrt())
    }

    fn check_shift(&self, i: usize) -> Result<()> {
        if i >= self.signal_len {
            return Err(Error::IndexOutOfRange {
                index: i,
                bound: self.signal_len,
            });
        }
        Ok(())
    }

    /// Local code `α_i` (length m).
    pub fn extract_local(&self, code: &GlobalCode, i: usize) -> Result<Vec<f64>> {
        self.check_code_len(code.len())?;
        self.check_shift(i)?;
        let m = self.filters();
        let mut out = vec![0.0; m];
        for (c, v) in code.range(i * m, (i + 1) * m) {
            out[c - i * m] = v;
        }
        Ok(out)
    }

    /// Stripe `γ_i = [α_{i−n+1}; …; α_{i+n−1}]` with cyclic wrap.
    pub fn extract_stripe(&self, code: &GlobalCode, i: usize) -> Result<Vec<f64>> {
        self.require_stripe_geometry()?;
        self.check_code_len(code.len())?;
        self.check_shift(i)?;
        let n = self.patch_len() as isize;
        let m = self.filters();
        let big_n = self.signal_len as isize;
        let mut out = vec![0.0; self.stripe_len()];
        for (b, s) in (-n + 1..n).enumerate() {
            let k = (i as isize + s).rem_euclid(big_n) as usize;
            for (c, v) in code.range(k * m, (k + 1) * m) {
                out[b * m + c - k * m] = v;
            }
        }
        Ok(out)
    }

    /// The centre m entries of a stripe (the `Q` operator).
    pub fn center_of_stripe(&self, stripe: &[f64]) -> Result<Vec<f64>> {
        center_of_stripe(stripe, self.patch_len(), self.filters())
    }

    /// Largest eigenvalue of `DᵀD` by power iteration on `D·Dᵀ`.
    pub fn spectral_norm_sq(&self, tol: f64) -> Result<PowerEstimate> {
        if !(tol > 0.0) {
            return Err(Error::invalid("power iteration tolerance must be positive"));
        }
        let big_n = self.signal_len;
        // Fixed start vector: a constant one would sit on a single Fourier mode.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0fd0);
        let mut v: Vec<f64> = (0..big_n).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v);
        let mut coeffs = vec![0.0; self.code_len()];
        let mut w = vec![0.0; big_n];
        let mut estimate = 0.0;
        for it in 1..=POWER_ITERATION_CAP {
            self.adjoint_into(&v, &mut coeffs);
            self.apply_into(&coeffs, &mut w);
            let next = dot(&v, &w);
            v.copy_from_slice(&w);
            normalize(&mut v);
            if it > 1 && (next - estimate).abs() <= tol * next.abs() {
                return Ok(PowerEstimate {
                    value: next,
                    iterations: it,
                });
            }
            estimate = next;
        }
        Err(Error::NotConverged {
            iterations: POWER_ITERATION_CAP,
            last: estimate,
        })
    }
}

/// Result of [`ConvOperator::spectral_norm_sq`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
}

/// The centre m entries of a stripe of length (2n − 1)m.
pub fn center_of_stripe(stripe: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    let expected = (2 * n - 1) * m;
    if stripe.len() != expected {
        return Err(Error::LengthMismatch {
            what: "stripe",
            expected,
            got: stripe.len(),
        });
    }
    let start = (n - 1) * m;
    Ok(stripe[start..start + m].to_vec())
}

/// `Σ_r D_L[r, a] · D_L[r − s, b]` over the physical overlap; zero for |s| ≥ n.
pub fn local_cross_correlation(local: &LocalDictionary, a: usize, b: usize, s: isize) -> f64 {
    let n = local.n() as isize;
    if s.abs() >= n {
        return 0.0;
    }
    let da = local.atom(a);
    let db = local.atom(b);
    if s >= 0 {
        let s = s as usize;
        dot(&da[s..], &db[..db.len() - s])
    } else {
        let s = (-s) as usize;
        dot(&da[..da.len() - s], &db[s..])
    }
}

/// The n × (2n − 1)m matrix `Ω` mapping a stripe to its patch.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeDictionary {
    n: usize,
    m: usize,
    omega: DMatrix<f64>,
}

impl StripeDictionary {
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// Block `Ω_s` (n × m) for shift `s ∈ [−n+1, n−1]`.
    pub fn block(&self, s: isize) -> Result<DMatrix<f64>> {
        let n = self.n as isize;
        if s <= -n || s >= n {
            return Err(Error::invalid(format!("shift {s} outside [-{}, {}]", n - 1, n - 1)));
        }
        let b = (s + n - 1) as usize;
        Ok(self.omega.columns(b * self.m, self.m).into_owned())
    }

    /// `Ω·γ` for a stripe `γ`.
    pub fn apply(&self, stripe: &[f64]) -> Result<Vec<f64>> {
        if stripe.len() != self.omega.ncols() {
            return Err(Error::LengthMismatch {
                what: "stripe",
                expected: self.omega.ncols(),
                got: stripe.len(),
            });
        }
        let v = &self.omega * nalgebra::DVector::from_column_slice(stripe);
        Ok(v.as_slice().to_vec())
    }
}

/// `Ω_s` is `D_L` shifted down by `s` with rows falling outside zeroed.
pub fn build_stripe_dictionary(local: &LocalDictionary) -> StripeDictionary {
    let n = local.n();
    let m = local.m();
    let ni = n as isize;
    let mut omega = DMatrix::zeros(n, (2 * n - 1) * m);
    for (b, s) in (-ni + 1..ni).enumerate() {
        for j in 0..m {
            for r in 0..ni {
                let src = r - s;
                if (0..ni).contains(&src) {
                    omega[(r as usize, b * m + j)] = local.atoms()[(src as usize, j)];
                }
            }
        }
    }
    StripeDictionary { n, m, omega }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let nrm = norm2(v);
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    }
}

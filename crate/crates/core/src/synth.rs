//! Ground-truth generators: dictionaries, sparse codes, noise and complete
//! synthetic instances. Everything is a pure function of its parameters and
//! seed, see [`crate::rng`].

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv_dict::{norm2, ConvOperator, GlobalCode, LocalDictionary};
use crate::error::{Error, Result};
use crate::io;
use crate::measures::{l0_inf, shifted_mutual_coherence};
use crate::rng::{rng_for, PRNG_NAME};

/// Distribution of the non-zero coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmplitudeLaw {
    GaussianUnit,
    /// Uniform on `[−a, a]`.
    UniformSymmetric {
        a: f64,
    },
    /// `|value|` uniform on `[lo, hi]`, random sign.
    UniformRing {
        lo: f64,
        hi: f64,
    },
}

impl AmplitudeLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AmplitudeLaw::GaussianUnit => Ok(()),
            AmplitudeLaw::UniformSymmetric { a } if a > 0.0 && a.is_finite() => Ok(()),
            AmplitudeLaw::UniformRing { lo, hi } if lo >= 0.0 && lo < hi && hi.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("invalid amplitude law {other:?}"))),
        }
    }

    /// One non-zero draw; exact zeros are redrawn.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        loop {
            let v = match *self {
                AmplitudeLaw::GaussianUnit => StandardNormal.sample(rng),
                AmplitudeLaw::UniformSymmetric { a } => rng.random_range(-a..=a),
                AmplitudeLaw::UniformRing { lo, hi } => {
                    let mag = rng.random_range(lo..=hi);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                }
            };
            if v != 0.0 {
                return v;
            }
        }
    }
}

/// Code with `cardinality` non-zeros on a uniformly drawn support.
pub fn random_code(op: &ConvOperator, cardinality: usize, law: AmplitudeLaw, seed: u64) -> Result<GlobalCode> {
    random_code_with(op, cardinality, law, &mut rng_for(seed, 0))
}

pub fn random_code_with<R: Rng>(
    op: &ConvOperator,
    cardinality: usize,
    law: AmplitudeLaw,
    rng: &mut R,
) -> Result<GlobalCode> {
    law.validate()?;
    let len = op.code_len();
    if cardinality > len {
        return Err(Error::invalid(format!(
            "cardinality {cardinality} exceeds the {len} atoms of the dictionary"
        )));
    }
    let mut support = sample(rng, len, cardinality).into_vec();
    support.sort_unstable();
    let entries: Vec<(usize, f64)> = support.into_iter().map(|c| (c, law.sample(rng))).collect();
    GlobalCode::from_entries(len, entries)
}

/// How to scale the Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NoiseTarget {
    /// Rescale so that `‖e‖2` equals the value exactly.
    GlobalNorm(f64),
    /// i.i.d. `N(0, σ²)` per sample.
    PerSampleSigma(f64),
}

impl NoiseTarget {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            NoiseTarget::GlobalNorm(v) | NoiseTarget::PerSampleSigma(v) => v,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("noise level {v} must be non-negative")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySignal {
    pub y: Vec<f64>,
    pub e: Vec<f64>,
    pub eps_global: f64,
    /// Largest norm of the N cyclic n-sample patches of `e`.
    pub eps_local: f64,
}

pub fn add_noise(op: &ConvOperator, x: &[f64], target: NoiseTarget, seed: u64) -> Result<NoisySignal> {
    add_noise_with(op, x, target, &mut rng_for(seed, 0))
}

pub fn add_noise_with<R: Rng>(op: &ConvOperator, x: &[f64], target: NoiseTarget, rng: &mut R) -> Result<NoisySignal> {
    target.validate()?;
    let mut e: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    match target {
        NoiseTarget::GlobalNorm(eps) => {
            let nrm = norm2(&e);
            if eps == 0.0 || nrm == 0.0 {
                e.iter_mut().for_each(|v| *v = 0.0);
            } else {
                e.iter_mut().for_each(|v| *v *= eps / nrm);
            }
        }
        NoiseTarget::PerSampleSigma(sigma) => e.iter_mut().for_each(|v| *v *= sigma),
    }
    with_noise(op, x, e)
}

/// Adds a given noise vector and measures it.
pub fn with_noise(op: &ConvOperator, x: &[f64], e: Vec<f64>) -> Result<NoisySignal> {
    if x.len() != e.len() {
        return Err(Error::LengthMismatch {
            what: "noise",
            expected: x.len(),
            got: e.len(),
        });
    }
    let eps_local = op.max_patch_norm(&e)?;
    let y = x.iter().zip(&e).map(|(a, b)| a + b).collect();
    Ok(NoisySignal {
        y,
        eps_global: norm2(&e),
        eps_local,
        e,
    })
}

/// First `m` DCT-II basis vectors on `n` points, unit normalized.
pub fn dct_local_dictionary(n: usize, m: usize) -> Result<LocalDictionary> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "DCT dictionary needs 1 <= m <= n, got n={n}, m={m}"
        )));
    }
    let nf = n as f64;
    let raw = DMatrix::from_fn(n, m, |t, k| {
        (std::f64::consts::PI * (t as f64 + 0.5) * k as f64 / nf).cos()
    });
    LocalDictionary::new(raw)
}

/// i.i.d. standard Gaussian entries, columns normalized. Uses stream 0.
pub fn random_local_dictionary(n: usize, m: usize, seed: u64) -> Result<LocalDictionary> {
    random_local_dictionary_stream(n, m, seed, 0)
}

fn random_local_dictionary_stream(n: usize, m: usize, seed: u64, stream: u64) -> Result<LocalDictionary> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("dictionary dimensions must be positive"));
    }
    let mut rng = rng_for(seed, stream);
    let data: Vec<f64> = (0..n * m).map(|_| StandardNormal.sample(&mut rng)).collect();
    LocalDictionary::from_column_major(n, m, &data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub dictionary: LocalDictionary,
    pub mu: f64,
    /// Stream of the winning candidate.
    pub candidate: u64,
}

/// Best of `n_candidates` random dictionaries by global mutual coherence.
/// Candidate `c` is drawn from stream `c`, so candidate 0 is
/// [`random_local_dictionary`]`(n, m, seed)`. Ties keep the lower index.
pub fn coherence_search(n: usize, m: usize, n_candidates: usize, seed: u64) -> Result<SearchResult> {
    if n_candidates == 0 {
        return Err(Error::invalid("coherence search needs at least one candidate"));
    }
    let scored: Vec<(u64, f64)> = (0..n_candidates as u64)
        .into_par_iter()
        .map(|c| {
            let d = random_local_dictionary_stream(n, m, seed, c)?;
            Ok((c, shifted_mutual_coherence(&d).mu_global()))
        })
        .collect::<Result<_>>()?;
    let (candidate, mu) = scored
        .into_iter()
        .reduce(|best, cur| if cur.1 < best.1 { cur } else { best })
        .expect("at least one candidate");
    Ok(SearchResult {
        dictionary: random_local_dictionary_stream(n, m, seed, candidate)?,
        mu,
        candidate,
    })
}

/// A ground-truth code together with its clean and noisy signals.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    pub op: ConvOperator,
    pub gamma_true: GlobalCode,
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub y: Vec<f64>,
    pub eps_global: f64,
    pub eps_local: f64,
    /// Smallest non-zero magnitude; 0 for the zero code.
    pub gamma_min: f64,
    pub l0inf_true: usize,
}

/// Tolerance for `x = D·Γ` when re-validating an instance.
const SYNTH_TOL: f64 = 1e-12;

impl SyntheticInstance {
    pub fn from_parts(op: ConvOperator, gamma_true: GlobalCode, e: Vec<f64>) -> Result<Self> {
        let x = op.apply(&gamma_true)?;
        let noisy = with_noise(&op, &x, e)?;
        let l0inf_true = l0_inf(&gamma_true, &op)?;
        Ok(Self {
            gamma_min: gamma_true.min_abs_nonzero().unwrap_or(0.0),
            gamma_true,
            x,
            e: noisy.e,
            y: noisy.y,
            eps_global: noisy.eps_global,
            eps_local: noisy.eps_local,
            l0inf_true,
            op,
        })
    }

    /// Code and noise drawn from one stream.
    pub fn generate<R: Rng>(
        op: &ConvOperator,
        cardinality: usize,
        law: AmplitudeLaw,
        noise: Option<NoiseTarget>,
        rng: &mut R,
    ) -> Result<Self> {
        let gamma = random_code_with(op, cardinality, law, rng)?;
        let x = op.apply(&gamma)?;
        let e = match noise {
            Some(t) => add_noise_with(op, &x, t, rng)?.e,
            None => vec![0.0; x.len()],
        };
        Self::from_parts(op.clone(), gamma, e)
    }

    /// Checks every stored quantity against a recomputation.
    pub fn validate(&self) -> Result<()> {
        let big_n = self.op.signal_len();
        for (what, v) in [("x", &self.x), ("e", &self.e), ("y", &self.y)] {
            if v.len() != big_n {
                return Err(Error::InvalidInstance(format!(
                    "{what} has length {}, expected {big_n}",
                    v.len()
                )));
            }
        }
        let x = self.op.apply(&self.gamma_true)?;
        let dx = x.iter().zip(&self.x).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        if dx > SYNTH_TOL {
            return Err(Error::InvalidInstance(format!("x differs from D*gamma by {dx:e}")));
        }
        if self
            .y
            .iter()
            .zip(self.x.iter().zip(&self.e))
            .any(|(y, (x, e))| *y != x + e)
        {
            return Err(Error::InvalidInstance("y is not exactly x + e".into()));
        }
        let eps_global = norm2(&self.e);
        let eps_local = self.op.max_patch_norm(&self.e)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        if !close(eps_global, self.eps_global) || !close(eps_local, self.eps_local) {
            return Err(Error::InvalidInstance("stored noise energies do not match e".into()));
        }
        if self.eps_local > self.eps_global * (1.0 + 1e-12) {
            return Err(Error::InvalidInstance("eps_local exceeds eps_global".into()));
        }
        if self.gamma_min != self.gamma_true.min_abs_nonzero().unwrap_or(0.0) {
            return Err(Error::InvalidInstance("gamma_min does not match the code".into()));
        }
        if self.l0inf_true != l0_inf(&self.gamma_true, &self.op)? {
            return Err(Error::InvalidInstance("l0inf_true does not match the code".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile {
            prng: PRNG_NAME.to_string(),
            n: self.op.patch_len(),
            m: self.op.filters(),
            signal_len: self.op.signal_len(),
            eps_global: self.eps_global,
            eps_local: self.eps_local,
            gamma_min: self.gamma_min,
            l0inf_true: self.l0inf_true,
            dictionary_csv: io::dictionary_to_csv(self.op.local()),
            gamma_csv: io::code_to_csv(&self.gamma_true, &self.op),
            x_csv: io::signal_to_csv(&self.x),
            e_csv: io::signal_to_csv(&self.e),
            y_csv: io::signal_to_csv(&self.y),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: InstanceFile = serde_json::from_str(text)?;
        let local = io::dictionary_from_csv(&f.dictionary_csv)?;
        if local.n() != f.n || local.m() != f.m {
            return Err(Error::InvalidInstance(
                "dictionary shape disagrees with metadata".into(),
            ));
        }
        let op = ConvOperator::new(local, f.signal_len)?;
        let inst = Self {
            gamma_true: io::code_from_csv(&f.gamma_csv, &op)?,
            x: io::signal_from_csv(&f.x_csv)?,
            e: io::signal_from_csv(&f.e_csv)?,
            y: io::signal_from_csv(&f.y_csv)?,
            eps_global: f.eps_global,
            eps_local: f.eps_local,
            gamma_min: f.gamma_min,
            l0inf_true: f.l0inf_true,
            op,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    prng: String,
    n: usize,
    m: usize,
    signal_len: usize,
    eps_global: f64,
    eps_local: f64,
    gamma_min: f64,
    l0inf_true: usize,
    dictionary_csv: String,
    gamma_csv: String,
    x_csv: String,
    e_csv: String,
    y_csv: String,
}

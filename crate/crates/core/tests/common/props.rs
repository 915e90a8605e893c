//! Randomized checks of the structural results on small instances (N ≤ 64),
//! shared by the property tests and the acceptance run.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use convsparse::measures::{
    compute_erc, estimate_srip, l0_inf, ls_residual_correlation, random_support_with_l0inf, shifted_mutual_coherence,
    stripe_coherence, thresholds, CoherenceProfile,
};
use convsparse::pursuit::{ist_bp_observed, ist_step_size, soft, IstConfig};
use convsparse::rng::rng_for;
use convsparse::synth::{random_local_dictionary, AmplitudeLaw};
use convsparse::{ConvOperator, GlobalCode, LocalDictionary};

pub const CASES: u32 = 500;
const MAX_N: usize = 64;

/// Random dictionaries, plus single filters close to a spike whose low
/// coherence admits supports with more than one atom per stripe.
fn dictionary() -> impl Strategy<Value = LocalDictionary> {
    prop_oneof![
        (2usize..=6, 1usize..=3, any::<u64>()).prop_map(|(n, m, seed)| random_local_dictionary(n, m, seed).unwrap()),
        (3usize..=8, 0.005f64..0.3, any::<u64>()).prop_map(|(n, eps, seed)| {
            let mut rng = rng_for(seed, 0);
            let data: Vec<f64> = (0..n)
                .map(|k| {
                    if k == 0 {
                        1.0
                    } else {
                        eps * AmplitudeLaw::GaussianUnit.sample(&mut rng)
                    }
                })
                .collect();
            LocalDictionary::from_column_major(n, 1, &data).unwrap()
        }),
    ]
}

fn operator() -> impl Strategy<Value = ConvOperator> {
    dictionary().prop_flat_map(|d| {
        let lo = 2 * d.n() - 1;
        (Just(d), lo..=MAX_N).prop_map(|(d, big_n)| ConvOperator::new(d, big_n).unwrap())
    })
}

fn gaussian(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| AmplitudeLaw::GaussianUnit.sample(rng)).collect()
}

fn code_on(op: &ConvOperator, support: &[usize], rng: &mut impl Rng) -> GlobalCode {
    let law = AmplitudeLaw::UniformRing { lo: 0.5, hi: 2.0 };
    GlobalCode::from_entries(op.code_len(), support.iter().map(|&c| (c, law.sample(rng)))).unwrap()
}

/// Independent ℓ0,∞: count atoms per cyclic stripe directly.
fn l0inf_by_counting(op: &ConvOperator, support: &[usize]) -> usize {
    let big_n = op.signal_len() as isize;
    let n = op.patch_len() as isize;
    let m = op.filters();
    (0..big_n)
        .map(|i| {
            support
                .iter()
                .filter(|&&c| {
                    let shift = (c / m) as isize;
                    let d = (shift - i).rem_euclid(big_n);
                    d < n || d > big_n - n
                })
                .count()
        })
        .max()
        .unwrap_or(0)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Support with ℓ0,∞ uniformly drawn from `1..=k_max`.
fn support_up_to(op: &ConvOperator, k_max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = rng.random_range(1..=k_max.min(op.stripe_len()));
    random_support_with_l0inf(op, k, rng).unwrap()
}

/// Runs `test` on `cases` draws from a fixed-seed generator.
fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub type Suite = (&'static str, fn(u32) -> Result<(), String>);

pub const SUITES: [Suite; 9] = [
    ("l0inf_triangle_inequality", l0inf_triangle_inequality),
    ("operator_and_adjoint_match_dense", operator_and_adjoint_match_dense),
    (
        "gram_eigenvalues_lie_in_stripe_interval",
        gram_eigenvalues_lie_in_stripe_interval,
    ),
    ("srip_estimate_is_capped", srip_estimate_is_capped),
    ("erc_positive_under_l0inf_condition", erc_positive_under_l0inf_condition),
    (
        "stripe_coherence_grows_with_support",
        stripe_coherence_grows_with_support,
    ),
    (
        "stripe_condition_is_weaker_when_mu_is_at_zero_shift",
        stripe_condition_is_weaker_when_mu_is_at_zero_shift,
    ),
    ("ls_residual_correlation_is_bounded", ls_residual_correlation_is_bounded),
    ("local_ist_matches_global_iteration", local_ist_matches_global_iteration),
];

pub fn l0inf_triangle_inequality(cases: u32) -> Result<(), String> {
    run(
        cases,
        (operator(), any::<u64>(), 1usize..=4, 1usize..=4),
        |(op, seed, k1, k2)| {
            let mut rng = rng_for(seed, 0);
            let s1 = random_support_with_l0inf(&op, k1.min(op.stripe_len()), &mut rng).unwrap();
            let s2 = random_support_with_l0inf(&op, k2.min(op.stripe_len()), &mut rng).unwrap();
            let a = code_on(&op, &s1, &mut rng);
            let b = code_on(&op, &s2, &mut rng);
            let sum = a.add(&b).unwrap();
            let la = l0_inf(&a, &op).unwrap();
            let lb = l0_inf(&b, &op).unwrap();
            prop_assert_eq!(la, l0inf_by_counting(&op, &s1));
            prop_assert!(l0_inf(&sum, &op).unwrap() <= la + lb);
            Ok(())
        },
    )
}

pub fn operator_and_adjoint_match_dense(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>()), |(op, seed)| {
        let mut rng = rng_for(seed, 0);
        let dense = op.build_dense().unwrap();
        let coeffs = gaussian(op.code_len(), &mut rng);
        let y = gaussian(op.signal_len(), &mut rng);
        let want = &dense * DVector::from_column_slice(&coeffs);
        prop_assert!(max_diff(&op.apply(&GlobalCode::from_dense(&coeffs)).unwrap(), want.as_slice()) < 1e-10);
        let want_t = dense.transpose() * DVector::from_column_slice(&y);
        prop_assert!(max_diff(&op.apply_adjoint(&y).unwrap(), want_t.as_slice()) < 1e-10);
        Ok(())
    })
}

pub fn gram_eigenvalues_lie_in_stripe_interval(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>(), 1usize..=5), |(op, seed, k)| {
        let mut rng = rng_for(seed, 0);
        let mu = shifted_mutual_coherence(op.local()).mu_global();
        let support = random_support_with_l0inf(&op, k.min(op.stripe_len()), &mut rng).unwrap();
        let kk = l0inf_by_counting(&op, &support);
        let dense = op.build_dense().unwrap();
        let dt = dense.select_columns(&support);
        let eig = (dt.transpose() * &dt).symmetric_eigenvalues();
        let radius = (kk - 1) as f64 * mu;
        prop_assert!(eig.min() >= 1.0 - radius - 1e-10, "{} < {}", eig.min(), 1.0 - radius);
        prop_assert!(eig.max() <= 1.0 + radius + 1e-10, "{} > {}", eig.max(), 1.0 + radius);
        Ok(())
    })
}

pub fn srip_estimate_is_capped(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>(), 1usize..=4), |(op, seed, k)| {
        let k = k.min(op.stripe_len());
        let mu = shifted_mutual_coherence(op.local()).mu_global();
        let delta = estimate_srip(&op, k, 4, seed).unwrap();
        prop_assert!(delta <= (k - 1) as f64 * mu + 1e-10, "delta {} mu {}", delta, mu);
        Ok(())
    })
}

pub fn erc_positive_under_l0inf_condition(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>()), |(op, seed)| {
        let report = thresholds(&shifted_mutual_coherence(op.local()));
        let Some(k_max) = report.max_admissible_l0inf else {
            return Ok(());
        };
        prop_assume!(k_max >= 1);
        let mut rng = rng_for(seed, 0);
        let support = support_up_to(&op, k_max, &mut rng);
        let theta = compute_erc(&op.build_dense().unwrap(), &support).unwrap();
        prop_assert!(
            theta > 0.0,
            "theta {} for l0inf {} (admissible {})",
            theta,
            l0inf_by_counting(&op, &support),
            k_max
        );
        Ok(())
    })
}

pub fn stripe_coherence_grows_with_support(cases: u32) -> Result<(), String> {
    run(
        cases,
        (operator(), any::<u64>(), 1usize..=4, 0.0f64..1.0),
        |(op, seed, k, keep)| {
            let mut rng = rng_for(seed, 0);
            let profile = shifted_mutual_coherence(op.local());
            let big = random_support_with_l0inf(&op, k.min(op.stripe_len()), &mut rng).unwrap();
            let small: Vec<usize> = big.iter().copied().filter(|_| rng.random::<f64>() < keep).collect();
            let zb = stripe_coherence(&code_on(&op, &big, &mut rng), &op, &profile).unwrap();
            let zs = stripe_coherence(&code_on(&op, &small, &mut rng), &op, &profile).unwrap();
            prop_assert!(zs.max <= zb.max + 1e-12);
            for (a, b) in zs.zeta.iter().zip(&zb.zeta) {
                prop_assert!(*a <= b + 1e-12);
            }
            Ok(())
        },
    )
}

pub fn stripe_condition_is_weaker_when_mu_is_at_zero_shift(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>(), 0.02f64..0.6), |(op, seed, mu0)| {
        // A profile peaking at s = 0, as the implication requires.
        let n = op.patch_len();
        let mut rng = rng_for(seed, 0);
        let mu: Vec<f64> = (0..2 * n - 1)
            .map(|s| if s == n - 1 { mu0 } else { mu0 * rng.random::<f64>() })
            .collect();
        let profile = CoherenceProfile::from_values(n, op.filters(), mu).unwrap();
        let report = thresholds(&profile);
        prop_assert_eq!(report.mu_global, report.mu_zero);
        let k_max = report.max_admissible_l0inf.unwrap();
        let support = support_up_to(&op, k_max, &mut rng);
        prop_assert!((l0inf_by_counting(&op, &support) as f64) < report.uniqueness_threshold);
        let z = stripe_coherence(&code_on(&op, &support, &mut rng), &op, &profile).unwrap();
        prop_assert!(
            z.max < report.stripe_coherence_threshold,
            "{} >= {}",
            z.max,
            report.stripe_coherence_threshold
        );
        Ok(())
    })
}

pub fn ls_residual_correlation_is_bounded(cases: u32) -> Result<(), String> {
    run(cases, (operator(), any::<u64>(), 0.001f64..0.5), |(op, seed, noise)| {
        let report = thresholds(&shifted_mutual_coherence(op.local()));
        let Some(k_max) = report.max_admissible_l0inf else {
            return Ok(());
        };
        let mut rng = rng_for(seed, 0);
        let support = support_up_to(&op, k_max, &mut rng);
        let gamma = code_on(&op, &support, &mut rng);
        let x = op.apply(&gamma).unwrap();
        let e: Vec<f64> = gaussian(op.signal_len(), &mut rng)
            .into_iter()
            .map(|v| v * noise)
            .collect();
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let eps_local = op.max_patch_norm(&e).unwrap();
        let corr = ls_residual_correlation(&op, &y, &support).unwrap();
        prop_assert!(corr <= 2.0 * eps_local + 1e-12, "{} > 2·{}", corr, eps_local);
        Ok(())
    })
}

pub fn local_ist_matches_global_iteration(cases: u32) -> Result<(), String> {
    run(
        cases,
        (operator(), any::<u64>(), 0.001f64..0.5),
        |(op, seed, lambda)| {
            let mut rng = rng_for(seed, 0);
            let y = gaussian(op.signal_len(), &mut rng);
            let dense = op.build_dense().unwrap();
            let c = ist_step_size(&op).unwrap();
            let cfg = IstConfig {
                c: Some(c),
                max_iters: 50,
                tol: 1e-300,
                ..IstConfig::with_lambda(lambda)
            };
            let mut local = Vec::new();
            let res = ist_bp_observed(&op, &y, &cfg, |s| local.push(s.code.to_vec())).unwrap();
            prop_assert!(local.len() == 50 || res.converged);
            let yv = DVector::from_column_slice(&y);
            let mut global: DVector<f64> = DVector::zeros(op.code_len());
            let dt: DMatrix<f64> = dense.transpose();
            for it in &local {
                let grad = &dt * (&yv - &dense * &global);
                global = (&global + grad / c).map(|v| soft(v, lambda / c));
                prop_assert!(max_diff(it, global.as_slice()) < 1e-12);
            }
            Ok(())
        },
    )
}

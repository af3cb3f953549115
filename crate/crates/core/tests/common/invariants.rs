//! Randomized invariant checks shared by the property tests and the acceptance run.

use super::*;
use fsim::estimator::{fit, normalize_direction, FitOptions, IndexCoefficient};
use fsim::inference::{estimate_covariance, orthonormal_complement, GramAverage};
use fsim::selection::{cv_select, make_folds, CvMode, CvOptions, CvPlan};
use fsim::simulation::{simulate, Design};
use fsim::study::{run_study, BandwidthChoice, StudyOptions};
use fsim::weights_at_anchor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 256;

/// Runs `check` over `CASES` inputs (or `FSIM_PROPTEST_CASES`) drawn from `strategy`; the error carries
/// the minimal failing input.
pub fn run<S: Strategy>(strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let cases = std::env::var("FSIM_PROPTEST_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(CASES);
    let config = Config {
        cases,
        max_global_rejects: 4 * cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

fn direction(p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, p).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn any_direction() -> impl Strategy<Value = Vec<f64>> {
    (1usize..=8).prop_flat_map(direction)
}

fn dataset_and_beta() -> impl Strategy<Value = (u64, Vec<f64>)> {
    (any::<u64>(), prop::collection::vec(-1.0..1.0f64, 4))
}

fn beta_for(ds: &Dataset, raw: &[f64]) -> IndexCoefficient {
    let v: Vec<f64> = (0..ds.p()).map(|q| raw[q] + if q == 0 { 1e-3 } else { 0.0 }).collect();
    normalize_direction(&v).unwrap()
}

pub fn weights_normalized() -> Result<(), String> {
    run((dataset_and_beta(), 0.05..3.0f64, 0usize..3), |((seed, b), scale, kernel)| {
        let ds = random_dataset(seed, 20);
        let beta = beta_for(&ds, &b);
        let h = wide_bandwidths(&ds, beta.as_slice()).scaled(scale);
        let spec = suites::SPECS[kernel];
        for k in 0..ds.n_obs() {
            let anchor = (ds.times()[k], beta.dot(ds.z(k)));
            let w = weights_at_anchor(&ds, &beta, anchor, h, spec);
            prop_assert!(w.entries.iter().all(|&(_, v)| v >= 0.0));
            if !w.empty {
                let total: f64 = w.entries.iter().map(|e| e.1).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12, "weights sum to {total}");
            }
        }
        Ok(())
    })
}

pub fn coefficient_norm_and_sign() -> Result<(), String> {
    run(any_direction(), |v| {
        let b = IndexCoefficient::new(v).unwrap();
        let norm: f64 = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-12);
        let first = b.as_slice().iter().find(|x| x.abs() > 1e-8).copied().unwrap();
        prop_assert!(first > 0.0);
        Ok(())
    })
}

pub fn normalize_scale_sign_invariant() -> Result<(), String> {
    let scale = prop_oneof![1e-6..1e6f64, -1e6..-1e-6f64];
    run((any_direction(), scale), |(v, c)| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // keep clear of the sign threshold, where rounding may decide
        prop_assume!(v.iter().all(|x| (x.abs() / n - 1e-8).abs() > 1e-9));
        let a = normalize_direction(&v).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let b = normalize_direction(&scaled).unwrap();
        prop_assert!(max_abs_diff(a.as_slice(), b.as_slice()) <= 1e-12);
        Ok(())
    })
}

fn sym_max(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

pub fn covariance_structure() -> Result<(), String> {
    run((dataset_and_beta(), 0.6..2.0f64), |((seed, b), scale)| {
        let ds = random_dataset(seed, 40);
        let beta = beta_for(&ds, &b);
        let h = wide_bandwidths(&ds, beta.as_slice()).scaled(scale);
        let spec = suites::SPECS[(seed % 3) as usize];
        let Ok(result) = fit(&ds, &beta, h, spec, FitOptions { tol: 1e-6, max_iter: 3 }) else {
            return Err(TestCaseError::reject("fit failed"));
        };
        let cov = match estimate_covariance(&ds, &result, h, spec, GramAverage::OwnSize) {
            Ok(c) => c,
            Err(fsim::Error::DegenerateCurvature) => return Err(TestCaseError::reject("degenerate curvature")),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let s = &cov.sigma_hat;
        let norm = sym_max(s);
        prop_assert!(sym_max(&(s - s.transpose())) <= 1e-12 * norm.max(1e-300));
        let eig = s.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() >= -1e-10 * norm, "min eigenvalue {} of {:?}; sigma* eig {:?}", eig.eigenvalues.min(), eig.eigenvalues, cov.sigma_star_hat.clone().symmetric_eigen().eigenvalues);
        let bhat = nalgebra::DVector::from_column_slice(result.beta_hat.as_slice());
        let null = (s * &bhat).norm();
        prop_assert!(null <= 1e-8 * s.norm(), "|Σβ| = {null}, |Σ| = {}", s.norm());
        Ok(())
    })
}

pub fn complement_identities() -> Result<(), String> {
    run((2usize..=9).prop_flat_map(direction), |v| {
        let b = IndexCoefficient::new(v).unwrap();
        let p = b.dim();
        let basis = orthonormal_complement(&b);
        prop_assert_eq!(basis.shape(), (p, p - 1));
        let bv = nalgebra::DVector::from_column_slice(b.as_slice());
        let gram = basis.transpose() * &basis;
        prop_assert!((gram - DMatrix::<f64>::identity(p - 1, p - 1)).amax() <= 1e-12);
        prop_assert!((basis.transpose() * &bv).amax() <= 1e-12);
        let proj = &basis * basis.transpose() + &bv * bv.transpose();
        prop_assert!((proj - DMatrix::<f64>::identity(p, p)).amax() <= 1e-12);
        Ok(())
    })
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn cv_fingerprint(ds: &Dataset, seed: u64, mode: CvMode) -> Option<Vec<u64>> {
    let beta = IndexCoefficient::uniform(ds.p());
    let wide = wide_bandwidths(ds, beta.as_slice());
    let m = 3.min(ds.n_subjects());
    let plan = CvPlan {
        m,
        folds: make_folds(ds, m, seed).ok()?,
        grid: vec![wide, wide.scaled(0.7), wide.scaled(1.4)],
        mode,
    };
    let opts = CvOptions {
        fit: FitOptions { tol: 1e-6, max_iter: 3 },
        init: beta.clone(),
        pilot_beta: Some(beta),
    };
    let r = cv_select(ds, &plan, KernelSpec::default(), &opts).ok()?;
    Some(r.candidates.iter().flat_map(|c| [c.score.to_bits(), c.failures as u64]).collect())
}

pub fn thread_count_determinism() -> Result<(), String> {
    run((any::<u64>(), 2usize..=4), |(seed, threads)| {
        let ds = random_dataset(seed, 20);
        let mode = if seed % 2 == 0 { CvMode::Pilot } else { CvMode::Full };
        let one = in_pool(1, || cv_fingerprint(&ds, seed, mode));
        let many = in_pool(threads, || cv_fingerprint(&ds, seed, mode));
        prop_assert_eq!(one, many);

        let sim_a = simulate(Design::I, 4, seed).unwrap().0;
        let sim_b = in_pool(threads, || simulate(Design::I, 4, seed).unwrap().0);
        prop_assert_eq!(sim_a, sim_b);

        let h = Bandwidths::new(0.3, 1.2).unwrap();
        let opts = StudyOptions::default();
        let study = |t| in_pool(t, || run_study(Design::I, 12, 3, BandwidthChoice::Fixed(h), seed, &opts).unwrap().rows);
        let (a, b) = (study(1), study(threads));
        let bits = |rows: &[fsim::study::ReplicateRow]| -> Vec<u64> {
            rows.iter().flat_map(|r| r.beta_hat.iter().map(|v| v.to_bits()).chain([r.imse.to_bits()])).collect()
        };
        prop_assert_eq!(bits(&a), bits(&b));
        Ok(())
    })
}

/// Every invariant with its label.
pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("weight normalization", weights_normalized),
        ("coefficient norm and sign", coefficient_norm_and_sign),
        ("normalize_direction scale/sign invariance", normalize_scale_sign_invariant),
        ("sandwich symmetry, PSD and null space", covariance_structure),
        ("orthonormal complement identities", complement_identities),
        ("determinism across thread counts", thread_count_determinism),
    ]
}

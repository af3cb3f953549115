//! Noiseless affine single-index data: `Y = c₀ + c₁ t + c₂ β₀ᵀZ`.

use fsim::estimator::{anchor_local_fits, fit, update_beta, FitOptions, IndexCoefficient};
use fsim::{Bandwidths, Dataset, KernelSpec, Observation, Subject};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SHAPES: [(f64, f64, f64); 3] = [(1.0, 2.0, 3.0), (0.0, -1.0, 0.5), (2.0, 0.5, -4.0)];
pub const DIMS: [usize; 3] = [2, 4, 6];
pub const TOL: f64 = 1e-8;

pub struct Case {
    pub ds: Dataset,
    pub beta0: IndexCoefficient,
    pub shape: (f64, f64, f64),
    pub h: Bandwidths,
}

pub fn case(shape: (f64, f64, f64), p: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..p).map(|q| 1.0 + q as f64 * 0.5 + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let beta0 = IndexCoefficient::new(raw).unwrap();
    let (c0, c1, c2) = shape;
    let subjects = (0..40)
        .map(|i| {
            let size = rng.random_range(3..=6);
            let observations = (0..size)
                .map(|_| {
                    let t: f64 = rng.random();
                    let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    Observation {
                        t,
                        y: c0 + c1 * t + c2 * beta0.dot(&z),
                        z,
                    }
                })
                .collect();
            Subject {
                id: format!("a{i}"),
                observations,
            }
        })
        .collect();
    Case {
        ds: Dataset::new(subjects).unwrap(),
        beta0,
        shape,
        h: Bandwidths::new(0.5, 1.5).unwrap(),
    }
}

pub fn all_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (s, &shape) in SHAPES.iter().enumerate() {
        for &p in &DIMS {
            out.push(case(shape, p, 100 + 10 * s as u64 + p as u64));
        }
    }
    out
}

/// Worst error of the local slopes `(b, d)` against `(c₁, c₂)` under `β₀`.
pub fn local_fit_error(c: &Case) -> f64 {
    let fits = anchor_local_fits(&c.ds, &c.beta0, c.h, KernelSpec::default());
    let (_, c1, c2) = c.shape;
    fits.iter()
        .filter(|f| f.ok)
        .map(|f| (f.b - c1).abs().max((f.d - c2).abs()) / c1.abs().max(c2.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Distance from `β₀` after one update started at `β₀`.
pub fn fixed_point_error(c: &Case) -> f64 {
    let spec = KernelSpec::default();
    let fits = anchor_local_fits(&c.ds, &c.beta0, c.h, spec);
    let (next, _) = update_beta(&c.ds, &fits, &c.beta0, c.h, spec).unwrap();
    next.distance(&c.beta0)
}

/// Distance from `β₀` and iterations used, starting from the uniform direction.
pub fn recovery(c: &Case, max_iter: usize) -> (f64, usize) {
    let init = IndexCoefficient::uniform(c.ds.p());
    let r = fit(&c.ds, &init, c.h, KernelSpec::default(), FitOptions { tol: 1e-12, max_iter }).unwrap();
    (r.beta_hat.distance(&c.beta0), r.iterations)
}

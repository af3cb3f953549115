//! Simulation designs, Karhunen–Loève trajectory sampling and error metrics.
//!
//! Design I uses time-invariant covariates (one Bernoulli and five
//! equicorrelated Gaussians) on `t ∈ [0, 1]`; design II uses five
//! longitudinal covariates on `t ∈ [−3, 5.5]`. Design II's covariates are a
//! synthetic stand-in generator:
//!
//! * age ~ N(0, 1), constant within subject;
//! * packs per day = 0.5·Poisson(2) at the first visit, then a random walk
//!   with N(0, 0.1²) increments, floored at zero;
//! * drug use: a subject-level Bernoulli(0.5) state, flipped independently with
//!   probability 0.1 at each visit;
//! * partners ~ Poisson(1) per visit;
//! * CESD: stationary AR(1) across visits with ρ = 0.7 and unit variance.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Observation, Subject};
use crate::error::{Error, Result};
use crate::estimator::IndexCoefficient;
use crate::smoother::{linspace, Surface};

pub type Eigenfunction = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type LinkFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Finite Karhunen–Loève model `Σ_k ξ_k φ_k(t)` plus white measurement error.
#[derive(Clone)]
pub struct EigenModel {
    pub eigenfunctions: Vec<Eigenfunction>,
    pub eigenvalues: Vec<f64>,
    pub error_variance: f64,
}

impl fmt::Debug for EigenModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EigenModel")
            .field("components", &self.eigenfunctions.len())
            .field("eigenvalues", &self.eigenvalues)
            .field("error_variance", &self.error_variance)
            .finish()
    }
}

impl EigenModel {
    pub fn new(eigenfunctions: Vec<Eigenfunction>, eigenvalues: Vec<f64>, error_variance: f64) -> Result<Self> {
        if eigenfunctions.len() != eigenvalues.len() {
            return Err(Error::InvalidInput("one eigenvalue per eigenfunction required".into()));
        }
        if eigenvalues.iter().any(|l| !(*l >= 0.0)) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        if !(error_variance >= 0.0) {
            return Err(Error::InvalidInput("error variance must be nonnegative".into()));
        }
        Ok(EigenModel {
            eigenfunctions,
            eigenvalues,
            error_variance,
        })
    }

    /// `Γ(s, t) = Σ_k λ_k φ_k(s) φ_k(t)`.
    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        self.eigenfunctions
            .iter()
            .zip(&self.eigenvalues)
            .map(|(phi, l)| l * phi(s) * phi(t))
            .sum()
    }

    /// Gram matrix of the eigenfunctions under the trapezoid rule on `points` nodes.
    pub fn gram(&self, domain: (f64, f64), points: usize) -> Vec<Vec<f64>> {
        let grid = linspace(domain.0, domain.1, points);
        let w = trapezoid_weights(&grid);
        let k = self.eigenfunctions.len();
        let vals: Vec<Vec<f64>> = self
            .eigenfunctions
            .iter()
            .map(|phi| grid.iter().map(|&t| phi(t)).collect())
            .collect();
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| (0..grid.len()).map(|i| w[i] * vals[a][i] * vals[b][i]).sum())
                    .collect()
            })
            .collect()
    }

    /// Largest deviation of [`EigenModel::gram`] (201 nodes) from the identity.
    pub fn orthonormality_error(&self, domain: (f64, f64)) -> f64 {
        let g = self.gram(domain, 201);
        let mut worst: f64 = 0.0;
        for (a, row) in g.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Trapezoid weights for a (possibly non-uniform) increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let right = if i + 1 < n { grid[i + 1] - grid[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// True model behind a simulated dataset.
#[derive(Clone)]
pub struct SimulationTruth {
    pub beta0: IndexCoefficient,
    pub mu: LinkFn,
    pub domain: (f64, f64),
    pub eigen: EigenModel,
}

impl fmt::Debug for SimulationTruth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulationTruth")
            .field("beta0", &self.beta0)
            .field("domain", &self.domain)
            .field("eigen", &self.eigen)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    I,
    II,
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Design::I),
            "II" | "ii" | "2" => Ok(Design::II),
            other => Err(Error::InvalidInput(format!("unknown design {other:?}"))),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::I => "I",
            Design::II => "II",
        })
    }
}

const GRID_INTERVALS: usize = 50;
const JITTER_SD: f64 = 0.01;

/// Jittered equally spaced schedule on `[0, 1]`: the 51-point grid is perturbed
/// by N(0, 0.01²) noise and clamped, then `n_obs` of the interior points
/// `s_1..s_49` are drawn without replacement. Returned sorted.
pub fn jittered_schedule(rng: &mut impl Rng, n_obs: usize) -> Result<Vec<f64>> {
    if !(2..=GRID_INTERVALS - 1).contains(&n_obs) {
        return Err(Error::InvalidInput(format!(
            "schedule size must be in 2..=49, got {n_obs}"
        )));
    }
    let jitter = Normal::new(0.0, JITTER_SD).expect("valid sd");
    let s: Vec<f64> = (0..=GRID_INTERVALS)
        .map(|i| {
            let c = i as f64 / GRID_INTERVALS as f64;
            (c + jitter.sample(rng)).clamp(0.0, 1.0)
        })
        .collect();
    let mut times: Vec<f64> = sample_indices(rng, GRID_INTERVALS - 1, n_obs)
        .into_iter()
        .map(|i| s[i + 1])
        .collect();
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times)
}

/// Draws scores `ξ_k ~ N(0, λ_k)` and returns `Σ_k ξ_k φ_k(t) + ε(t)` at `times`.
pub fn sample_trajectory(eigen: &EigenModel, times: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let scores: Vec<f64> = eigen
        .eigenvalues
        .iter()
        .map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noise_sd = eigen.error_variance.sqrt();
    times
        .iter()
        .map(|&t| {
            let smooth: f64 = eigen
                .eigenfunctions
                .iter()
                .zip(&scores)
                .map(|(phi, xi)| xi * phi(t))
                .sum();
            smooth + noise_sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Link of design I: `sin(z̃) sin(πt) + (1 − sin(z̃)) cos(πt)`.
pub fn mu_design_i(t: f64, u: f64) -> f64 {
    u.sin() * (PI * t).sin() + (1.0 - u.sin()) * (PI * t).cos()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Link of design II: `6 + z̃/5 + 1/(1 + eᵗ) + logistic(−t (z̃ + 3))`.
pub fn mu_design_ii(t: f64, u: f64) -> f64 {
    6.0 + u / 5.0 + logistic(-t) + logistic(-t * (u + 3.0))
}

pub fn truth_design_i() -> SimulationTruth {
    let s2 = std::f64::consts::SQRT_2;
    let eigen = EigenModel::new(
        vec![
            Arc::new(move |t: f64| -(PI * t).sin() * s2),
            Arc::new(move |t: f64| (PI * t).cos() * s2),
        ],
        vec![0.25, 0.0625],
        0.01,
    )
    .expect("valid eigen model");
    SimulationTruth {
        beta0: IndexCoefficient::new(vec![2.0, 1.0, 0.0, 3.0, 0.0, -1.0]).expect("nonzero"),
        mu: Arc::new(mu_design_i),
        domain: (0.0, 1.0),
        eigen,
    }
}

pub fn truth_design_ii() -> SimulationTruth {
    let c = 4.25f64.sqrt();
    let eigen = EigenModel::new(
        vec![
            Arc::new(move |t: f64| ((t + 3.0) * PI / 8.5).cos() / c),
            Arc::new(move |t: f64| -((t + 3.0) * PI / 8.5).sin() / c),
        ],
        vec![2.0, 0.5],
        0.1,
    )
    .expect("valid eigen model");
    SimulationTruth {
        beta0: IndexCoefficient::new(vec![0.1043, 0.5213, 0.8341, -0.1043, -0.1043]).expect("nonzero"),
        mu: Arc::new(mu_design_ii),
        domain: (-3.0, 5.5),
        eigen,
    }
}

fn subject_id(i: usize) -> String {
    format!("s{i:05}")
}

fn cluster_size(rng: &mut impl Rng) -> usize {
    rng.random_range(2..=10)
}

/// Design I covariates: `Z₁ ~ Bernoulli(0.5)`, `(Z₂..Z₆) ~ N₅(0, 0.5 I + 0.5 11ᵀ)`.
pub fn covariates_design_i(rng: &mut impl Rng) -> Vec<f64> {
    let bern = Bernoulli::new(0.5).expect("valid p");
    let mut z = Vec::with_capacity(6);
    z.push(if bern.sample(rng) { 1.0 } else { 0.0 });
    let common: f64 = rng.sample(StandardNormal);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..5 {
        let own: f64 = rng.sample(StandardNormal);
        z.push(r * own + r * common);
    }
    z
}

/// Simulates design I with `n` subjects.
pub fn simulate_i(n: usize, seed: u64) -> Result<(Dataset, SimulationTruth)> {
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    let truth = truth_design_i();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let z = covariates_design_i(&mut rng);
        let u = truth.beta0.dot(&z);
        let n_obs = cluster_size(&mut rng);
        let times = jittered_schedule(&mut rng, n_obs)?;
        let dev = sample_trajectory(&truth.eigen, &times, &mut rng);
        let observations = times
            .iter()
            .zip(dev)
            .map(|(&t, e)| Observation {
                t,
                y: (truth.mu)(t, u) + e,
                z: z.clone(),
            })
            .collect();
        subjects.push(Subject {
            id: subject_id(i),
            observations,
        });
    }
    Ok((Dataset::new(subjects)?, truth))
}

/// Synthetic longitudinal covariates for design II at `visits` visits.
pub fn covariates_design_ii(rng: &mut impl Rng, visits: usize) -> Vec<Vec<f64>> {
    let age: f64 = rng.sample(StandardNormal);
    let pois2 = Poisson::new(2.0).expect("valid rate");
    let pois1 = Poisson::new(1.0).expect("valid rate");
    let drift = Normal::new(0.0, 0.1).expect("valid sd");
    let flip = Bernoulli::new(0.1).expect("valid p");
    let drug_state = Bernoulli::new(0.5).expect("valid p").sample(rng);
    let rho: f64 = 0.7;
    let innov = (1.0 - rho * rho).sqrt();

    let mut packs: f64 = 0.5 * pois2.sample(rng);
    let mut cesd: f64 = rng.sample(StandardNormal);
    let mut rows = Vec::with_capacity(visits);
    for v in 0..visits {
        if v > 0 {
            packs = (packs + drift.sample(rng)).max(0.0);
            cesd = rho * cesd + innov * rng.sample::<f64, _>(StandardNormal);
        }
        let drug = drug_state ^ flip.sample(rng);
        let partners = pois1.sample(rng);
        rows.push(vec![age, packs, if drug { 1.0 } else { 0.0 }, partners, cesd]);
    }
    rows
}

/// Simulates design II with `n` subjects.
pub fn simulate_ii(n: usize, seed: u64) -> Result<(Dataset, SimulationTruth)> {
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    let truth = truth_design_ii();
    let (lo, hi) = truth.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let n_obs = cluster_size(&mut rng);
        let unit_times = jittered_schedule(&mut rng, n_obs)?;
        let times: Vec<f64> = unit_times.iter().map(|s| lo + (hi - lo) * s).collect();
        let zs = covariates_design_ii(&mut rng, times.len());
        let dev = sample_trajectory(&truth.eigen, &times, &mut rng);
        let observations = times
            .iter()
            .zip(zs)
            .zip(dev)
            .map(|((&t, z), e)| Observation {
                t,
                y: (truth.mu)(t, truth.beta0.dot(&z)) + e,
                z,
            })
            .collect();
        subjects.push(Subject {
            id: subject_id(i),
            observations,
        });
    }
    Ok((Dataset::new(subjects)?, truth))
}

pub fn simulate(design: Design, n: usize, seed: u64) -> Result<(Dataset, SimulationTruth)> {
    match design {
        Design::I => simulate_i(n, seed),
        Design::II => simulate_ii(n, seed),
    }
}

/// `‖β̂ − β₀‖₂`.
pub fn metric_beta_error(beta_hat: &IndexCoefficient, beta0: &IndexCoefficient) -> f64 {
    beta_hat.distance(beta0)
}

/// `cos⁻¹(β₀ᵀβ̂)` in degrees.
pub fn metric_angle_degrees(beta_hat: &IndexCoefficient, beta0: &IndexCoefficient) -> f64 {
    beta0.dot(beta_hat.as_slice()).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Trapezoid integral of `(μ̂ − μ)²` over the surface grid. Masked cells are
/// dropped and the integral is rescaled by the inverse covered area fraction.
/// `NaN` when no cell is valid.
pub fn metric_imse_integral(surface: &Surface, mu_true: impl Fn(f64, f64) -> f64) -> f64 {
    let (integral, covered, total) = imse_parts(surface, mu_true);
    if !(covered > 0.0) {
        return f64::NAN;
    }
    integral * total / covered
}

/// IMSE with the evaluation rectangle mapped to the unit square, i.e. the
/// area-weighted mean of `(μ̂ − μ)²` over the covered cells.
pub fn metric_imse(surface: &Surface, mu_true: impl Fn(f64, f64) -> f64) -> f64 {
    let (integral, covered, _) = imse_parts(surface, mu_true);
    if !(covered > 0.0) {
        return f64::NAN;
    }
    integral / covered
}

fn imse_parts(surface: &Surface, mu_true: impl Fn(f64, f64) -> f64) -> (f64, f64, f64) {
    let wt = trapezoid_weights(&surface.t_grid);
    let wu = trapezoid_weights(&surface.u_grid);
    let (mut total, mut covered, mut integral) = (0.0, 0.0, 0.0);
    for (i, &t) in surface.t_grid.iter().enumerate() {
        for (j, &u) in surface.u_grid.iter().enumerate() {
            let w = wt[i] * wu[j];
            total += w;
            let c = surface.cell(i, j);
            if surface.valid[c] {
                covered += w;
                let e = surface.mu[c] - mu_true(t, u);
                integral += w * e * e;
            }
        }
    }
    (integral, covered, total)
}

/// Splits `(seed, replicate)` into an independent stream seed.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut x = seed ^ replicate.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

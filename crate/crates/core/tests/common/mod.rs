//! Brute-force reference computations written directly from the estimator
//! definitions, with no code shared with the library beyond data access.

#![allow(dead_code)]

use fsim::{Bandwidths, Dataset, KernelSpec, Observation, Subject};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Flat copy of a dataset.
pub struct Raw {
    pub subject: Vec<usize>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub n: usize,
    pub p: usize,
}

impl Raw {
    pub fn of(ds: &Dataset) -> Self {
        let mut raw = Raw {
            subject: Vec::new(),
            t: Vec::new(),
            y: Vec::new(),
            z: Vec::new(),
            n: ds.n_subjects(),
            p: ds.p(),
        };
        for i in 0..ds.n_subjects() {
            for k in ds.subject_range(i) {
                let o = ds.observation(k);
                raw.subject.push(i);
                raw.t.push(o.t);
                raw.y.push(o.y);
                raw.z.push(o.z);
            }
        }
        raw
    }

    pub fn m(&self) -> usize {
        self.t.len()
    }

    pub fn index(&self, beta: &[f64], k: usize) -> f64 {
        dot(&self.z[k], beta)
    }

    /// Observations of the subjects for which `keep` holds.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Raw {
        let mut out = Raw {
            subject: Vec::new(),
            t: Vec::new(),
            y: Vec::new(),
            z: Vec::new(),
            n: 0,
            p: self.p,
        };
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..self.m() {
            if keep(self.subject[k]) {
                seen.insert(self.subject[k]);
                out.subject.push(self.subject[k]);
                out.t.push(self.t[k]);
                out.y.push(self.y[k]);
                out.z.push(self.z[k].clone());
            }
        }
        out.n = seen.len();
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn kern(spec: KernelSpec, u: f64) -> f64 {
    match spec {
        KernelSpec::Epanechnikov => {
            if u.abs() <= 1.0 {
                3.0 / 4.0 * (1.0 - u * u)
            } else {
                0.0
            }
        }
        KernelSpec::Quartic => {
            if u.abs() <= 1.0 {
                15.0 / 16.0 * (1.0 - u * u) * (1.0 - u * u)
            } else {
                0.0
            }
        }
        KernelSpec::TruncatedGaussian => {
            if u.abs() <= 4.0 {
                // mass of N(0,1) on [-4, 4]
                let mass = 0.999_936_657_516_333_2;
                (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / mass
            } else {
                0.0
            }
        }
    }
}

/// Raw kernel values of every observation around `(t0, u0)`.
pub fn kernel_values(raw: &Raw, beta: &[f64], t0: f64, u0: f64, h: Bandwidths, spec: KernelSpec) -> Vec<f64> {
    (0..raw.m())
        .map(|k| kern(spec, (raw.t[k] - t0) / h.h_t) * kern(spec, (raw.index(beta, k) - u0) / h.h_z))
        .collect()
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy)]
pub struct Fit3 {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

/// Weighted least squares of `y` on `(1, Δt, Δu)`; `None` below three
/// weighted points or for an empty window.
pub fn local_fit(raw: &Raw, beta: &[f64], t0: f64, u0: f64, h: Bandwidths, spec: KernelSpec, y: &[f64]) -> Option<Fit3> {
    local_fit_conditioned(raw, beta, t0, u0, h, spec, y).map(|(f, _)| f)
}

/// As [`local_fit`], also returning the condition number of the
/// diagonally scaled normal matrix.
pub fn local_fit_conditioned(
    raw: &Raw,
    beta: &[f64],
    t0: f64,
    u0: f64,
    h: Bandwidths,
    spec: KernelSpec,
    y: &[f64],
) -> Option<(Fit3, f64)> {
    let w = kernel_values(raw, beta, t0, u0, h, spec);
    let mass: f64 = w.iter().sum();
    let count = w.iter().filter(|&&v| v > 0.0).count();
    if count < 3 || mass < 1e-12 * raw.m() as f64 {
        return None;
    }
    let mut a = vec![vec![0.0; 3]; 3];
    let mut rhs = vec![0.0; 3];
    for k in 0..raw.m() {
        if w[k] == 0.0 {
            continue;
        }
        let x = [1.0, raw.t[k] - t0, raw.index(beta, k) - u0];
        for r in 0..3 {
            rhs[r] += w[k] * x[r] * y[k];
            for c in 0..3 {
                a[r][c] += w[k] * x[r] * x[c];
            }
        }
    }
    let scaled = nalgebra::Matrix3::from_fn(|r, c| a[r][c] / (a[r][r] * a[c][c]).sqrt());
    let eig = scaled.symmetric_eigenvalues();
    let cond = eig.max() / eig.min().max(f64::MIN_POSITIVE);
    let s = gauss_solve(a, rhs)?;
    Some((Fit3 { a: s[0], b: s[1], d: s[2] }, cond))
}

/// Local fits at every observation point.
pub fn anchor_fits(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec) -> Vec<Option<Fit3>> {
    (0..raw.m())
        .map(|j| local_fit(raw, beta, raw.t[j], raw.index(beta, j), h, spec, &raw.y))
        .collect()
}

/// `Σ_j Σ_k w_jk (Y_k − a_j − b_j ΔT − d_j βᵀΔZ)²` with per-anchor normalized weights.
pub fn objective(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec) -> f64 {
    let fits = anchor_fits(raw, beta, h, spec);
    let mut total = 0.0;
    for j in 0..raw.m() {
        let Some(f) = fits[j] else { continue };
        let w = kernel_values(raw, beta, raw.t[j], raw.index(beta, j), h, spec);
        let mass: f64 = w.iter().sum();
        for k in 0..raw.m() {
            let du = raw.index(beta, k) - raw.index(beta, j);
            let r = raw.y[k] - f.a - f.b * (raw.t[k] - raw.t[j]) - f.d * du;
            total += w[k] / mass * r * r;
        }
    }
    total
}

pub fn sign_normalize(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    let mut out: Vec<f64> = v.iter().map(|x| x / norm).collect();
    if let Some(first) = out.iter().find(|x| x.abs() > 1e-8) {
        if *first < 0.0 {
            out.iter_mut().for_each(|x| *x = -*x);
        }
    }
    out
}

/// Closed-form direction update with the local fits under `beta` held fixed;
/// returns (`D`, `rhs`, normalized solution).
pub fn update_beta(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = raw.p;
    let fits = anchor_fits(raw, beta, h, spec);
    let mut d_mat = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for j in 0..raw.m() {
        let Some(f) = fits[j] else { continue };
        let w = kernel_values(raw, beta, raw.t[j], raw.index(beta, j), h, spec);
        let mass: f64 = w.iter().sum();
        for k in 0..raw.m() {
            let wk = w[k] / mass;
            let dz: Vec<f64> = (0..p).map(|q| raw.z[k][q] - raw.z[j][q]).collect();
            let partial = raw.y[k] - f.a - f.b * (raw.t[k] - raw.t[j]);
            for q in 0..p {
                rhs[q] += wk * f.d * dz[q] * partial;
                for s in 0..p {
                    d_mat[q][s] += wk * f.d * f.d * dz[q] * dz[s];
                }
            }
        }
    }
    let sol = gauss_solve(d_mat.clone(), rhs.clone()).expect("solvable update");
    let dir = sign_normalize(&sol);
    (d_mat, rhs, dir)
}

/// Kernel-weighted mean of `Z` around observation `k`, minus `Z_k`.
pub fn nu(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec, at: usize) -> Option<Vec<f64>> {
    let w = kernel_values(raw, beta, raw.t[at], raw.index(beta, at), h, spec);
    let mass: f64 = w.iter().sum();
    if mass < 1e-12 * raw.m() as f64 {
        return None;
    }
    let mut out = vec![0.0; raw.p];
    for k in 0..raw.m() {
        for q in 0..raw.p {
            out[q] += w[k] / mass * raw.z[k][q];
        }
    }
    for q in 0..raw.p {
        out[q] -= raw.z[at][q];
    }
    Some(out)
}

/// Score terms `H_k = d̂_k ν̂_k ε̂_k` (zero where any ingredient is missing).
pub fn h_terms(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec) -> Vec<Vec<f64>> {
    (0..raw.m())
        .map(|k| {
            let f = local_fit(raw, beta, raw.t[k], raw.index(beta, k), h, spec, &raw.y);
            let v = nu(raw, beta, h, spec, k);
            match (f, v) {
                (Some(f), Some(v)) => {
                    let e = raw.y[k] - f.a;
                    v.iter().map(|x| f.d * x * e).collect()
                }
                _ => vec![0.0; raw.p],
            }
        })
        .collect()
}

/// Two-term average of the score products, enumerating pairs explicitly.
pub fn sigma_star(raw: &Raw, beta: &[f64], h: Bandwidths, spec: KernelSpec) -> Vec<Vec<f64>> {
    let p = raw.p;
    let hk = h_terms(raw, beta, h, spec);
    let m = raw.m() as f64;
    let n = raw.n as f64;
    let n_bar = m / n;
    let mut sizes = vec![0usize; raw.n];
    raw.subject.iter().for_each(|&i| sizes[i] += 1);
    let n_star: f64 = sizes.iter().map(|&s| (s * s) as f64 - s as f64).sum();
    let mut cross = vec![vec![0.0; p]; p];
    let mut own = vec![vec![0.0; p]; p];
    for a in 0..raw.m() {
        for b in 0..raw.m() {
            if raw.subject[a] != raw.subject[b] {
                continue;
            }
            for q in 0..p {
                for s in 0..p {
                    if a == b {
                        own[q][s] += hk[a][q] * hk[a][s];
                    } else {
                        cross[q][s] += hk[a][q] * hk[b][s];
                    }
                }
            }
        }
    }
    let mut out = vec![vec![0.0; p]; p];
    for q in 0..p {
        for s in 0..p {
            let c = if n_star > 0.0 { cross[q][s] / n_star } else { 0.0 };
            out[q][s] = (n_bar - 1.0) / n_bar * c + own[q][s] / (n_bar * n * n_bar);
        }
    }
    out
}

/// Fixed-direction cross-validation scores `(score, failures)` per candidate.
/// CV score, failure count and the worst local-system condition number per candidate.
pub fn cv_scores_fixed(
    raw: &Raw,
    folds: &[usize],
    grid: &[Bandwidths],
    beta_per_fold: &dyn Fn(usize, Bandwidths) -> Option<Vec<f64>>,
    spec: KernelSpec,
) -> Vec<(f64, usize, f64)> {
    let m_folds = folds.iter().max().unwrap() + 1;
    grid.iter()
        .map(|&h| {
            let (mut sse, mut fail, mut pred) = (0.0, 0usize, 0usize);
            let mut worst_cond: f64 = 1.0;
            for f in 0..m_folds {
                let train = raw.restrict(|i| folds[i] != f);
                let beta = beta_per_fold(f, h);
                for k in 0..raw.m() {
                    if folds[raw.subject[k]] != f {
                        continue;
                    }
                    let Some(beta) = &beta else {
                        fail += 1;
                        continue;
                    };
                    match local_fit_conditioned(&train, beta, raw.t[k], raw.index(beta, k), h, spec, &train.y) {
                        Some((fit, cond)) => {
                            sse += (raw.y[k] - fit.a).powi(2);
                            pred += 1;
                            worst_cond = worst_cond.max(cond);
                        }
                        None => fail += 1,
                    }
                }
            }
            let score = if pred > 0 { sse * raw.m() as f64 / pred as f64 } else { f64::INFINITY };
            (score, fail, worst_cond)
        })
        .collect()
}

/// Small random longitudinal dataset with at most `max_obs` observations.
pub fn random_dataset(seed: u64, max_obs: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=4);
    let n = rng.random_range(3..=6);
    let beta: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut subjects = Vec::new();
    let mut budget = max_obs;
    for i in 0..n {
        let left = n - i - 1;
        let cap = (budget - left).min(4);
        let size = rng.random_range(1..=cap.max(1));
        budget -= size;
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let observations = (0..size)
            .map(|_| {
                let t: f64 = rng.random();
                // a second, time-varying covariate copy keeps Z non-constant within subjects
                let mut zt = z.clone();
                zt[p - 1] += 0.5 * rng.sample::<f64, _>(StandardNormal);
                let u = dot(&zt, &beta);
                let noise: f64 = StandardNormal.sample(&mut rng);
                Observation {
                    t,
                    y: u.sin() + t + 0.1 * noise,
                    z: zt,
                }
            })
            .collect();
        subjects.push(Subject {
            id: format!("r{i}"),
            observations,
        });
    }
    Dataset::new(subjects).unwrap()
}

/// Bandwidths wide enough that every window holds several points.
pub fn wide_bandwidths(ds: &Dataset, beta: &[f64]) -> Bandwidths {
    let raw = Raw::of(ds);
    let u: Vec<f64> = (0..raw.m()).map(|k| raw.index(beta, k)).collect();
    let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Bandwidths::new(1.5, 1.5 * (hi - lo).max(1e-3)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// `max |a − b| ≤ tol · max |b|`.
pub fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    max_abs_diff(a, b) <= tol * max_abs(b).max(1e-300)
}
pub mod suites;
pub mod invariants;
pub mod exactness;

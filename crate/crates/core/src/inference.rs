//! Plug-in sandwich covariance for the estimated index direction.
//!
//! `√n(β̂ − β₀)` is asymptotically normal with covariance `G̃⁺ Σ* G̃⁺`, where
//! `G̃⁺` inverts the curvature matrix on the orthogonal complement of `β̂`.
//! Every ingredient is replaced by a kernel estimate at the observation
//! points, using the fit's bandwidths.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{FitResult, IndexCoefficient};
use crate::kernels::{Bandwidths, IndexedSample, KernelSpec};
use crate::smoother::LinkSmoother;

/// Which average of `(Z_jℓ − z)(Z_jℓ − z)ᵀ` stands in for `G(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramAverage {
    /// Pooled over all observations, subject `j`'s sum divided by its size `N_j`.
    #[default]
    OwnSize,
    /// Pooled, every subject's sum divided by the anchor subject's size `N_i`.
    AnchorSize,
    /// Kernel-weighted around `(T_ik, β̂ᵀZ_ik)`, the same weights as the direction update.
    Local,
}

impl std::str::FromStr for GramAverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "own" | "own_size" => Ok(GramAverage::OwnSize),
            "anchor" | "anchor_size" => Ok(GramAverage::AnchorSize),
            "local" => Ok(GramAverage::Local),
            other => Err(Error::InvalidInput(format!("unknown curvature average {other:?}"))),
        }
    }
}

/// Kernel-weighted mean of `Z` near `(T_k, β̂ᵀZ_k)` minus `Z_k`.
///
/// Returns `None` when the neighbourhood carries no kernel mass.
pub fn estimate_nu(
    ds: &Dataset,
    beta: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
    at: usize,
) -> Result<Option<Vec<f64>>> {
    if at >= ds.n_obs() {
        return Err(Error::InvalidInput(format!("observation {at} out of range")));
    }
    if beta.dim() != ds.p() {
        return Err(Error::InvalidInput("direction dimension does not match covariates".into()));
    }
    let sample = IndexedSample::new(ds, beta.as_slice());
    Ok(nu_at(&sample, h, spec, at))
}

fn nu_at(sample: &IndexedSample<'_>, h: Bandwidths, spec: KernelSpec, at: usize) -> Option<Vec<f64>> {
    let ds = sample.ds;
    let p = ds.p();
    let anchor = (ds.times()[at], sample.index[at]);
    let z0 = ds.z(at);
    let mut mass = 0.0;
    let mut acc = vec![0.0; p];
    sample.for_each_neighbor(anchor, h, spec, |k, w| {
        mass += w;
        for (a, (zk, z0)) in acc.iter_mut().zip(ds.z(k).iter().zip(z0)) {
            *a += w * (zk - z0);
        }
    });
    if sample.is_empty_mass(mass) {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= mass);
    Some(acc)
}

/// Columns `2..p` of the Householder reflection sending `e₁` to `−β`.
pub fn orthonormal_complement(beta: &IndexCoefficient) -> DMatrix<f64> {
    let p = beta.dim();
    let b = beta.as_slice();
    let mut v: Vec<f64> = b.to_vec();
    // b[0] >= 0 under the sign convention, so |v|² >= 2
    let s = if b[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += s;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    DMatrix::from_fn(p, p - 1, |r, c| {
        let c = c + 1;
        let id = if r == c { 1.0 } else { 0.0 };
        id - 2.0 * v[r] * v[c] / vv
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub n: usize,
    /// Mean cluster size.
    pub n_bar: f64,
    /// `Σ N_i² − N_i`.
    pub n_star: f64,
    pub g_tilde_hat: DMatrix<f64>,
    pub g_plus: DMatrix<f64>,
    pub sigma_star_hat: DMatrix<f64>,
    /// Covariance of `√n(β̂ − β₀)`.
    pub sigma_hat: DMatrix<f64>,
    /// Per-observation score terms (zero for excluded points).
    pub h: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub nu_hat: Vec<Option<Vec<f64>>>,
    pub slopes: Vec<f64>,
    /// Observations with no valid surface fit or no `ν̂`.
    pub excluded: usize,
    pub average: GramAverage,
}

impl CovarianceEstimate {
    /// Approximate `Var(β̂) = Σ̂ / n`.
    pub fn var_beta(&self) -> DMatrix<f64> {
        &self.sigma_hat / self.n as f64
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        let v = self.var_beta();
        (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// Weighted first and second moments of `Z` used by `Ĝ`.
struct CovariateMoments {
    first: DVector<f64>,
    second: DMatrix<f64>,
}

fn covariate_moments(ds: &Dataset, weight_of_subject: impl Fn(usize) -> f64) -> CovariateMoments {
    let p = ds.p();
    let mut first = DVector::zeros(p);
    let mut second = DMatrix::zeros(p, p);
    for i in 0..ds.n_subjects() {
        let w = weight_of_subject(i);
        for k in ds.subject_range(i) {
            let z = DVector::from_column_slice(ds.z(k));
            first.axpy(w, &z, 1.0);
            second.ger(w, &z, &z, 1.0);
        }
    }
    CovariateMoments { first, second }
}

/// `Σ_j w_j Σ_ℓ (Z_jℓ − z)(Z_jℓ − z)ᵀ` expanded through the weighted moments.
fn centered_gram(m: &CovariateMoments, total_weight: f64, z: &DVector<f64>) -> DMatrix<f64> {
    let mut g = m.second.clone();
    g.ger(-1.0, &m.first, z, 1.0);
    g.ger(-1.0, z, &m.first, 1.0);
    g.ger(total_weight, z, z, 1.0);
    g
}

/// Kernel-weighted mean of `(Z_jℓ − Z_k)(Z_jℓ − Z_k)ᵀ` around observation `k`.
fn local_gram(sample: &IndexedSample<'_>, h: Bandwidths, spec: KernelSpec, k: usize) -> Option<DMatrix<f64>> {
    let ds = sample.ds;
    let p = ds.p();
    let z0 = ds.z(k);
    let mut g = DMatrix::zeros(p, p);
    let mut dz = DVector::zeros(p);
    let mut mass = 0.0;
    sample.for_each_neighbor((ds.times()[k], sample.index[k]), h, spec, |j, w| {
        mass += w;
        for (q, (a, b)) in ds.z(j).iter().zip(z0).enumerate() {
            dz[q] = a - b;
        }
        g.ger(w, &dz, &dz, 1.0);
    });
    if sample.is_empty_mass(mass) {
        return None;
    }
    Some(g / mass)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Plug-in estimate of the asymptotic covariance of `β̂`.
pub fn estimate_covariance(
    ds: &Dataset,
    fit: &FitResult,
    h: Bandwidths,
    spec: KernelSpec,
    average: GramAverage,
) -> Result<CovarianceEstimate> {
    let beta = &fit.beta_hat;
    let p = ds.p();
    if beta.dim() != p {
        return Err(Error::InvalidInput("direction dimension does not match covariates".into()));
    }
    if p < 2 {
        return Err(Error::InvalidInput("covariance needs at least two covariates".into()));
    }
    let n = ds.n_subjects();
    let m_obs = ds.n_obs();
    let sizes = ds.cluster_sizes();
    let n_bar = m_obs as f64 / n as f64;
    let n_star: f64 = sizes.iter().map(|&s| (s * s - s) as f64).sum();

    let sm = LinkSmoother::new(ds, beta, h, spec);
    let fits = sm.fit_at_observations();
    let nu_hat: Vec<Option<Vec<f64>>> = (0..m_obs)
        .into_par_iter()
        .map(|k| nu_at(&sm.sample, h, spec, k))
        .collect();

    let y = ds.responses();
    let residuals: Vec<f64> = fits
        .iter()
        .zip(y)
        .map(|(f, &y)| if f.ok { y - f.a } else { f64::NAN })
        .collect();
    let slopes: Vec<f64> = fits.iter().map(|f| if f.ok { f.d } else { f64::NAN }).collect();

    let mut excluded = 0;
    let h_terms: Vec<Vec<f64>> = (0..m_obs)
        .map(|k| match (&nu_hat[k], fits[k].ok) {
            (Some(nu), true) => nu.iter().map(|v| slopes[k] * v * residuals[k]).collect(),
            _ => {
                excluded += 1;
                vec![0.0; p]
            }
        })
        .collect();

    // curvature matrix
    let (moments, total_weight) = match average {
        GramAverage::OwnSize => (covariate_moments(ds, |j| 1.0 / (n as f64 * sizes[j] as f64)), 1.0),
        _ => (covariate_moments(ds, |_| 1.0), m_obs as f64),
    };
    let parts: Vec<Option<DMatrix<f64>>> = (0..m_obs)
        .into_par_iter()
        .map(|k| {
            if !fits[k].ok {
                return None;
            }
            let z = DVector::from_column_slice(ds.z(k));
            let g = match average {
                GramAverage::OwnSize => centered_gram(&moments, total_weight, &z),
                GramAverage::AnchorSize => {
                    centered_gram(&moments, total_weight, &z) / (n as f64 * sizes[ds.subject_of(k)] as f64)
                }
                GramAverage::Local => local_gram(&sm.sample, h, spec, k)?,
            };
            Some(g * slopes[k].powi(2))
        })
        .collect();
    let mut g_tilde = DMatrix::zeros(p, p);
    for g in parts.into_iter().flatten() {
        g_tilde += g;
    }
    g_tilde /= 2.0 * m_obs as f64;
    let g_tilde = symmetrize(&g_tilde);

    // score covariance
    let mut within = DMatrix::zeros(p, p);
    let mut cross = DMatrix::zeros(p, p);
    for i in 0..n {
        let mut total = DVector::zeros(p);
        let mut own = DMatrix::zeros(p, p);
        for k in ds.subject_range(i) {
            let hk = DVector::from_column_slice(&h_terms[k]);
            total += &hk;
            own.ger(1.0, &hk, &hk, 1.0);
        }
        within += &own;
        cross.ger(1.0, &total, &total, 1.0);
        cross -= own;
    }
    let mut sigma_star = within / (n_bar * m_obs as f64);
    if n_star > 0.0 {
        sigma_star += cross * ((n_bar - 1.0) / (n_bar * n_star));
    }
    let sigma_star = symmetrize(&sigma_star);

    let b = orthonormal_complement(beta);
    let reduced = symmetrize(&(b.transpose() * &g_tilde * &b));
    let inv = invert_curvature(&reduced)?;
    let g_plus = symmetrize(&(&b * &inv * b.transpose()));
    // Sandwich in complement coordinates, so Σ̂β̂ = 0 holds to rounding
    // however badly the reduced curvature is conditioned. Factoring the
    // middle through its square root keeps the product positive semidefinite.
    let middle = symmetrize(&(b.transpose() * &sigma_star * &b)).symmetric_eigen();
    let root = &middle.eigenvectors * DMatrix::from_diagonal(&middle.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let factor = &b * (&inv * root);
    let sigma_hat = symmetrize(&(&factor * factor.transpose()));

    Ok(CovarianceEstimate {
        n,
        n_bar,
        n_star,
        g_tilde_hat: g_tilde,
        g_plus,
        sigma_star_hat: sigma_star,
        sigma_hat,
        h: h_terms,
        residuals,
        nu_hat,
        slopes,
        excluded,
        average,
    })
}

const CURVATURE_COND_MAX: f64 = 1e12;

fn invert_curvature(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > max / CURVATURE_COND_MAX) {
        return Err(Error::DegenerateCurvature);
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

/// Serializable summary of the covariance estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceReport {
    pub beta_hat: Vec<f64>,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub converged: bool,
    /// Covariance of `√n(β̂ − β₀)`.
    pub sigma_hat: Vec<Vec<f64>>,
    /// `Σ̂ / n`, the approximate covariance of `β̂`.
    pub sigma_hat_over_n: Vec<Vec<f64>>,
    /// `Σ̂ / √n`, an alternative scaling.
    pub sigma_hat_over_sqrt_n: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub excluded_points: usize,
    pub gram_average: GramAverage,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

impl InferenceReport {
    pub fn new(est: &CovarianceEstimate, fit: &FitResult, n_obs: usize) -> Self {
        let n = est.n as f64;
        InferenceReport {
            beta_hat: fit.beta_hat.as_slice().to_vec(),
            n_subjects: est.n,
            n_obs,
            converged: fit.converged,
            sigma_hat: rows(&est.sigma_hat),
            sigma_hat_over_n: rows(&(&est.sigma_hat / n)),
            sigma_hat_over_sqrt_n: rows(&(&est.sigma_hat / n.sqrt())),
            standard_errors: est.standard_errors(),
            excluded_points: est.excluded,
            gram_average: est.average,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_json(self, path)
    }
}

//! Iterated MAVE for the functional single-index model.
//!
//! Each round computes local-linear fits `(a, b, d)` at every observation
//! point under the current direction's kernel weights, then updates the
//! direction by the closed-form weighted least-squares solution with the
//! fits held fixed:
//!
//! ```text
//! D   = Σ_anchor d² Σ_k w_k ΔZ_k ΔZ_kᵀ
//! rhs = Σ_anchor d  Σ_k w_k ΔZ_k (Y_k − a − b ΔT_k)
//! β   ← normalize(D⁻¹ rhs)
//! ```
//!
//! Anchors are the observation points themselves and self-pairs are kept.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{Bandwidths, KernelSpec};
use crate::smoother::{Curve, LinkSmoother, LocalFit};

/// Coordinates with magnitude at or below this are skipped by the sign rule.
const SIGN_EPS: f64 = 1e-8;

/// Unit-norm index direction whose first non-negligible coordinate is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexCoefficient {
    beta: Vec<f64>,
}

impl IndexCoefficient {
    /// Normalizes `v`; see [`normalize_direction`].
    pub fn new(v: Vec<f64>) -> Result<Self> {
        normalize_direction(&v)
    }

    /// `(1/√p) 1_p`.
    pub fn uniform(p: usize) -> Self {
        let c = 1.0 / (p as f64).sqrt();
        IndexCoefficient { beta: vec![c; p] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.beta.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &IndexCoefficient) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Scales `v` to unit length and flips its sign so that the first coordinate
/// exceeding `1e-8` in magnitude is positive.
pub fn normalize_direction(v: &[f64]) -> Result<IndexCoefficient> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::ZeroDirection(norm));
    }
    let mut beta: Vec<f64> = v.iter().map(|x| x / norm).collect();
    if let Some(first) = beta.iter().find(|x| x.abs() > SIGN_EPS) {
        if *first < 0.0 {
            beta.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(IndexCoefficient { beta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-4,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: IndexCoefficient,
    pub init: IndexCoefficient,
    /// Number of direction updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// Objective at every iterate, starting with the initial value.
    pub objective_trace: Vec<f64>,
    /// `‖β_{m+1} − β_m‖` per update.
    pub step_trace: Vec<f64>,
    /// Objective at `beta_hat`.
    pub final_objective: f64,
    pub bandwidths: Bandwidths,
    /// Empty or degenerate anchors at `beta_hat`.
    pub skipped_anchor_count: usize,
}

/// Quantities of one direction update.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaUpdateDiagnostics {
    /// Weighted Gram matrix `D`.
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// `λ_max / λ_min` of `D` before any ridge.
    pub condition: f64,
    pub ridge_applied: bool,
    /// Unnormalized minimizer `D⁻¹ rhs`.
    pub raw: Vec<f64>,
}

/// Condition number above which `D` receives a ridge.
const GRAM_CONDITION_MAX: f64 = 1e12;
const GRAM_RIDGE: f64 = 1e-10;
/// A link is flat when `max |d| h_z` is below this fraction of the response scale.
const FLAT_REL: f64 = 1e-8;
const ANCHOR_CHUNK: usize = 32;

/// Which local model the sweep fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LocalModel {
    /// `a + b ΔT + d βᵀΔZ`.
    Full,
    /// `d βᵀΔZ` only, for responses with the time trend removed.
    SlopeOnly,
}

/// Result of one pass over all anchors.
pub(crate) struct Sweep {
    pub objective: f64,
    pub skipped: usize,
    pub gram: Vec<f64>,
    pub rhs: Vec<f64>,
}

struct Partial {
    objective: f64,
    gram: Vec<f64>,
    rhs: Vec<f64>,
}

/// Local fits at every observation point under `sm`'s direction.
pub(crate) fn anchor_fits(sm: &LinkSmoother<'_>, y: &[f64], model: LocalModel) -> Vec<LocalFit> {
    let t = sm.sample.ds.times();
    let idx = &sm.sample.index;
    (0..sm.sample.len())
        .into_par_iter()
        .with_min_len(ANCHOR_CHUNK)
        .map(|j| {
            let anchor = (t[j], idx[j]);
            match model {
                LocalModel::Full => sm.fit_with(anchor, y),
                LocalModel::SlopeOnly => slope_only_fit(sm, anchor, y),
            }
        })
        .collect()
}

fn slope_only_fit(sm: &LinkSmoother<'_>, anchor: (f64, f64), y: &[f64]) -> LocalFit {
    let idx = &sm.sample.index;
    let inv_z = 1.0 / sm.h.h_z;
    let (mut mass, mut svv, mut svy, mut count) = (0.0, 0.0, 0.0, 0usize);
    sm.sample.for_each_neighbor(anchor, sm.h, sm.spec, |k, w| {
        let v = (idx[k] - anchor.1) * inv_z;
        mass += w;
        svv += w * v * v;
        svy += w * v * y[k];
        count += 1;
    });
    if sm.sample.is_empty_mass(mass) || count < 2 || !(svv > 1e-12 * mass) {
        return LocalFit::invalid(anchor);
    }
    LocalFit {
        a: 0.0,
        b: 0.0,
        d: svy / svv / sm.h.h_z,
        anchor,
        ok: true,
    }
}

/// Accumulates the objective, `D` and `rhs` for fits held fixed.
///
/// Weights come from `sm` (the direction the fits were computed under);
/// `beta_eval` is the direction plugged into the residual `d βᵀΔZ`.
pub(crate) fn accumulate(
    sm: &LinkSmoother<'_>,
    y: &[f64],
    fits: &[LocalFit],
    beta_eval: &[f64],
    with_gram: bool,
) -> Sweep {
    let ds = sm.sample.ds;
    let p = ds.p();
    let t = ds.times();
    let n_anchor = sm.sample.len();
    let chunks: Vec<Partial> = (0..n_anchor.div_ceil(ANCHOR_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut part = Partial {
                objective: 0.0,
                gram: vec![0.0; if with_gram { p * p } else { 0 }],
                rhs: vec![0.0; if with_gram { p } else { 0 }],
            };
            let mut dz = vec![0.0; p];
            let mut anchor_gram = vec![0.0; if with_gram { p * p } else { 0 }];
            let mut anchor_rhs = vec![0.0; p];
            let end = ((c + 1) * ANCHOR_CHUNK).min(n_anchor);
            for j in c * ANCHOR_CHUNK..end {
                let fit = &fits[j];
                if !fit.ok {
                    continue;
                }
                let zj = ds.z(j);
                let (t0, z0) = (t[j], sm.sample.index[j]);
                let mut mass = 0.0;
                let mut obj = 0.0;
                anchor_gram.iter_mut().for_each(|v| *v = 0.0);
                anchor_rhs.iter_mut().for_each(|v| *v = 0.0);
                sm.sample.for_each_neighbor((t0, z0), sm.h, sm.spec, |k, w| {
                    mass += w;
                    let zk = ds.z(k);
                    let mut proj = 0.0;
                    for q in 0..p {
                        dz[q] = zk[q] - zj[q];
                        proj += dz[q] * beta_eval[q];
                    }
                    let partial_resid = y[k] - fit.a - fit.b * (t[k] - t0);
                    let r = partial_resid - fit.d * proj;
                    obj += w * r * r;
                    if with_gram {
                        for q in 0..p {
                            let wq = w * dz[q];
                            anchor_rhs[q] += wq * partial_resid;
                            let row = &mut anchor_gram[q * p..q * p + q + 1];
                            for (s, g) in row.iter_mut().enumerate() {
                                *g += wq * dz[s];
                            }
                        }
                    }
                });
                let inv = 1.0 / mass;
                part.objective += obj * inv;
                if with_gram {
                    let d2 = fit.d * fit.d * inv;
                    let d1 = fit.d * inv;
                    for q in 0..p {
                        part.rhs[q] += d1 * anchor_rhs[q];
                        for s in 0..=q {
                            part.gram[q * p + s] += d2 * anchor_gram[q * p + s];
                        }
                    }
                }
            }
            part
        })
        .collect();

    let mut sweep = Sweep {
        objective: 0.0,
        skipped: fits.iter().filter(|f| !f.ok).count(),
        gram: vec![0.0; if with_gram { p * p } else { 0 }],
        rhs: vec![0.0; if with_gram { p } else { 0 }],
    };
    for part in chunks {
        sweep.objective += part.objective;
        for (a, b) in sweep.gram.iter_mut().zip(&part.gram) {
            *a += b;
        }
        for (a, b) in sweep.rhs.iter_mut().zip(&part.rhs) {
            *a += b;
        }
    }
    if with_gram {
        for q in 0..p {
            for s in 0..q {
                sweep.gram[s * p + q] = sweep.gram[q * p + s];
            }
        }
    }
    sweep
}

fn rms(y: &[f64]) -> f64 {
    (y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64).sqrt()
}

/// Solves `D β = rhs` and normalizes, with a ridge for ill-conditioned `D`.
pub(crate) fn solve_direction(
    gram: &[f64],
    rhs: &[f64],
    fits: &[LocalFit],
    h: Bandwidths,
    y_scale: f64,
) -> Result<(IndexCoefficient, BetaUpdateDiagnostics)> {
    let p = rhs.len();
    let max_slope = fits
        .iter()
        .filter(|f| f.ok)
        .fold(0.0_f64, |m, f| m.max(f.d.abs()));
    let gram_m = DMatrix::from_row_slice(p, p, gram);
    let rhs_v = DVector::from_column_slice(rhs);
    let trace = gram_m.trace();
    if !(max_slope * h.h_z > FLAT_REL * y_scale) || !(trace > 0.0) {
        return Err(Error::FlatLink);
    }
    let eig = gram_m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let mut system = gram_m.clone();
    let ridge_applied = !(condition <= GRAM_CONDITION_MAX);
    if ridge_applied {
        let ridge = GRAM_RIDGE * trace / p as f64;
        for i in 0..p {
            system[(i, i)] += ridge;
        }
    }
    let raw = match system.clone().cholesky() {
        Some(ch) => ch.solve(&rhs_v),
        None => system
            .lu()
            .solve(&rhs_v)
            .ok_or_else(|| Error::Numerical("direction update system is singular".into()))?,
    };
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite direction update".into()));
    }
    let raw: Vec<f64> = raw.iter().copied().collect();
    let beta = normalize_direction(&raw)?;
    Ok((
        beta,
        BetaUpdateDiagnostics {
            gram: gram_m,
            rhs: rhs_v,
            condition,
            ridge_applied,
            raw,
        },
    ))
}

/// Objective `σ̂²_β`: local fits under `β`'s weights, summed weighted squared residuals.
pub fn objective(ds: &Dataset, beta: &IndexCoefficient, h: Bandwidths, spec: KernelSpec) -> f64 {
    let sm = LinkSmoother::new(ds, beta, h, spec);
    let fits = anchor_fits(&sm, ds.responses(), LocalModel::Full);
    accumulate(&sm, ds.responses(), &fits, beta.as_slice(), false).objective
}

/// The quadratic form in `beta_eval` minimized by [`update_beta`], with weights
/// taken under `beta_weights` and local fits held fixed.
pub fn fixed_weight_objective(
    ds: &Dataset,
    local_fits: &[LocalFit],
    beta_weights: &IndexCoefficient,
    beta_eval: &[f64],
    h: Bandwidths,
    spec: KernelSpec,
) -> Result<f64> {
    check_fits(ds, local_fits, beta_eval.len())?;
    let sm = LinkSmoother::new(ds, beta_weights, h, spec);
    Ok(accumulate(&sm, ds.responses(), local_fits, beta_eval, false).objective)
}

fn check_fits(ds: &Dataset, fits: &[LocalFit], p: usize) -> Result<()> {
    if fits.len() != ds.n_obs() {
        return Err(Error::InvalidInput(format!(
            "expected one local fit per observation ({}), got {}",
            ds.n_obs(),
            fits.len()
        )));
    }
    if p != ds.p() {
        return Err(Error::InvalidInput(format!("direction has length {p}, p = {}", ds.p())));
    }
    Ok(())
}

/// Local fits at every observation point, the anchors of the objective.
pub fn anchor_local_fits(ds: &Dataset, beta: &IndexCoefficient, h: Bandwidths, spec: KernelSpec) -> Vec<LocalFit> {
    let sm = LinkSmoother::new(ds, beta, h, spec);
    anchor_fits(&sm, ds.responses(), LocalModel::Full)
}

/// One direction update with `local_fits` (one per observation, flat order) held fixed.
pub fn update_beta(
    ds: &Dataset,
    local_fits: &[LocalFit],
    beta_current: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
) -> Result<(IndexCoefficient, BetaUpdateDiagnostics)> {
    check_fits(ds, local_fits, beta_current.dim())?;
    let sm = LinkSmoother::new(ds, beta_current, h, spec);
    let sweep = accumulate(&sm, ds.responses(), local_fits, beta_current.as_slice(), true);
    solve_direction(&sweep.gram, &sweep.rhs, local_fits, h, rms(ds.responses()))
}

/// Alternates local fits and direction updates from `init` until the step
/// falls below `opts.tol` or `opts.max_iter` updates have been made.
pub fn fit(
    ds: &Dataset,
    init: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
    opts: FitOptions,
) -> Result<FitResult> {
    fit_model(ds, ds.responses(), init, h, spec, opts, LocalModel::Full, rms(ds.responses()))
}

#[allow(clippy::too_many_arguments)]
fn fit_model(
    ds: &Dataset,
    y: &[f64],
    init: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
    opts: FitOptions,
    model: LocalModel,
    y_scale: f64,
) -> Result<FitResult> {
    if init.dim() != ds.p() {
        return Err(Error::InvalidInput(format!(
            "initial direction has length {}, p = {}",
            init.dim(),
            ds.p()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let mut beta = init.clone();
    let mut objective_trace = Vec::new();
    let mut step_trace = Vec::new();
    let mut iterates = Vec::new();
    let mut skipped = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let sm = LinkSmoother::new(ds, &beta, h, spec);
        let fits = anchor_fits(&sm, y, model);
        let sweep = accumulate(&sm, y, &fits, beta.as_slice(), true);
        objective_trace.push(sweep.objective);
        skipped.push(sweep.skipped);
        let (next, _) = solve_direction(&sweep.gram, &sweep.rhs, &fits, h, y_scale)?;
        let step = next.distance(&beta);
        step_trace.push(step);
        iterates.push(beta);
        beta = next;
        if step < opts.tol {
            converged = true;
            break;
        }
    }

    let sm = LinkSmoother::new(ds, &beta, h, spec);
    let fits = anchor_fits(&sm, y, model);
    let final_sweep = accumulate(&sm, y, &fits, beta.as_slice(), false);
    objective_trace.push(final_sweep.objective);
    skipped.push(final_sweep.skipped);
    iterates.push(beta);

    // converged runs report the last iterate, others the best one by objective
    let pos = if converged {
        iterates.len() - 1
    } else {
        objective_trace
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(iterates.len() - 1, |(i, _)| i)
    };
    let final_objective = objective_trace[pos];
    let skipped_anchor_count = skipped[pos];
    let beta_hat = iterates.swap_remove(pos);

    Ok(FitResult {
        beta_hat,
        init: init.clone(),
        iterations: step_trace.len(),
        converged,
        objective_trace,
        step_trace,
        final_objective,
        bandwidths: h,
        skipped_anchor_count,
    })
}

/// First-coordinate grid of the hemisphere start scheme.
pub const START_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Random unit starts: the first coordinate cycles through [`START_GRID`], the
/// remaining coordinates are uniform on the induced sphere with random signs,
/// and every second start flips the signs of coordinates `2..p` of the previous one.
pub fn hemisphere_starts(p: usize, count: usize, rng: &mut impl Rng) -> Vec<IndexCoefficient> {
    let mut out = Vec::with_capacity(count);
    let mut tail: Vec<f64> = Vec::new();
    for k in 0..count {
        if p == 1 {
            out.push(IndexCoefficient { beta: vec![1.0] });
            continue;
        }
        let first = START_GRID[(k / 2) % START_GRID.len()];
        let radius = (1.0 - first * first).sqrt();
        if k % 2 == 0 {
            let g: Vec<f64> = (1..p).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            tail = g
                .iter()
                .map(|v| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * radius * v / norm
                })
                .collect();
        } else {
            // same magnitudes as the previous start, opposite signs
            tail.iter_mut().for_each(|v| *v = -*v);
            let prev_radius_sq: f64 = tail.iter().map(|v| v * v).sum();
            if prev_radius_sq > 0.0 {
                let s = radius / prev_radius_sq.sqrt();
                tail.iter_mut().for_each(|v| *v *= s);
            }
        }
        let mut beta = Vec::with_capacity(p);
        beta.push(first);
        beta.extend_from_slice(&tail);
        out.push(normalize_direction(&beta).expect("unit start"));
    }
    out
}

/// Outcome of a single start in [`multi_start_fit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartOutcome {
    pub init: IndexCoefficient,
    pub beta_hat: Option<IndexCoefficient>,
    pub final_objective: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiStartFit {
    pub best: FitResult,
    pub starts: Vec<StartOutcome>,
    pub seed: u64,
}

/// Runs [`fit`] from `(1/√p) 1_p` plus `n_starts − 1` hemisphere starts and
/// keeps the result with the smallest final objective.
pub fn multi_start_fit(
    ds: &Dataset,
    h: Bandwidths,
    spec: KernelSpec,
    n_starts: usize,
    seed: u64,
    opts: FitOptions,
) -> Result<MultiStartFit> {
    if n_starts == 0 {
        return Err(Error::InvalidInput("n_starts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inits = vec![IndexCoefficient::uniform(ds.p())];
    inits.extend(hemisphere_starts(ds.p(), n_starts - 1, &mut rng));
    let results: Vec<Result<FitResult>> = inits
        .par_iter()
        .map(|init| fit(ds, init, h, spec, opts))
        .collect();

    let mut best: Option<FitResult> = None;
    let mut starts = Vec::with_capacity(n_starts);
    for (init, res) in inits.into_iter().zip(results) {
        match res {
            Ok(fr) => {
                starts.push(StartOutcome {
                    init,
                    beta_hat: Some(fr.beta_hat.clone()),
                    final_objective: Some(fr.final_objective),
                    converged: fr.converged,
                    error: None,
                });
                let better = best
                    .as_ref()
                    .is_none_or(|b| fr.final_objective < b.final_objective);
                if better {
                    best = Some(fr);
                }
            }
            Err(e) => starts.push(StartOutcome {
                init,
                beta_hat: None,
                final_objective: None,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    let best = best.ok_or(Error::AllStartsFailed(n_starts))?;
    Ok(MultiStartFit { best, starts, seed })
}

/// Additive two-step fit `μ(t, z̃) = μ_t(t) + μ_z(z̃)`.
#[derive(Debug, Clone)]
pub struct AdditiveFit {
    /// One-dimensional smooth of `Y` on `T`.
    pub mu_t: Curve,
    pub fit: FitResult,
    /// One-dimensional smooth of the time-detrended responses on `β̂ᵀZ`.
    pub mu_z: Curve,
    /// `Y − μ̂_t(T)` per observation.
    pub detrended: Vec<f64>,
}

/// Removes a pooled time trend, estimates the direction with the slope-only
/// local model, then smooths the detrended response along the fitted index.
pub fn fit_additive(
    ds: &Dataset,
    h_time: f64,
    h: Bandwidths,
    spec: KernelSpec,
    opts: FitOptions,
) -> Result<AdditiveFit> {
    let mu_t = Curve::new(ds.times(), ds.responses(), h_time, spec)?;
    let trend = mu_t.fitted();
    if trend.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "time bandwidth {h_time} leaves observations without a trend estimate"
        )));
    }
    let detrended: Vec<f64> = ds.responses().iter().zip(&trend).map(|(y, m)| y - m).collect();
    let init = IndexCoefficient::uniform(ds.p());
    let fit = fit_model(
        ds,
        &detrended,
        &init,
        h,
        spec,
        opts,
        LocalModel::SlopeOnly,
        rms(ds.responses()),
    )?;
    let index = ds.index_values(&fit.beta_hat);
    let mu_z = Curve::new(&index, &detrended, h.h_z, spec)?;
    Ok(AdditiveFit {
        mu_t,
        fit,
        mu_z,
        detrended,
    })
}

//! Subject-wise m-fold cross-validation of the bandwidth pair.
//!
//! For every candidate `(h_t, h_z)` and fold `S_ℓ`, the surface is estimated
//! from the subjects outside `S_ℓ` and evaluated at each held-out
//! `(T_ij, β̂ᵀZ_ij)`. The score is the sum of squared prediction errors over
//! the held-out observations that received a prediction, scaled by
//! `total / predicted` so candidates stranding different numbers of points
//! stay comparable. Without failures it is the plain sum.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitOptions, IndexCoefficient};
use crate::kernels::{Bandwidths, KernelSpec};
use crate::smoother::LinkSmoother;

/// Candidates stranding at least this fraction of held-out points are inadmissible.
pub const FAILURE_GATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvMode {
    /// Refit the direction on each training split.
    #[default]
    Full,
    /// Reuse one pilot direction across folds and candidates.
    Pilot,
}

impl std::str::FromStr for CvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CvMode::Full),
            "pilot" => Ok(CvMode::Pilot),
            other => Err(Error::InvalidInput(format!("unknown cv mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub m: usize,
    /// Fold of each subject (subject index order).
    pub folds: Vec<usize>,
    pub grid: Vec<Bandwidths>,
    pub mode: CvMode,
}

impl CvPlan {
    pub fn new(ds: &Dataset, m: usize, seed: u64, grid: Vec<Bandwidths>, mode: CvMode) -> Result<Self> {
        let folds = make_folds(ds, m, seed)?;
        let plan = CvPlan { m, folds, grid, mode };
        plan.validate(ds)?;
        Ok(plan)
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {}", self.m)));
        }
        if self.folds.len() != ds.n_subjects() {
            return Err(Error::InvalidInput("fold assignment must cover every subject".into()));
        }
        let mut sizes = vec![0usize; self.m];
        for &f in &self.folds {
            if f >= self.m {
                return Err(Error::InvalidInput(format!("fold label {f} out of range")));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidInput("every fold must contain a subject".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("bandwidth grid is empty".into()));
        }
        Ok(())
    }

    /// Subject indices of fold `f`.
    pub fn fold_members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    fn training_members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != f).collect()
    }
}

/// Random near-equal partition of the subjects into `m` folds.
pub fn make_folds(ds: &Dataset, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ds.n_subjects();
    if m < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {m}")));
    }
    if m > n {
        return Err(Error::InvalidInput(format!("{m} folds requested for {n} subjects")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &subject) in perm.iter().enumerate() {
        folds[subject] = pos % m;
    }
    Ok(folds)
}

/// `sample sd · M^(−1/6)` for the times and for the index under `beta`.
pub fn rule_of_thumb(ds: &Dataset, beta: &IndexCoefficient) -> Bandwidths {
    let factor = (ds.n_obs() as f64).powf(-1.0 / 6.0);
    let index = ds.index_values(beta);
    let h_t = sample_sd(ds.times()) * factor;
    let h_z = sample_sd(&index) * factor;
    Bandwidths {
        h_t: if h_t > 0.0 { h_t } else { 1.0 },
        h_z: if h_z > 0.0 { h_z } else { 1.0 },
    }
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub const GRID_SIZE: usize = 6;
pub const GRID_SPAN: (f64, f64) = (0.5, 4.0);

/// Geometric `6 × 6` grid spanning `[0.5, 4] × h₀` on each axis, `h_t` varying slowest.
pub fn default_grid(ds: &Dataset, beta: &IndexCoefficient) -> Vec<Bandwidths> {
    let h0 = rule_of_thumb(ds, beta);
    let factors: Vec<f64> = (0..GRID_SIZE)
        .map(|i| {
            let a = GRID_SPAN.0.ln();
            let b = GRID_SPAN.1.ln();
            (a + (b - a) * i as f64 / (GRID_SIZE - 1) as f64).exp()
        })
        .collect();
    let mut grid = Vec::with_capacity(GRID_SIZE * GRID_SIZE);
    for ft in &factors {
        for fz in &factors {
            grid.push(Bandwidths {
                h_t: h0.h_t * ft,
                h_z: h0.h_z * fz,
            });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    /// Settings for the per-fold direction refits in full mode.
    pub fit: FitOptions,
    /// Starting direction of the per-fold refits.
    pub init: IndexCoefficient,
    /// Direction used by pilot mode.
    pub pilot_beta: Option<IndexCoefficient>,
}

impl CvOptions {
    pub fn new(p: usize) -> Self {
        CvOptions {
            fit: FitOptions {
                tol: 1e-3,
                max_iter: 15,
            },
            init: IndexCoefficient::uniform(p),
            pilot_beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvCandidate {
    pub bandwidths: Bandwidths,
    pub score: f64,
    /// Unscaled sum of squared errors over predicted points.
    pub sse: f64,
    pub failures: usize,
    pub predicted: usize,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub candidates: Vec<CvCandidate>,
    pub chosen: Bandwidths,
    pub chosen_index: usize,
    pub mode: CvMode,
    pub m: usize,
}

impl CvResult {
    pub fn write_csv_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "h_t,h_z,score,failures,admissible")?;
        for c in &self.candidates {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(c.bandwidths.h_t),
                fmt_f64(c.bandwidths.h_z),
                fmt_f64(c.score),
                c.failures,
                u8::from(c.admissible)
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        self.write_csv_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// Squared-error contributions of one (fold, candidate) task.
#[derive(Debug, Clone, Copy, Default)]
struct FoldScore {
    sse: f64,
    failures: usize,
    predicted: usize,
}

fn score_fold(
    ds: &Dataset,
    train: &Dataset,
    held_out: &[usize],
    beta: Option<&IndexCoefficient>,
    h: Bandwidths,
    spec: KernelSpec,
) -> FoldScore {
    let held_obs: usize = held_out.iter().map(|&i| ds.subject_range(i).len()).sum();
    let Some(beta) = beta else {
        return FoldScore {
            sse: 0.0,
            failures: held_obs,
            predicted: 0,
        };
    };
    let sm = LinkSmoother::new(train, beta, h, spec);
    let mut out = FoldScore::default();
    for &i in held_out {
        for k in ds.subject_range(i) {
            let fit = sm.fit_at((ds.times()[k], beta.dot(ds.z(k))));
            if fit.ok {
                let e = ds.responses()[k] - fit.a;
                out.sse += e * e;
                out.predicted += 1;
            } else {
                out.failures += 1;
            }
        }
    }
    out
}

/// Scores every candidate of `plan` and picks the minimizer among admissible ones.
pub fn cv_select(ds: &Dataset, plan: &CvPlan, spec: KernelSpec, opts: &CvOptions) -> Result<CvResult> {
    plan.validate(ds)?;
    let pilot = match plan.mode {
        CvMode::Pilot => Some(match &opts.pilot_beta {
            Some(b) => b.clone(),
            None => {
                let h = plan.grid[plan.grid.len() / 2];
                fit(ds, &opts.init, h, spec, FitOptions::default())?.beta_hat
            }
        }),
        CvMode::Full => None,
    };

    let splits: Vec<(Vec<usize>, Dataset)> = (0..plan.m)
        .map(|f| Ok((plan.fold_members(f), ds.subset(&plan.training_members(f))?)))
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..plan.grid.len())
        .flat_map(|c| (0..plan.m).map(move |f| (c, f)))
        .collect();
    let scores: Vec<FoldScore> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let h = plan.grid[c];
            let (held_out, train) = &splits[f];
            match &pilot {
                Some(beta) => score_fold(ds, train, held_out, Some(beta), h, spec),
                None => {
                    let beta = fit(train, &opts.init, h, spec, opts.fit).ok().map(|r| r.beta_hat);
                    score_fold(ds, train, held_out, beta.as_ref(), h, spec)
                }
            }
        })
        .collect();

    let total = ds.n_obs() as f64;
    let mut candidates: Vec<CvCandidate> = plan
        .grid
        .iter()
        .map(|&h| CvCandidate {
            bandwidths: h,
            score: 0.0,
            sse: 0.0,
            failures: 0,
            predicted: 0,
            admissible: false,
        })
        .collect();
    for (&(c, _), s) in tasks.iter().zip(&scores) {
        let cand = &mut candidates[c];
        cand.sse += s.sse;
        cand.failures += s.failures;
        cand.predicted += s.predicted;
    }
    for cand in &mut candidates {
        cand.score = if cand.predicted > 0 {
            cand.sse * total / cand.predicted as f64
        } else {
            f64::INFINITY
        };
        cand.admissible = (cand.failures as f64) < FAILURE_GATE * total && cand.score.is_finite();
    }
    let chosen_index = argmin_admissible(&candidates).ok_or(Error::NoAdmissibleBandwidth {
        gate_pct: FAILURE_GATE * 100.0,
    })?;
    Ok(CvResult {
        chosen: candidates[chosen_index].bandwidths,
        candidates,
        chosen_index,
        mode: plan.mode,
        m: plan.m,
    })
}

fn argmin_admissible(c: &[CvCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, cand) in c.iter().enumerate() {
        if cand.admissible && best.is_none_or(|b| cand.score < c[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Pilot fit, default grid around it and cross-validation in one call.
#[derive(Debug, Clone)]
pub struct Selection {
    pub pilot: crate::estimator::FitResult,
    pub pilot_bandwidths: Bandwidths,
    pub cv: CvResult,
}

/// Fits a pilot direction at the rule-of-thumb bandwidths of the default start,
/// builds the default grid under it and cross-validates. Fold refits start from
/// the pilot direction.
pub fn select_bandwidths(
    ds: &Dataset,
    m: usize,
    mode: CvMode,
    spec: KernelSpec,
    seed: u64,
    pilot_opts: FitOptions,
    fold_opts: FitOptions,
) -> Result<Selection> {
    let init = IndexCoefficient::uniform(ds.p());
    let pilot_bandwidths = rule_of_thumb(ds, &init);
    let pilot = fit(ds, &init, pilot_bandwidths, spec, pilot_opts)?;
    let grid = default_grid(ds, &pilot.beta_hat);
    let plan = CvPlan::new(ds, m, seed, grid, mode)?;
    let opts = CvOptions {
        fit: fold_opts,
        init: pilot.beta_hat.clone(),
        pilot_beta: Some(pilot.beta_hat.clone()),
    };
    let cv = cv_select(ds, &plan, spec, &opts)?;
    Ok(Selection {
        pilot,
        pilot_bandwidths,
        cv,
    })
}

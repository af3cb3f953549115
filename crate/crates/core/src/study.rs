//! Monte Carlo studies over the simulation designs.

use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{fit, hemisphere_starts, FitOptions, FitResult, IndexCoefficient};
use crate::inference::{estimate_covariance, GramAverage};
use crate::kernels::{Bandwidths, KernelSpec};
use crate::selection::{select_bandwidths, CvMode};
use crate::simulation::{metric_angle_degrees, metric_beta_error, metric_imse, metric_imse_integral, replicate_seed, simulate, Design};
use crate::smoother::{central_grid, LinkSmoother, EVAL_GRID_POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthChoice {
    /// m-fold cross-validation over the default grid.
    Cv(usize),
    Fixed(Bandwidths),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyOptions {
    pub kernel: KernelSpec,
    pub fit: FitOptions,
    /// Settings for direction refits inside cross-validation folds.
    pub fold_fit: FitOptions,
    pub cv_mode: CvMode,
    /// Number of starts for the final fit; 1 uses the uniform start only.
    pub starts: usize,
    /// Also estimate the sandwich covariance per replicate.
    pub covariance: bool,
    pub gram: GramAverage,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            kernel: KernelSpec::default(),
            fit: FitOptions::default(),
            fold_fit: FitOptions {
                tol: 1e-3,
                max_iter: 15,
            },
            cv_mode: CvMode::Full,
            starts: 1,
            covariance: false,
            gram: GramAverage::OwnSize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub rep: usize,
    pub seed: u64,
    pub beta_err: f64,
    pub angle_deg: f64,
    pub imse: f64,
    /// Integral over the evaluation rectangle without the unit-area mapping.
    pub imse_integral: f64,
    pub converged: bool,
    pub iterations: usize,
    pub h_t: f64,
    pub h_z: f64,
    pub beta_hat: Vec<f64>,
    /// Diagonal of the estimated `Var(β̂)`, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Absent with fewer than two values.
    pub sd: Option<f64>,
    pub count: usize,
}

impl MeanSd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let count = v.len();
        let mean = if count > 0 { v.iter().sum::<f64>() / count as f64 } else { f64::NAN };
        let sd = (count > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt());
        MeanSd { mean, sd, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub replicates: usize,
    pub failures: usize,
    pub converged: usize,
    pub beta_err: MeanSd,
    pub angle_deg: MeanSd,
    pub imse: MeanSd,
    pub h_t: MeanSd,
    pub h_z: MeanSd,
}

impl StudySummary {
    pub fn from_rows(rows: &[ReplicateRow], failures: usize) -> Self {
        StudySummary {
            replicates: rows.len() + failures,
            failures,
            converged: rows.iter().filter(|r| r.converged).count(),
            beta_err: MeanSd::of(rows.iter().map(|r| r.beta_err)),
            angle_deg: MeanSd::of(rows.iter().map(|r| r.angle_deg)),
            imse: MeanSd::of(rows.iter().map(|r| r.imse)),
            h_t: MeanSd::of(rows.iter().map(|r| r.h_t)),
            h_z: MeanSd::of(rows.iter().map(|r| r.h_z)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub design: Design,
    pub n: usize,
    pub seed: u64,
    pub bandwidths: BandwidthChoice,
    pub options: StudyOptions,
    pub beta0: Vec<f64>,
    pub rows: Vec<ReplicateRow>,
    pub failed: Vec<ReplicateFailure>,
    pub summary: StudySummary,
}

impl StudyResult {
    pub fn write_csv_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "rep,seed,beta_err,angle_deg,imse,converged,h_t,h_z")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.rep,
                r.seed,
                fmt_f64(r.beta_err),
                fmt_f64(r.angle_deg),
                fmt_f64(r.imse),
                u8::from(r.converged),
                fmt_f64(r.h_t),
                fmt_f64(r.h_z)
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

    /// Mean over coordinates of (mean estimated variance) / (Monte Carlo variance of β̂).
    pub fn variance_ratio(&self) -> Option<f64> {
        let with_var: Vec<&ReplicateRow> = self.rows.iter().filter(|r| r.var_diag.is_some()).collect();
        if with_var.len() < 2 {
            return None;
        }
        let p = self.beta0.len();
        let mut ratio_sum = 0.0;
        for q in 0..p {
            let mc = MeanSd::of(with_var.iter().map(|r| r.beta_hat[q])).sd?.powi(2);
            let est = MeanSd::of(with_var.iter().map(|r| r.var_diag.as_ref().unwrap()[q])).mean;
            ratio_sum += est / mc;
        }
        Some(ratio_sum / p as f64)
    }
}

/// Final fit: the best by objective over the uniform start, `warm` when given,
/// and `starts − 1` random hemisphere starts.
pub fn final_fit(
    ds: &Dataset,
    h: Bandwidths,
    opts: &StudyOptions,
    warm: Option<&IndexCoefficient>,
    seed: u64,
) -> Result<FitResult> {
    let mut inits = vec![IndexCoefficient::uniform(ds.p())];
    inits.extend(warm.cloned());
    if opts.starts > 1 {
        inits.extend(hemisphere_starts(ds.p(), opts.starts - 1, &mut ChaCha8Rng::seed_from_u64(seed)));
    }
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for init in &inits {
        match fit(ds, init, h, opts.kernel, opts.fit) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.final_objective < b.final_objective) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) if inits.len() == 1 => Err(e),
        _ => Err(Error::AllStartsFailed(inits.len())),
    }
}

fn run_replicate(
    design: Design,
    n: usize,
    rep: usize,
    seed: u64,
    choice: BandwidthChoice,
    opts: &StudyOptions,
) -> Result<ReplicateRow> {
    let (ds, truth) = simulate(design, n, seed)?;
    let (h, pilot) = match choice {
        BandwidthChoice::Fixed(h) => (h, None),
        BandwidthChoice::Cv(m) => {
            let fold_seed = replicate_seed(seed, 1);
            let sel = select_bandwidths(&ds, m, opts.cv_mode, opts.kernel, fold_seed, opts.fit, opts.fold_fit)?;
            (sel.cv.chosen, Some(sel.pilot.beta_hat))
        }
    };
    let result = final_fit(&ds, h, opts, pilot.as_ref(), replicate_seed(seed, 2))?;
    let beta = &result.beta_hat;
    let (t_grid, u_grid) = central_grid(&ds, beta, EVAL_GRID_POINTS);
    let surface = LinkSmoother::new(&ds, beta, h, opts.kernel).surface(&t_grid, &u_grid)?;
    let mu = truth.mu.clone();
    let imse = metric_imse(&surface, |t, u| mu(t, u));
    let imse_integral = metric_imse_integral(&surface, |t, u| mu(t, u));
    let var_diag = if opts.covariance {
        estimate_covariance(&ds, &result, h, opts.kernel, opts.gram)
            .ok()
            .map(|c| {
                let v = c.var_beta();
                (0..v.nrows()).map(|i| v[(i, i)]).collect()
            })
    } else {
        None
    };
    Ok(ReplicateRow {
        rep,
        seed,
        beta_err: metric_beta_error(beta, &truth.beta0),
        angle_deg: metric_angle_degrees(beta, &truth.beta0),
        imse,
        imse_integral,
        converged: result.converged,
        iterations: result.iterations,
        h_t: h.h_t,
        h_z: h.h_z,
        beta_hat: beta.as_slice().to_vec(),
        var_diag,
    })
}

/// Simulates `replicates` datasets, selects bandwidths, fits and scores each.
pub fn run_study(
    design: Design,
    n: usize,
    replicates: usize,
    choice: BandwidthChoice,
    seed: u64,
    opts: &StudyOptions,
) -> Result<StudyResult> {
    if replicates == 0 {
        return Err(Error::InvalidInput("a study needs at least one replicate".into()));
    }
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    if let BandwidthChoice::Cv(m) = choice {
        if m < 2 || m > n {
            return Err(Error::InvalidInput(format!("{m} folds requested for {n} subjects")));
        }
    }
    let outcomes: Vec<(usize, u64, Result<ReplicateRow>)> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let s = replicate_seed(seed, rep as u64);
            (rep, s, run_replicate(design, n, rep, s, choice, opts))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (rep, s, out) in outcomes {
        match out {
            Ok(r) => rows.push(r),
            Err(e) => failed.push(ReplicateFailure {
                rep,
                seed: s,
                error: e.to_string(),
            }),
        }
    }
    let summary = StudySummary::from_rows(&rows, failed.len());
    let beta0 = simulate(design, 2, seed)?.1.beta0.into_vec();
    Ok(StudyResult {
        design,
        n,
        seed,
        bandwidths: choice,
        options: *opts,
        beta0,
        rows,
        failed,
        summary,
    })
}

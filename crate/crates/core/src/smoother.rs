//! Local-linear fits in `(t, βᵀz)` and the bivariate mean surface.
//!
//! At an anchor `(t*, z̃*)` the fit minimizes
//! `Σ w_k [Y_k − a − b (T_k − t*) − d (βᵀZ_k − z̃*)]²`; `a` estimates the
//! surface and `(b, d)` its partial derivatives. The normal equations are
//! solved in bandwidth-scaled coordinates, which keeps the 3×3 system well
//! conditioned for any choice of units.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::estimator::IndexCoefficient;
use crate::kernels::{Bandwidths, IndexedSample, KernelSpec};

/// Local-linear coefficients at one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFit {
    /// Level, the surface estimate at the anchor.
    pub a: f64,
    /// Slope along time.
    pub b: f64,
    /// Slope along the index.
    pub d: f64,
    pub anchor: (f64, f64),
    pub ok: bool,
}

impl LocalFit {
    pub(crate) fn invalid(anchor: (f64, f64)) -> Self {
        LocalFit {
            a: f64::NAN,
            b: f64::NAN,
            d: f64::NAN,
            anchor,
            ok: false,
        }
    }
}

/// Relative ridge added to the diagonal of an ill-conditioned 3×3 normal matrix.
pub const LOCAL_RIDGE: f64 = 1e-8;
/// Squared Cholesky pivot ratio below which the normal matrix counts as ill-conditioned.
const PIVOT_RATIO_SQ: f64 = 1e-10;

/// Weighted sums of the scaled design `(1, u, v)` and response.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Moments {
    pub count: usize,
    pub mass: f64,
    pub su: f64,
    pub sv: f64,
    pub suu: f64,
    pub suv: f64,
    pub svv: f64,
    pub sy: f64,
    pub suy: f64,
    pub svy: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, w: f64, u: f64, v: f64, y: f64) {
        self.count += 1;
        self.mass += w;
        let wu = w * u;
        let wv = w * v;
        self.su += wu;
        self.sv += wv;
        self.suu += wu * u;
        self.suv += wu * v;
        self.svv += wv * v;
        self.sy += w * y;
        self.suy += wu * y;
        self.svy += wv * y;
    }

    /// Solves the local-linear normal equations; returns scaled `(a, b h_t, d h_z)`.
    pub fn solve(&self) -> Option<[f64; 3]> {
        if self.count < 3 {
            return None;
        }
        let s = 1.0 / self.mass;
        let a = Matrix3::new(
            1.0,
            self.su * s,
            self.sv * s,
            self.su * s,
            self.suu * s,
            self.suv * s,
            self.sv * s,
            self.suv * s,
            self.svv * s,
        );
        let rhs = Vector3::new(self.sy * s, self.suy * s, self.svy * s);
        solve_spd3(a, rhs).map(|x| [x[0], x[1], x[2]])
    }
}

/// Cholesky solve with a trace-scaled ridge when the pivots indicate near singularity.
fn solve_spd3(a: Matrix3<f64>, rhs: Vector3<f64>) -> Option<Vector3<f64>> {
    if let Some(ch) = a.cholesky() {
        let l = ch.l_dirty();
        let dmax = l[(0, 0)].max(l[(1, 1)]).max(l[(2, 2)]);
        let dmin = l[(0, 0)].min(l[(1, 1)]).min(l[(2, 2)]);
        if dmin * dmin >= PIVOT_RATIO_SQ * dmax * dmax {
            let x = ch.solve(&rhs);
            return x.iter().all(|v| v.is_finite()).then_some(x);
        }
    }
    let ridge = LOCAL_RIDGE * a.trace() / 3.0;
    let mut r = a;
    for i in 0..3 {
        r[(i, i)] += ridge;
    }
    let x = r.cholesky()?.solve(&rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Reusable local-linear smoother over a fixed dataset and direction.
#[derive(Debug, Clone)]
pub struct LinkSmoother<'a> {
    pub(crate) sample: IndexedSample<'a>,
    pub(crate) h: Bandwidths,
    pub(crate) spec: KernelSpec,
}

impl<'a> LinkSmoother<'a> {
    pub fn new(ds: &'a Dataset, beta: &IndexCoefficient, h: Bandwidths, spec: KernelSpec) -> Self {
        LinkSmoother {
            sample: IndexedSample::new(ds, beta.as_slice()),
            h,
            spec,
        }
    }

    /// Index values `βᵀZ_k` of the underlying sample.
    pub fn index(&self) -> &[f64] {
        &self.sample.index
    }

    pub(crate) fn moments(&self, anchor: (f64, f64), y: &[f64]) -> Moments {
        let t = self.sample.ds.times();
        let idx = &self.sample.index;
        let (inv_t, inv_z) = (1.0 / self.h.h_t, 1.0 / self.h.h_z);
        let mut m = Moments::default();
        self.sample.for_each_neighbor(anchor, self.h, self.spec, |k, w| {
            m.push(w, (t[k] - anchor.0) * inv_t, (idx[k] - anchor.1) * inv_z, y[k]);
        });
        m
    }

    /// Local-linear fit at an arbitrary anchor, using the dataset's responses.
    pub fn fit_at(&self, anchor: (f64, f64)) -> LocalFit {
        self.fit_with(anchor, self.sample.ds.responses())
    }

    /// Local-linear fit at an anchor against an alternative response vector.
    pub(crate) fn fit_with(&self, anchor: (f64, f64), y: &[f64]) -> LocalFit {
        let m = self.moments(anchor, y);
        if self.sample.is_empty_mass(m.mass) {
            return LocalFit::invalid(anchor);
        }
        match m.solve() {
            Some([a, bs, ds]) => LocalFit {
                a,
                b: bs / self.h.h_t,
                d: ds / self.h.h_z,
                anchor,
                ok: true,
            },
            None => LocalFit::invalid(anchor),
        }
    }

    /// Fits at every observation point `(T_k, βᵀZ_k)`, in flat order.
    pub fn fit_at_observations(&self) -> Vec<LocalFit> {
        use rayon::prelude::*;
        let t = self.sample.ds.times();
        (0..self.sample.len())
            .into_par_iter()
            .map(|k| self.fit_at((t[k], self.sample.index[k])))
            .collect()
    }

    /// Surface estimate at `(t, βᵀz)`.
    pub fn estimate(&self, t: f64, z: &[f64], beta: &IndexCoefficient) -> LocalFit {
        let u = z.iter().zip(beta.as_slice()).map(|(a, b)| a * b).sum();
        self.fit_at((t, u))
    }
}

/// Local-linear fit at an anchor under the index `βᵀZ`.
pub fn local_fit(
    ds: &Dataset,
    beta: &IndexCoefficient,
    anchor: (f64, f64),
    h: Bandwidths,
    spec: KernelSpec,
) -> LocalFit {
    LinkSmoother::new(ds, beta, h, spec).fit_at(anchor)
}

/// Mean estimate `μ̂(t, βᵀz)` with its two slopes; `ok = false` when undefined.
pub fn estimate_mu(
    ds: &Dataset,
    beta: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
    t: f64,
    z: &[f64],
) -> LocalFit {
    LinkSmoother::new(ds, beta, h, spec).estimate(t, z, beta)
}

/// Estimated surface on a `t × u` grid, row-major in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub t_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
    pub mu: Vec<f64>,
    pub slope_t: Vec<f64>,
    pub slope_u: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Surface {
    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.u_grid.len() + j
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn write_csv_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,u,mu,slope_t,slope_u,valid")?;
        for (i, &t) in self.t_grid.iter().enumerate() {
            for (j, &u) in self.u_grid.iter().enumerate() {
                let c = self.cell(i, j);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    fmt_f64(t),
                    fmt_f64(u),
                    fmt_f64(self.mu[c]),
                    fmt_f64(self.slope_t[c]),
                    fmt_f64(self.slope_u[c]),
                    u8::from(self.valid[c])
                )?;
            }
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

fn strictly_increasing(g: &[f64]) -> bool {
    !g.is_empty() && g.iter().all(|v| v.is_finite()) && g.windows(2).all(|w| w[0] < w[1])
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Lower and upper quantile of the central band used for evaluation grids.
pub const CENTRAL_BAND: (f64, f64) = (0.05, 0.95);
pub const EVAL_GRID_POINTS: usize = 51;

/// `n × n` grid over the central 90% of the observed times and index values.
pub fn central_grid(ds: &Dataset, beta: &IndexCoefficient, n: usize) -> (Vec<f64>, Vec<f64>) {
    let axis = |v: &[f64]| {
        let lo = quantile(v, CENTRAL_BAND.0);
        let hi = quantile(v, CENTRAL_BAND.1);
        if hi > lo {
            linspace(lo, hi, n)
        } else {
            vec![lo]
        }
    };
    (axis(ds.times()), axis(&ds.index_values(beta)))
}

impl<'a> LinkSmoother<'a> {
    /// Evaluates the surface on a grid given directly in index coordinates.
    /// Cells farther than one bandwidth outside the data's bounding box are masked.
    pub fn surface(&self, t_grid: &[f64], u_grid: &[f64]) -> Result<Surface> {
        use rayon::prelude::*;
        if !strictly_increasing(t_grid) || !strictly_increasing(u_grid) {
            return Err(Error::InvalidInput("surface grids must be strictly increasing".into()));
        }
        let (tmin, tmax) = min_max(self.sample.ds.times());
        let (umin, umax) = min_max(&self.sample.index);
        let (tmin, tmax) = (tmin - self.h.h_t, tmax + self.h.h_t);
        let (umin, umax) = (umin - self.h.h_z, umax + self.h.h_z);
        let nu = u_grid.len();
        let fits: Vec<LocalFit> = (0..t_grid.len() * nu)
            .into_par_iter()
            .map(|c| {
                let (t, u) = (t_grid[c / nu], u_grid[c % nu]);
                if t < tmin || t > tmax || u < umin || u > umax {
                    LocalFit::invalid((t, u))
                } else {
                    self.fit_at((t, u))
                }
            })
            .collect();
        Ok(Surface {
            t_grid: t_grid.to_vec(),
            u_grid: u_grid.to_vec(),
            mu: fits.iter().map(|f| f.a).collect(),
            slope_t: fits.iter().map(|f| f.b).collect(),
            slope_u: fits.iter().map(|f| f.d).collect(),
            valid: fits.iter().map(|f| f.ok).collect(),
        })
    }
}

pub(crate) fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Surface on a `(t, u)` grid; see [`LinkSmoother::surface`].
pub fn surface_grid(
    ds: &Dataset,
    beta: &IndexCoefficient,
    h: Bandwidths,
    spec: KernelSpec,
    t_grid: &[f64],
    u_grid: &[f64],
) -> Result<Surface> {
    LinkSmoother::new(ds, beta, h, spec).surface(t_grid, u_grid)
}

/// One-dimensional local-linear smoother of `y` on `x`.
#[derive(Debug, Clone)]
pub struct Curve {
    x: Vec<f64>,
    y: Vec<f64>,
    order: Vec<usize>,
    sorted_x: Vec<f64>,
    pub h: f64,
    pub spec: KernelSpec,
}

impl Curve {
    pub fn new(x: &[f64], y: &[f64], h: f64, spec: KernelSpec) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::InvalidInput("curve smoother needs matching non-empty x and y".into()));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let sorted_x = order.iter().map(|&k| x[k]).collect();
        Ok(Curve {
            x: x.to_vec(),
            y: y.to_vec(),
            order,
            sorted_x,
            h,
            spec,
        })
    }

    /// `(level, slope)` at `x0`, or `None` when fewer than two points carry weight
    /// or the window is degenerate.
    pub fn eval(&self, x0: f64) -> Option<(f64, f64)> {
        let r = self.spec.radius() * self.h;
        let lo = self.sorted_x.partition_point(|&v| v < x0 - r);
        let hi = self.sorted_x.partition_point(|&v| v <= x0 + r);
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut count = 0;
        for pos in lo..hi {
            let k = self.order[pos];
            let u = (self.x[k] - x0) / self.h;
            let w = self.spec.k(u);
            if w <= 0.0 {
                continue;
            }
            count += 1;
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
            t0 += w * self.y[k];
            t1 += w * u * self.y[k];
        }
        if count < 2 || !(s0 >= crate::kernels::EMPTY_MASS_REL * self.x.len() as f64) {
            return None;
        }
        let (s1, s2, t0, t1) = (s1 / s0, s2 / s0, t0 / s0, t1 / s0);
        let det = s2 - s1 * s1;
        if !(det > 1e-12 * s2.max(1e-300)) {
            return None;
        }
        let a = (s2 * t0 - s1 * t1) / det;
        let b = (t1 - s1 * t0) / det;
        Some((a, b / self.h))
    }

    /// Fitted values at the input points (`NaN` where undefined).
    pub fn fitted(&self) -> Vec<f64> {
        self.x
            .iter()
            .map(|&x| self.eval(x).map_or(f64::NAN, |v| v.0))
            .collect()
    }
}

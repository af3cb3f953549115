//! Product kernels, anchor weights and neighbour search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::IndexCoefficient;

/// `2Φ(4) − 1`, the Gaussian mass kept by truncation at ±4.
const TGAUSS_MASS: f64 = 0.999_936_657_516_333_2;
const TGAUSS_RADIUS: f64 = 4.0;

/// Univariate base kernel; the bivariate kernel is the product `k(u)·k(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    /// `k(u) = 0.75 (1 − u²)` on `[−1, 1]`.
    #[default]
    Epanechnikov,
    /// `k(u) = (15/16) (1 − u²)²` on `[−1, 1]`.
    Quartic,
    /// Standard normal density truncated to `[−4, 4]` and renormalized.
    #[serde(rename = "tgauss")]
    TruncatedGaussian,
}

impl KernelSpec {
    /// Half-width of the support of `k`.
    pub fn radius(self) -> f64 {
        match self {
            KernelSpec::Epanechnikov | KernelSpec::Quartic => 1.0,
            KernelSpec::TruncatedGaussian => TGAUSS_RADIUS,
        }
    }

    /// Univariate kernel value.
    #[inline]
    pub fn k(self, u: f64) -> f64 {
        let a = u.abs();
        if a > self.radius() {
            return 0.0;
        }
        match self {
            KernelSpec::Epanechnikov => 0.75 * (1.0 - a * a),
            KernelSpec::Quartic => {
                let s = 1.0 - a * a;
                0.9375 * s * s
            }
            KernelSpec::TruncatedGaussian => {
                (-0.5 * a * a).exp() / ((2.0 * std::f64::consts::PI).sqrt() * TGAUSS_MASS)
            }
        }
    }

    /// Bivariate product kernel `K(u, v) = k(u) k(v)`.
    #[inline]
    pub fn eval(self, u: f64, v: f64) -> f64 {
        let ku = self.k(u);
        if ku == 0.0 {
            return 0.0;
        }
        ku * self.k(v)
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: KernelSpec, u: f64, v: f64) -> f64 {
    spec.eval(u, v)
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelSpec::Epanechnikov => "epanechnikov",
            KernelSpec::Quartic => "quartic",
            KernelSpec::TruncatedGaussian => "tgauss",
        })
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epanechnikov" | "epa" => Ok(KernelSpec::Epanechnikov),
            "quartic" | "biweight" => Ok(KernelSpec::Quartic),
            "tgauss" | "truncated-gaussian" => Ok(KernelSpec::TruncatedGaussian),
            other => Err(Error::InvalidInput(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Time and index bandwidths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_t: f64,
    pub h_z: f64,
}

impl Bandwidths {
    pub fn new(h_t: f64, h_z: f64) -> Result<Self> {
        if !(h_t.is_finite() && h_t > 0.0 && h_z.is_finite() && h_z > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bandwidths must be positive and finite, got ({h_t}, {h_z})"
            )));
        }
        Ok(Bandwidths { h_t, h_z })
    }

    pub fn scaled(self, c: f64) -> Self {
        Bandwidths {
            h_t: self.h_t * c,
            h_z: self.h_z * c,
        }
    }
}

/// Normalized kernel weights of every observation around one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorWeights {
    /// `(t*, z̃*)`.
    pub anchor: (f64, f64),
    /// `(flat observation index, weight)` for every observation with nonzero kernel value,
    /// in increasing index order. Weights sum to one unless the anchor is empty.
    pub entries: Vec<(usize, f64)>,
    /// Raw kernel sum before normalization.
    pub mass: f64,
    /// Density estimate `mass / (M h_t h_z)`.
    pub f2_hat: f64,
    pub empty: bool,
}

impl AnchorWeights {
    pub fn weight(&self, k: usize) -> f64 {
        self.entries
            .binary_search_by_key(&k, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }
}

/// Anchors with raw kernel mass below `EMPTY_MASS_REL · M` are treated as empty.
pub const EMPTY_MASS_REL: f64 = 1e-12;

/// Kernel weights of `ds` around `anchor = (t*, z̃*)` under the index `βᵀZ`.
pub fn weights_at_anchor(
    ds: &Dataset,
    beta: &IndexCoefficient,
    anchor: (f64, f64),
    h: Bandwidths,
    spec: KernelSpec,
) -> AnchorWeights {
    let sample = IndexedSample::new(ds, beta.as_slice());
    let mut entries = Vec::new();
    let mut mass = 0.0;
    sample.for_each_neighbor(anchor, h, spec, |k, kv| {
        entries.push((k, kv));
        mass += kv;
    });
    entries.sort_unstable_by_key(|&(k, _)| k);
    let m = ds.n_obs() as f64;
    let empty = sample.is_empty_mass(mass);
    if !empty {
        for e in &mut entries {
            e.1 /= mass;
        }
    }
    AnchorWeights {
        anchor,
        entries,
        mass,
        f2_hat: mass / (m * h.h_t * h.h_z),
        empty,
    }
}

/// A dataset together with its index values and a time-sorted view
/// used to enumerate kernel neighbours.
#[derive(Debug, Clone)]
pub(crate) struct IndexedSample<'a> {
    pub ds: &'a Dataset,
    /// `βᵀZ_k` per flat observation.
    pub index: Vec<f64>,
    order: Vec<usize>,
    sorted_t: Vec<f64>,
}

impl<'a> IndexedSample<'a> {
    pub fn new(ds: &'a Dataset, beta: &[f64]) -> Self {
        Self::with_index(ds, ds.index_values_raw(beta))
    }

    pub fn with_index(ds: &'a Dataset, index: Vec<f64>) -> Self {
        let t = ds.times();
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
        let sorted_t = order.iter().map(|&k| t[k]).collect();
        IndexedSample {
            ds,
            index,
            order,
            sorted_t,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty_mass(&self, mass: f64) -> bool {
        !(mass >= EMPTY_MASS_REL * self.len() as f64)
    }

    /// Calls `f(k, K(Δt/h_t, Δz̃/h_z))` for each observation with a nonzero kernel value,
    /// visiting observations in time order (ties by flat index).
    #[inline]
    pub fn for_each_neighbor<F: FnMut(usize, f64)>(
        &self,
        anchor: (f64, f64),
        h: Bandwidths,
        spec: KernelSpec,
        mut f: F,
    ) {
        let r = spec.radius();
        let (t0, z0) = anchor;
        let lo = self.sorted_t.partition_point(|&t| t < t0 - r * h.h_t);
        let hi = self.sorted_t.partition_point(|&t| t <= t0 + r * h.h_t);
        let inv_t = 1.0 / h.h_t;
        let inv_z = 1.0 / h.h_z;
        for pos in lo..hi {
            let k = self.order[pos];
            let v = (self.index[k] - z0) * inv_z;
            if v.abs() > r {
                continue;
            }
            let kv = spec.eval((self.sorted_t[pos] - t0) * inv_t, v);
            if kv > 0.0 {
                f(k, kv);
            }
        }
    }
}

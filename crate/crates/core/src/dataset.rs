//! Longitudinal sample storage, CSV ingestion and covariate standardization.
//!
//! Observations are stored contiguously in a CSR-like layout: subject `i`
//! owns the flat observation range `offsets[i]..offsets[i + 1]`, and the
//! covariates of flat observation `k` are `z[k * p..(k + 1) * p]`.
//!
//! Subjects are kept in canonical order (sorted by id) and each subject's
//! observations are stably sorted by time, so every summation over the flat
//! index is independent of the order in which rows were supplied.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::IndexCoefficient;

/// One measurement `(t, y, z)` of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub y: f64,
    pub z: Vec<f64>,
}

/// A subject with its repeated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub observations: Vec<Observation>,
}

/// Validated longitudinal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    offsets: Vec<usize>,
    subject_of: Vec<usize>,
    t: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    p: usize,
}

impl Dataset {
    /// Builds a dataset, sorting subjects by id and observations by time.
    pub fn new(mut subjects: Vec<Subject>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::TooFewSubjects(subjects.len()));
        }
        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in subjects.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvalidInput(format!(
                    "duplicate subject id {:?}",
                    pair[0].id
                )));
            }
        }
        let p = subjects[0]
            .observations
            .first()
            .map(|o| o.z.len())
            .ok_or_else(|| {
                Error::InvalidInput(format!("subject {:?} has no observations", subjects[0].id))
            })?;
        if p == 0 {
            return Err(Error::InvalidInput("at least one covariate is required".into()));
        }

        let m: usize = subjects.iter().map(|s| s.observations.len()).sum();
        let mut ds = Dataset {
            ids: Vec::with_capacity(subjects.len()),
            offsets: Vec::with_capacity(subjects.len() + 1),
            subject_of: Vec::with_capacity(m),
            t: Vec::with_capacity(m),
            y: Vec::with_capacity(m),
            z: Vec::with_capacity(m * p),
            p,
        };
        ds.offsets.push(0);
        for (i, mut subject) in subjects.into_iter().enumerate() {
            if subject.observations.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "subject {:?} has no observations",
                    subject.id
                )));
            }
            subject.observations.sort_by(|a, b| a.t.total_cmp(&b.t));
            for obs in subject.observations {
                if obs.z.len() != p {
                    return Err(Error::InvalidInput(format!(
                        "subject {:?}: covariate length {} differs from p = {}",
                        subject.id,
                        obs.z.len(),
                        p
                    )));
                }
                if !obs.t.is_finite() || !obs.y.is_finite() || obs.z.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::InvalidInput(format!(
                        "subject {:?}: non-finite value in observation",
                        subject.id
                    )));
                }
                ds.subject_of.push(i);
                ds.t.push(obs.t);
                ds.y.push(obs.y);
                ds.z.extend_from_slice(&obs.z);
            }
            ds.ids.push(subject.id);
            ds.offsets.push(ds.t.len());
        }
        Ok(ds)
    }

    /// Number of subjects `n`.
    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    /// Total number of observations `M = Σ N_i`.
    pub fn n_obs(&self) -> usize {
        self.t.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    /// Row-major `M × p` covariate block.
    pub fn covariates(&self) -> &[f64] {
        &self.z
    }

    pub fn z(&self, k: usize) -> &[f64] {
        &self.z[k * self.p..(k + 1) * self.p]
    }

    pub fn subject_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    /// Flat observation range of subject `i`.
    pub fn subject_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// `N_i` for each subject.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Subject index owning flat observation `k`.
    pub fn subject_of(&self, k: usize) -> usize {
        self.subject_of[k]
    }

    pub fn observation(&self, k: usize) -> Observation {
        Observation {
            t: self.t[k],
            y: self.y[k],
            z: self.z(k).to_vec(),
        }
    }

    pub fn subjects(&self) -> Vec<Subject> {
        (0..self.n_subjects())
            .map(|i| Subject {
                id: self.ids[i].clone(),
                observations: self.subject_range(i).map(|k| self.observation(k)).collect(),
            })
            .collect()
    }

    /// Index values `βᵀZ_k` for every flat observation.
    pub fn index_values(&self, beta: &IndexCoefficient) -> Vec<f64> {
        self.index_values_raw(beta.as_slice())
    }

    pub(crate) fn index_values_raw(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.p);
        self.z
            .chunks_exact(self.p)
            .map(|z| z.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Same design with the responses replaced.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::InvalidInput(format!(
                "expected {} responses, got {}",
                self.n_obs(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite response".into()));
        }
        Ok(Dataset { y, ..self.clone() })
    }

    /// Dataset restricted to the given subjects (by subject index).
    pub fn subset(&self, subjects: &[usize]) -> Result<Self> {
        let picked = subjects
            .iter()
            .map(|&i| Subject {
                id: self.ids[i].clone(),
                observations: self.subject_range(i).map(|k| self.observation(k)).collect(),
            })
            .collect();
        Dataset::new(picked)
    }
}

/// Per-column location and scale removed by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnScale {
    /// 0-based covariate column.
    pub column: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StandardizationRecord {
    pub columns: Vec<ColumnScale>,
}

impl StandardizationRecord {
    /// Maps a covariate vector given on the original scale to the standardized scale.
    pub fn apply(&self, z: &mut [f64]) {
        for c in &self.columns {
            z[c.column] = (z[c.column] - c.mean) / c.std;
        }
    }

    pub fn invert(&self, z: &mut [f64]) {
        for c in &self.columns {
            z[c.column] = z[c.column] * c.std + c.mean;
        }
    }
}

/// Centers and scales the selected covariate columns (0-based) to pooled mean 0
/// and sample standard deviation 1. The standard deviation uses divisor `M − 1`.
pub fn standardize(ds: &Dataset, columns: &[usize]) -> Result<(Dataset, StandardizationRecord)> {
    let m = ds.n_obs();
    let p = ds.p();
    let mut record = StandardizationRecord::default();
    let mut cols: Vec<usize> = columns.to_vec();
    cols.sort_unstable();
    cols.dedup();
    for &c in &cols {
        if c >= p {
            return Err(Error::InvalidInput(format!(
                "covariate column {} out of range (p = {p})",
                c + 1
            )));
        }
        if m < 2 {
            return Err(Error::ZeroVariance { column: c + 1 });
        }
        let mean = (0..m).map(|k| ds.z[k * p + c]).sum::<f64>() / m as f64;
        let ss: f64 = (0..m).map(|k| (ds.z[k * p + c] - mean).powi(2)).sum();
        let std = (ss / (m - 1) as f64).sqrt();
        if !(std > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ZeroVariance { column: c + 1 });
        }
        record.columns.push(ColumnScale { column: c, mean, std });
    }
    let mut out = ds.clone();
    for row in out.z.chunks_exact_mut(p) {
        record.apply(row);
    }
    Ok((out, record))
}

/// Reads a dataset from a CSV file with header `subject_id,t,y,z1,...,zp`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let p = validate_header(&header)?;
    let width = p + 3;

    // BTreeMap keeps grouping independent of row order.
    let mut groups: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        // Header is line 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::CsvRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::CsvRow {
                row,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::CsvRow {
                row,
                message: "empty subject_id".into(),
            });
        }
        let mut values = Vec::with_capacity(width - 1);
        for (j, cell) in record.iter().enumerate().skip(1) {
            values.push(parse_cell(cell, row, &header[j])?);
        }
        groups.entry(id).or_default().push(Observation {
            t: values[0],
            y: values[1],
            z: values[2..].to_vec(),
        });
    }
    let subjects = groups
        .into_iter()
        .map(|(id, observations)| Subject { id, observations })
        .collect();
    Dataset::new(subjects)
}

fn validate_header(header: &csv::StringRecord) -> Result<usize> {
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 || names[0] != "subject_id" || names[1] != "t" || names[2] != "y" {
        return Err(Error::Csv(format!(
            "header must be subject_id,t,y,z1,...,zp; found {}",
            names.join(",")
        )));
    }
    for (j, name) in names[3..].iter().enumerate() {
        if *name != format!("z{}", j + 1) {
            return Err(Error::Csv(format!(
                "header column {} should be z{}, found {name:?}",
                j + 4,
                j + 1
            )));
        }
    }
    Ok(names.len() - 3)
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    if cell.is_empty() {
        return Err(Error::CsvRow {
            row,
            message: format!("missing value in column {column}"),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::CsvRow {
            row,
            message: format!("non-finite value {cell:?} in column {column}"),
        }),
        Err(_) => Err(Error::CsvRow {
            row,
            message: format!("cannot parse {cell:?} in column {column}"),
        }),
    }
}

/// Formats a float with 17 significant digits; parsing the result recovers it exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv_to<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    write!(w, "subject_id,t,y")?;
    for j in 1..=ds.p() {
        write!(w, ",z{j}")?;
    }
    writeln!(w)?;
    for i in 0..ds.n_subjects() {
        for k in ds.subject_range(i) {
            write!(w, "{},{},{}", ds.subject_id(i), fmt_f64(ds.t[k]), fmt_f64(ds.y[k]))?;
            for v in ds.z(k) {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_csv_to(ds, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

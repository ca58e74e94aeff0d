//! Point clouds, CSV ingestion, standardization and weighted discrete
//! distributions.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`DiscreteDistribution`].
pub const MASS_TOL: f64 = 1e-12;

/// n points in d dimensions, stored row-major. Every coordinate is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
    n: usize,
    d: usize,
}

impl PointCloud {
    pub fn new(coords: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty);
        }
        if d == 0 {
            return Err(Error::InvalidArgument(
                "points must have at least one coordinate".into(),
            ));
        }
        if coords.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                found: coords.len(),
            });
        }
        if let Some(pos) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::Parse {
                row: pos / d,
                column: pos % d,
                message: "non-finite coordinate".into(),
            });
        }
        Ok(Self { coords, n, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty)?;
        let d = first.as_ref().len();
        let mut coords = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Ragged {
                    row: i,
                    expected: d,
                    found: r.len(),
                });
            }
            coords.extend_from_slice(r);
        }
        Self::new(coords, rows.len(), d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.d)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// The sub-cloud made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for n={}",
                    self.n
                )));
            }
            coords.extend_from_slice(self.point(i));
        }
        Self::new(coords, indices.len(), self.d)
    }
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Reads a comma-separated file of numbers, one point per row.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, has_header)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut coords = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        // a trailing blank line shows up as a single empty field
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match d {
            None => d = Some(record.len()),
            Some(expected) if expected != record.len() => {
                return Err(Error::Ragged {
                    row,
                    expected,
                    found: record.len(),
                });
            }
            _ => {}
        }
        for (column, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                column,
                message: format!("not a number: {field:?}"),
            })?;
            coords.push(value);
        }
        n += 1;
    }
    let d = d.ok_or(Error::Empty)?;
    PointCloud::new(coords, n, d)
}

/// Per-column location and scale used by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant columns record 1.
    pub stddev: Vec<f64>,
}

impl StandardizationStats {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.map(cloud, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.map(cloud, |x, m, s| x * s + m)
    }

    fn map(&self, cloud: &PointCloud, f: impl Fn(f64, f64, f64) -> f64) -> Result<PointCloud> {
        if cloud.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: cloud.dim(),
            });
        }
        let d = cloud.dim();
        let coords = cloud
            .coords()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, self.mean[k % d], self.stddev[k % d]))
            .collect();
        PointCloud::new(coords, cloud.len(), d)
    }
}

/// Centers every column and scales it to unit population variance.
///
/// Columns whose spread is at roundoff level relative to their magnitude are
/// treated as constant: they map to zero and record a stddev of 1.
pub fn standardize(cloud: &PointCloud) -> Result<(PointCloud, StandardizationStats)> {
    let (n, d) = (cloud.len(), cloud.dim());
    if n < 2 {
        return Err(Error::InvalidArgument(
            "standardization needs at least two points".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for p in cloud.points() {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    let mut scale = vec![0.0f64; d];
    for p in cloud.points() {
        for k in 0..d {
            let c = p[k] - mean[k];
            var[k] += c * c;
            scale[k] = scale[k].max(p[k].abs());
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    let constant: Vec<bool> = sd
        .iter()
        .zip(&scale)
        .map(|(sd, s)| *sd <= 1e-14 * s.max(f64::MIN_POSITIVE))
        .collect();
    let stddev = sd
        .iter()
        .zip(&constant)
        .map(|(&sd, &c)| if c { 1.0 } else { sd })
        .collect();
    let stats = StandardizationStats { mean, stddev };
    let mut out = stats.apply(cloud)?;
    if constant.iter().any(|&c| c) {
        for (k, x) in out.coords.iter_mut().enumerate() {
            if constant[k % d] {
                *x = 0.0;
            }
        }
    }
    Ok((out, stats))
}

/// Nonnegative weights summing to one over the points of a shared cloud.
///
/// Weights are dense; the support is the set of strictly positive entries.
#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    cloud: Arc<PointCloud>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Validates `weights` against the mass and sign invariants.
    pub fn new(cloud: Arc<PointCloud>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != cloud.len() {
            return Err(Error::DimensionMismatch {
                expected: cloud.len(),
                found: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidWeights(format!(
                "weight {w} is negative or not finite"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self { cloud, weights })
    }

    /// Rescales nonnegative weights to unit mass before validating.
    pub fn normalized(cloud: Arc<PointCloud>, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidWeights(format!(
                "total mass {total} is not positive"
            )));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(cloud, weights)
    }

    pub fn uniform(cloud: Arc<PointCloud>) -> Self {
        let n = cloud.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            cloud,
        }
    }

    /// A unit mass on a single point.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        let cloud = PointCloud::new(point.to_vec(), 1, point.len())?;
        Ok(Self::uniform(Arc::new(cloud)))
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn shared_cloud(&self) -> &Arc<PointCloud> {
        &self.cloud
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn same_cloud(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.cloud, &other.cloud) || self.cloud == other.cloud
    }

    /// The same measure re-expressed on its support only.
    pub fn compact(&self) -> Result<Self> {
        let support = self.support();
        let cloud = Arc::new(self.cloud.select(&support)?);
        Self::normalized(cloud, support.iter().map(|&i| self.weights[i]).collect())
    }
}

/// The empirical distribution of `cloud`.
pub fn uniform(cloud: Arc<PointCloud>) -> DiscreteDistribution {
    DiscreteDistribution::uniform(cloud)
}

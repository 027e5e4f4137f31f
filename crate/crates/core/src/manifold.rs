//! Datasets near low-dimensional manifolds.
//!
//! Synthetic generators carry their ground-truth intrinsic dimension and,
//! when noiseless, analytic tangent bases. Anything else gets tangents from
//! local PCA over its nearest neighbours.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, Matrix, Rng};
use crate::network::fmt_f64;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const ORTHONORMAL_TOL: f64 = 1e-10;
const EIGENGAP_TOL: f64 = 1e-12;

/// Intrinsic dimension assumed for image data.
pub const DEFAULT_IMAGE_INTRINSIC_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Orthonormal basis (`D × d`) of the tangent space at one data point.
#[derive(Clone, Debug)]
pub struct TangentBasis {
    pub basis: Matrix,
    pub anchor_index: usize,
    /// Set when local PCA could not separate the `d`-th and `(d+1)`-th
    /// principal directions.
    pub degenerate: bool,
}

impl TangentBasis {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    labels: Vec<f64>,
    intrinsic_dim: usize,
    tangent_bases: Option<Vec<Matrix>>,
    radius: f64,
    image_shape: Option<ImageShape>,
}

impl Dataset {
    /// Labels are class indices stored as `f64` for classification, or real
    /// targets for regression.
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<f64>, intrinsic_dim: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::dim("points of unequal length"));
        }
        if points.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::arg("dataset values must be finite"));
        }
        if !points.is_empty() && !(1..=dim).contains(&intrinsic_dim) {
            return Err(Error::config(format!(
                "intrinsic dimension {intrinsic_dim} outside 1..={dim}"
            )));
        }
        let radius = points.iter().map(|p| norm2(p)).fold(0.0, f64::max);
        Ok(Self {
            points,
            labels,
            intrinsic_dim,
            tangent_bases: None,
            radius,
            image_shape: None,
        })
    }

    pub fn with_tangent_bases(mut self, bases: Vec<Matrix>) -> Result<Self> {
        if bases.len() != self.len() {
            return Err(Error::dim("one tangent basis per point required"));
        }
        for b in &bases {
            if b.rows() != self.dim() || b.cols() != self.intrinsic_dim {
                return Err(Error::dim(format!(
                    "tangent basis {}x{}, expected {}x{}",
                    b.rows(),
                    b.cols(),
                    self.dim(),
                    self.intrinsic_dim
                )));
            }
            let gram = b.transpose().matmul(b)?;
            if gram.max_abs_diff(&Matrix::identity(b.cols())) > ORTHONORMAL_TOL {
                return Err(Error::arg("tangent basis columns are not orthonormal"));
            }
        }
        self.tangent_bases = Some(bases);
        Ok(self)
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.len() != self.dim() {
            return Err(Error::dim(format!(
                "image shape {shape:?} does not match D = {}",
                self.dim()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn with_intrinsic_dim(mut self, d: usize) -> Result<Self> {
        if !(1..=self.dim()).contains(&d) {
            return Err(Error::config(format!("intrinsic dimension {d} outside 1..={}", self.dim())));
        }
        if d != self.intrinsic_dim {
            self.tangent_bases = None;
        }
        self.intrinsic_dim = d;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Ambient dimension `D`.
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn class(&self, i: usize) -> usize {
        self.labels[i].max(0.0) as usize
    }

    pub fn tangent_bases(&self) -> Option<&[Matrix]> {
        self.tangent_bases.as_deref()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    /// Number of classes (`max label + 1`).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().fold(0.0_f64, |a, b| a.max(*b)) as usize + 1
    }

    /// Attached tangent basis at `i`, or a local-PCA estimate with `k`
    /// neighbours.
    pub fn tangent_basis(&self, i: usize, k: usize) -> Result<TangentBasis> {
        match &self.tangent_bases {
            Some(bases) => Ok(TangentBasis {
                basis: bases[i].clone(),
                anchor_index: i,
                degenerate: false,
            }),
            None => estimate_tangent_basis(self, i, k),
        }
    }

    /// Estimates and attaches tangent bases for every point if none are present.
    pub fn ensure_tangent_bases(self, k: usize) -> Result<Self> {
        if self.tangent_bases.is_some() {
            return Ok(self);
        }
        let bases = (0..self.len())
            .into_par_iter()
            .map(|i| estimate_tangent_basis(&self, i, k).map(|t| t.basis))
            .collect::<Result<Vec<_>>>()?;
        self.with_tangent_bases(bases)
    }

    /// Points `range` as a new dataset, keeping metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut ds = Self::new(points, labels, self.intrinsic_dim)?;
        ds.image_shape = self.image_shape;
        if let Some(b) = &self.tangent_bases {
            ds.tangent_bases = Some(indices.iter().map(|&i| b[i].clone()).collect());
        }
        Ok(ds)
    }

    /// Seeded shuffle split into `(train, test)` with `n_test` test points.
    pub fn split(&self, n_test: usize, rng: &mut Rng) -> Result<(Self, Self)> {
        if n_test >= self.len() {
            return Err(Error::arg("test split must leave training points"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Median Euclidean distance from each point to its nearest other point.
    pub fn median_nn_distance(&self) -> f64 {
        let mut nn: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                (0..self.len())
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(&self.points[i], &self.points[j]))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        if nn.is_empty() {
            return 0.0;
        }
        nn.sort_by(f64::total_cmp);
        let mid = nn.len() / 2;
        if nn.len() % 2 == 1 {
            nn[mid]
        } else {
            0.5 * (nn[mid - 1] + nn[mid])
        }
    }

    /// CSV with header `x_0,…,x_{D-1},label`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim())
            .map(|j| format!("x_{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (p, y) in self.points.iter().zip(&self.labels) {
            let row: Vec<String> = p.iter().chain(std::iter::once(y)).map(|v| fmt_f64(*v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, intrinsic_dim: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::config("empty dataset CSV"))?;
        let cols = header.split(',').count();
        if cols < 2 || !header.ends_with("label") {
            return Err(Error::config("dataset CSV header must end with `label`"));
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("dataset CSV line {}: {e}", ln + 2)))?;
            if vals.len() != cols {
                return Err(Error::config(format!(
                    "dataset CSV line {}: {} fields, expected {cols}",
                    ln + 2,
                    vals.len()
                )));
            }
            labels.push(vals[cols - 1]);
            points.push(vals[..cols - 1].to_vec());
        }
        Self::new(points, labels, intrinsic_dim)
    }

    /// Flattened tangent bases, one row per point (`D × d` row-major).
    pub fn tangents_to_csv(&self) -> Option<String> {
        let bases = self.tangent_bases.as_ref()?;
        let mut out = String::new();
        for b in bases {
            let row: Vec<String> = b.as_slice().iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Some(out)
    }

    pub fn with_tangents_csv(self, text: &str) -> Result<Self> {
        let (dim, d) = (self.dim(), self.intrinsic_dim);
        let bases = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let vals = line
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::config(format!("tangent CSV: {e}")))?;
                Matrix::from_vec(dim, d, vals)
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_tangent_bases(bases)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, &self.to_csv())
    }
}

pub(crate) fn write_file(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Random orthogonal `D × D` matrix (orthonormalized Gaussian).
fn random_rotation(dim: usize, rng: &mut Rng) -> Result<Matrix> {
    loop {
        let data = (0..dim * dim).map(|_| rng.normal()).collect();
        match linalg::orthonormalize(&Matrix::from_vec(dim, dim, data)?) {
            Ok(q) => return Ok(q),
            Err(Error::Rank { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Unit circle in the plane spanned by the first two columns of a seeded
/// random rotation of `R^D`, at evenly spaced angles `2πi/n`. Label 0 on the
/// upper half-circle (`θ < π`), 1 otherwise.
pub fn gen_circle(dim: usize, n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::dim("circle needs D >= 2"));
    }
    if n < 3 {
        return Err(Error::arg("circle needs n >= 3"));
    }
    if !(noise >= 0.0) {
        return Err(Error::arg("noise must be non-negative"));
    }
    let q = random_rotation(dim, rng)?;
    let (e0, e1) = (q.column(0), q.column(1));
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (s, c) = theta.sin_cos();
        let mut p: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| c * a + s * b).collect();
        let t: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| -s * a + c * b).collect();
        if noise > 0.0 {
            p.iter_mut().for_each(|v| *v += noise * rng.normal());
        }
        points.push(p);
        labels.push(if theta < std::f64::consts::PI { 0.0 } else { 1.0 });
        let tn = norm2(&t);
        tangents.push(Matrix::from_vec(dim, 1, t.iter().map(|v| v / tn).collect())?);
    }
    let ds = Dataset::new(points, labels, 1)?;
    if noise == 0.0 {
        ds.with_tangent_bases(tangents)
    } else {
        Ok(ds)
    }
}

/// Swiss roll in `R³`: `(t cos t, h, t sin t)` with `t = 1.5π(1 + 2s)`,
/// `s ~ U(0,1)`, `h ~ U(0, 21)`. The label is the roll parameter `t`.
pub fn gen_swiss_roll(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::arg("swiss roll needs n >= 10"));
    }
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    for _ in 0..n {
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.uniform());
        let h = 21.0 * rng.uniform();
        let (s, c) = t.sin_cos();
        let mut p = vec![t * c, h, t * s];
        if noise > 0.0 {
            p.iter_mut().for_each(|v| *v += noise * rng.normal());
        }
        points.push(p);
        labels.push(t);
        let dt = vec![c - t * s, 0.0, s + t * c];
        let dh = vec![0.0, 1.0, 0.0];
        tangents.push(linalg::orthonormalize(&Matrix::from_columns(&[dt, dh])?)?);
    }
    let ds = Dataset::new(points, labels, 2)?;
    if noise == 0.0 {
        ds.with_tangent_bases(tangents)
    } else {
        Ok(ds)
    }
}

/// Analytic point and unit tangent of the two-spirals curve: arm `arm`
/// (0 or 1) at parameter `t ∈ [0.1, 1]`, radius `t`, angle `3πt + armπ`.
pub fn spiral_point(t: f64, arm: usize) -> (Vec<f64>, Vec<f64>) {
    let turns = 3.0 * std::f64::consts::PI;
    let phi = turns * t + arm as f64 * std::f64::consts::PI;
    let (s, c) = phi.sin_cos();
    let p = vec![t * c, t * s];
    let dt = vec![c - t * turns * s, s + t * turns * c];
    let n = norm2(&dt);
    (p, vec![dt[0] / n, dt[1] / n])
}

/// Two interleaved spirals in `R²`; point `i` belongs to arm `i % 2`.
pub fn gen_spirals(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::arg("spirals need n >= 10"));
    }
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let arm = i % 2;
        let t = 0.1 + 0.9 * rng.uniform();
        let (mut p, tan) = spiral_point(t, arm);
        if noise > 0.0 {
            p.iter_mut().for_each(|v| *v += noise * rng.normal());
        }
        points.push(p);
        labels.push(arm as f64);
        tangents.push(Matrix::from_vec(2, 1, tan)?);
    }
    let ds = Dataset::new(points, labels, 1)?;
    if noise == 0.0 {
        ds.with_tangent_bases(tangents)
    } else {
        Ok(ds)
    }
}

/// Default neighbourhood size for local PCA: `max(2d + 2, 8)`.
pub fn default_neighbourhood(d: usize) -> usize {
    (2 * d + 2).max(8)
}

/// Local PCA tangent estimate at point `i` from its `k` nearest neighbours.
///
/// Neighbours at distance zero (duplicates of `x_i`) are skipped; ties are
/// broken by index. The patch is `x_i` plus the neighbours, centered.
pub fn estimate_tangent_basis(ds: &Dataset, i: usize, k: usize) -> Result<TangentBasis> {
    let d = ds.intrinsic_dim();
    if k < d + 1 || k >= ds.len() {
        return Err(Error::arg(format!(
            "neighbourhood size {k} must satisfy d + 1 <= k < n ({} <= k < {})",
            d + 1,
            ds.len()
        )));
    }
    let anchor = ds.point(i);
    let mut candidates: Vec<(f64, usize)> = (0..ds.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(anchor, ds.point(j)), j))
        .filter(|(dist, _)| *dist > 0.0)
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);
    if candidates.len() < d + 1 {
        return Err(Error::arg("not enough distinct neighbours for local PCA"));
    }

    let patch: Vec<&[f64]> = std::iter::once(anchor)
        .chain(candidates.iter().map(|(_, j)| ds.point(*j)))
        .collect();
    let dim = ds.dim();
    let mut mean = vec![0.0; dim];
    for p in &patch {
        linalg::axpy(1.0 / patch.len() as f64, p, &mut mean);
    }
    let centered: Vec<Vec<f64>> = patch.iter().map(|p| linalg::sub(p, &mean)).collect();
    let x = Matrix::from_rows(&centered)?;

    let (values, directions) = if dim <= x.rows() {
        let cov = x.transpose().matmul(&x)?;
        let (values, vectors) = linalg::symmetric_eigen(&cov)?;
        let dirs: Vec<Vec<f64>> = (0..d).map(|c| vectors.column(c)).collect();
        (values, dirs)
    } else {
        let gram = x.matmul(&x.transpose())?;
        let (values, vectors) = linalg::symmetric_eigen(&gram)?;
        let dirs: Vec<Vec<f64>> = (0..d)
            .map(|c| x.t_matvec(&vectors.column(c)))
            .collect();
        (values, dirs)
    };
    let next = values.get(d).copied().unwrap_or(0.0);
    let degenerate = values[d - 1] - next < EIGENGAP_TOL;
    let basis = complete_basis(&directions, dim)?;
    Ok(TangentBasis {
        basis,
        anchor_index: i,
        degenerate,
    })
}

/// Orthonormalizes `directions`, replacing numerically null ones with
/// standard basis vectors so a full `dim × k` basis is always returned.
fn complete_basis(directions: &[Vec<f64>], dim: usize) -> Result<Matrix> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut spare = 0;
    for dir in directions {
        let mut v = dir.clone();
        loop {
            for _pass in 0..2 {
                for q in &basis {
                    let c = dot(q, &v);
                    linalg::axpy(-c, q, &mut v);
                }
            }
            let n = norm2(&v);
            if n > 1e-8 * norm2(dir).max(1e-300) && n > 1e-150 {
                basis.push(v.iter().map(|x| x / n).collect());
                break;
            }
            if spare >= dim {
                return Err(Error::Rank {
                    column: basis.len(),
                    pivot: n,
                });
            }
            v = vec![0.0; dim];
            v[spare] = 1.0;
            spare += 1;
        }
    }
    linalg::orthonormalize(&Matrix::from_columns(&basis)?)
}

/// Unit vector `B s` with `s` uniform on the `d`-sphere.
pub fn sample_tangent_direction(basis: &TangentBasis, rng: &mut Rng) -> Result<Vec<f64>> {
    let s = linalg::sample_unit_sphere(basis.dim(), rng)?;
    let u = basis.basis.matvec(&s);
    let n = norm2(&u);
    Ok(u.iter().map(|v| v / n).collect())
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal bases of equal width.
pub fn principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    let m = a.transpose().matmul(b)?;
    let gram = m.transpose().matmul(&m)?;
    let (values, _) = linalg::symmetric_eigen(&gram)?;
    let smallest = values.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    Ok(smallest.min(1.0).acos())
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("truncated while reading {what}"),
        })
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("image data truncated: {} bytes, expected {need}", bytes.len()),
        });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("label data truncated: {} bytes, expected {}", bytes.len(), 8 + n),
        });
    }
    Ok(&bytes[8..8 + n])
}

/// Scales a whole dataset to zero mean and unit infinity norm:
/// `x' = (x − μ) / max|x − μ|` with `μ` the mean over every pixel of every
/// image. An all-constant dataset maps to zeros.
pub fn normalize_images(images: &mut [Vec<f64>]) {
    let count: usize = images.iter().map(Vec::len).sum();
    if count == 0 {
        return;
    }
    let mean = images.iter().flatten().sum::<f64>() / count as f64;
    let spread = images
        .iter()
        .flatten()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max);
    for img in images.iter_mut() {
        for v in img.iter_mut() {
            *v = if spread > 0.0 { (*v - mean) / spread } else { 0.0 };
        }
    }
}

/// Builds a dataset from raw IDX bytes, keeping at most `limit` images.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8], limit: usize) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    let take = n.min(limit);
    let size = rows * cols;
    let mut images: Vec<Vec<f64>> = (0..take)
        .map(|i| pixels[i * size..(i + 1) * size].iter().map(|&p| f64::from(p)).collect())
        .collect();
    normalize_images(&mut images);
    let labels = labels[..take].iter().map(|&l| f64::from(l)).collect();
    let d = DEFAULT_IMAGE_INTRINSIC_DIM.min(size);
    Dataset::new(images, labels, d)?.with_image_shape(ImageShape {
        width: cols,
        height: rows,
        channels: 1,
    })
}

/// Reads an IDX image/label file pair.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
) -> Result<Dataset> {
    let images = fs::read(images_path.as_ref()).map_err(|e| Error::io(&images_path, e))?;
    let labels = fs::read(labels_path.as_ref()).map_err(|e| Error::io(&labels_path, e))?;
    dataset_from_idx(&images, &labels, limit)
}

fn check_image_len(x: &[f64], width: usize, height: usize) -> Result<usize> {
    let plane = width * height;
    if plane == 0 || (x.len() != plane && x.len() != 3 * plane) {
        return Err(Error::dim(format!(
            "image of length {} is neither {width}x{height} nor 3x{width}x{height}",
            x.len()
        )));
    }
    Ok(x.len() / plane)
}

/// Integer pixel shift with zero padding: output `(r, c)` takes input
/// `(r − dy, c − dx)`. Channels are stored as consecutive planes.
pub fn translate_image(x: &[f64], width: usize, height: usize, dx: i64, dy: i64) -> Result<Vec<f64>> {
    let channels = check_image_len(x, width, height)?;
    if dx.unsigned_abs() as usize >= width || dy.unsigned_abs() as usize >= height {
        return Err(Error::arg(format!(
            "shift ({dx}, {dy}) too large for a {width}x{height} image"
        )));
    }
    let plane = width * height;
    let mut out = vec![0.0; x.len()];
    for ch in 0..channels {
        for r in 0..height as i64 {
            let sr = r - dy;
            if sr < 0 || sr >= height as i64 {
                continue;
            }
            for c in 0..width as i64 {
                let sc = c - dx;
                if sc < 0 || sc >= width as i64 {
                    continue;
                }
                out[ch * plane + (r as usize) * width + c as usize] =
                    x[ch * plane + (sr as usize) * width + sc as usize];
            }
        }
    }
    Ok(out)
}

/// Mirror image left to right.
pub fn flip_horizontal(x: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    let channels = check_image_len(x, width, height)?;
    let plane = width * height;
    let mut out = vec![0.0; x.len()];
    for ch in 0..channels {
        for r in 0..height {
            for c in 0..width {
                out[ch * plane + r * width + c] = x[ch * plane + r * width + (width - 1 - c)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deg(rad: f64) -> f64 {
        rad.to_degrees()
    }

    #[test]
    fn circle_is_unit_with_analytic_tangents() {
        let mut rng = Rng::new(7);
        let ds = gen_circle(5, 40, 0.0, &mut rng).unwrap();
        assert!((ds.radius() - 1.0).abs() < 1e-12);
        for p in ds.points() {
            assert!((norm2(p) - 1.0).abs() < 1e-12);
        }
        // the tangent at θ is the derivative of the embedded point
        let bases = ds.tangent_bases().unwrap();
        for i in 0..ds.len() {
            let j = (i + 1) % ds.len();
            let chord = linalg::sub(ds.point(j), ds.point(i));
            let cos = dot(&chord, &bases[i].column(0)) / norm2(&chord);
            assert!(cos > 0.99);
            assert!(dot(&bases[i].column(0), ds.point(i)).abs() < 1e-12);
        }
        assert!(gen_circle(1, 10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn four_point_circle_is_a_cross() {
        let mut rng = Rng::new(3);
        let ds = gen_circle(6, 4, 0.0, &mut rng).unwrap();
        for i in 0..4 {
            let next = dot(ds.point(i), ds.point((i + 1) % 4));
            let opposite = dot(ds.point(i), ds.point((i + 2) % 4));
            assert!(next.abs() < 1e-12);
            assert!((opposite + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn swiss_roll_satisfies_parametrization() {
        let mut rng = Rng::new(1);
        let ds = gen_swiss_roll(200, 0.0, &mut rng).unwrap();
        assert_eq!((ds.dim(), ds.intrinsic_dim()), (3, 2));
        for (p, t) in ds.points().iter().zip(ds.labels()) {
            assert_eq!(p[0], t * t.cos());
            assert_eq!(p[2], t * t.sin());
            assert!((0.0..21.0).contains(&p[1]));
        }
    }

    #[test]
    fn spirals_are_balanced() {
        let mut rng = Rng::new(2);
        for n in [10, 11, 501] {
            let ds = gen_spirals(n, 0.0, &mut rng).unwrap();
            let ones = ds.labels().iter().filter(|&&l| l == 1.0).count();
            assert!((n - ones).abs_diff(ones) <= 1);
        }
    }

    #[test]
    fn pca_recovers_a_plane() {
        let mut rng = Rng::new(9);
        let plane = linalg::orthonormalize(
            &Matrix::from_vec(5, 2, (0..10).map(|_| rng.normal()).collect()).unwrap(),
        )
        .unwrap();
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| plane.matvec(&[rng.normal(), rng.normal()]))
            .collect();
        let ds = Dataset::new(points, vec![0.0; 50], 2).unwrap();
        let t = estimate_tangent_basis(&ds, 0, 8).unwrap();
        let proj = t.basis.matmul(&t.basis.transpose()).unwrap();
        let target = plane.matmul(&plane.transpose()).unwrap();
        let err = linalg::frobenius_norm(&proj.sub(&target).unwrap()).unwrap();
        assert!(err <= 1e-8, "{err}");
        assert!(!t.degenerate);
        assert!(estimate_tangent_basis(&ds, 0, 2).is_err());
        assert!(estimate_tangent_basis(&ds, 0, 50).is_err());
    }

    #[test]
    fn pca_on_circle_matches_analytic_tangent() {
        let mut rng = Rng::new(10);
        let ds = gen_circle(3, 1000, 0.0, &mut rng).unwrap();
        let bases = ds.tangent_bases().unwrap().to_vec();
        for i in (0..1000).step_by(97) {
            let t = estimate_tangent_basis(&ds, i, 8).unwrap();
            let angle = principal_angle(&t.basis, &bases[i]).unwrap();
            assert!(deg(angle) <= 2.0, "point {i}: {}", deg(angle));
        }
    }

    #[test]
    fn duplicate_neighbours_are_ignored() {
        let mut rng = Rng::new(11);
        let base = gen_swiss_roll(300, 0.0, &mut rng).unwrap();
        let mut points = base.points().to_vec();
        let mut labels = base.labels().to_vec();
        points.push(points[5].clone());
        labels.push(labels[5]);
        let with_dup = Dataset::new(points, labels, 2).unwrap();
        let plain = Dataset::new(base.points().to_vec(), base.labels().to_vec(), 2).unwrap();
        let a = estimate_tangent_basis(&with_dup, 5, 12).unwrap();
        let b = estimate_tangent_basis(&plain, 5, 12).unwrap();
        assert_eq!(a.basis, b.basis);
    }

    #[test]
    fn tangent_directions_stay_in_span() {
        let mut rng = Rng::new(12);
        let ds = gen_swiss_roll(50, 0.0, &mut rng).unwrap();
        let t = ds.tangent_basis(3, 12).unwrap();
        for _ in 0..100 {
            let u = sample_tangent_direction(&t, &mut rng).unwrap();
            let coords = t.basis.t_matvec(&u);
            assert!((norm2(&coords) - 1.0).abs() < 1e-12);
            let back = t.basis.matvec(&coords);
            assert!(norm2(&linalg::sub(&u, &back)) <= 1e-10);
        }
        let circle = gen_circle(4, 10, 0.0, &mut rng).unwrap();
        let t = circle.tangent_basis(2, 8).unwrap();
        let col = t.basis.column(0);
        let u = sample_tangent_direction(&t, &mut rng).unwrap();
        assert!(u == col || u == col.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn tangent_direction_mean_is_centered() {
        let mut rng = Rng::new(13);
        let ds = gen_swiss_roll(20, 0.0, &mut rng).unwrap();
        let t = ds.tangent_basis(0, 8).unwrap();
        let mut mean = [0.0; 2];
        let draws = 100_000;
        for _ in 0..draws {
            let u = sample_tangent_direction(&t, &mut rng).unwrap();
            let c = t.basis.t_matvec(&u);
            mean[0] += c[0] / draws as f64;
            mean[1] += c[1] / draws as f64;
        }
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean:?}");
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            out.extend(v.to_be_bytes());
        }
        out.extend(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(IDX_LABELS_MAGIC.to_be_bytes());
        out.extend((labels.len() as u32).to_be_bytes());
        out.extend(labels);
        out
    }

    #[test]
    fn idx_magic_and_truncation() {
        let labels = idx_labels(&[1, 2]);
        let mut wrong = labels.clone();
        wrong[3] = 0x03;
        match parse_idx_labels(&wrong) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let images = idx_images(2, 2, 2, &[0; 7]);
        match parse_idx_images(&images) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_normalization() {
        // image 0 is all zero, image 1 is all 255 except one pixel of 51
        let mut pixels = vec![0u8; 4];
        pixels.extend([255, 255, 255, 51]);
        let ds = dataset_from_idx(&idx_images(2, 2, 2, &pixels), &idx_labels(&[3, 7]), 10).unwrap();
        let mean = (3.0 * 255.0 + 51.0) / 8.0;
        let spread = 255.0 - mean;
        for v in ds.point(0) {
            assert!((v - (-mean / spread)).abs() < 1e-15);
        }
        assert!(ds.points().iter().flatten().all(|v| v.abs() <= 1.0));
        assert_eq!(ds.labels(), &[3.0, 7.0]);
        let one = dataset_from_idx(&idx_images(2, 2, 2, &pixels), &idx_labels(&[3, 7]), 1).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn translation_examples() {
        let (w, h) = (5, 4);
        let mut img = vec![0.0; w * h];
        img[w + 2] = 1.0;
        assert_eq!(translate_image(&img, w, h, 0, 0).unwrap(), img);
        let shifted = translate_image(&img, w, h, 1, 0).unwrap();
        assert_eq!(shifted[w + 3], 1.0);
        assert_eq!(shifted[w + 2], 0.0);
        let back = translate_image(&shifted, w, h, -1, 0).unwrap();
        assert_eq!(back, img);
        assert!(translate_image(&img, w, h, 5, 0).is_err());
        assert!(translate_image(&img, w, h, 0, -4).is_err());

        let rgb: Vec<f64> = (0..3 * w * h).map(|v| v as f64).collect();
        let moved = translate_image(&rgb, w, h, 0, 1).unwrap();
        assert_eq!(moved[2 * w * h + w], rgb[2 * w * h]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = Rng::new(4);
        let ds = gen_spirals(20, 0.01, &mut rng).unwrap();
        let back = Dataset::from_csv(&ds.to_csv(), 1).unwrap();
        assert_eq!(back.points(), ds.points());
        assert_eq!(back.labels(), ds.labels());
    }
}

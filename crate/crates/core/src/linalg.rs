//! Dense row-major matrices, norms and a seeded random source.
//!
//! Everything here is `f64`. Vectors are plain `Vec<f64>` / `&[f64]`.
//!
//! The random source is xoshiro256++ seeded through SplitMix64
//! (`rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64`). Gaussian draws use the
//! ziggurat sampler from `rand_distr`. Both are pure integer/float code, so
//! identical seeds give identical streams on every platform.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Default relative tolerance for [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Default iteration cap for [`spectral_norm`].
pub const SPECTRAL_MAX_ITER: usize = 1000;

/// Pivot threshold for [`orthonormalize`].
const RANK_TOL: f64 = 1e-10;

/// Seed used for the power-iteration start vector when callers do not
/// supply their own generator.
const POWER_ITERATION_SEED: u64 = 0x00c0_ffee_5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::dim("ragged columns"));
        }
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m.data[i * m.cols + j] = *v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix entries must be finite"));
        }
        Ok(m)
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                m.data[i * v.len() + j] = ui * vj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            if *yr == 0.0 {
                continue;
            }
            axpy(*yr, self.row(r), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, a) in self.row(r).iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                axpy(*a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    /// `self - other`, shapes must agree.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Gram matrix on the smaller side: `MᵀM` when `cols <= rows`, else `MMᵀ`.
    fn small_gram(&self) -> (Matrix, bool) {
        let right = self.cols <= self.rows;
        let k = if right { self.cols } else { self.rows };
        let mut g = Matrix::zeros(k, k);
        if right {
            for r in 0..self.rows {
                let row = self.row(r);
                for i in 0..k {
                    if row[i] == 0.0 {
                        continue;
                    }
                    for j in i..k {
                        g.data[i * k + j] += row[i] * row[j];
                    }
                }
            }
        } else {
            for i in 0..k {
                for j in i..k {
                    g.data[i * k + j] = dot(self.row(i), self.row(j));
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                g.data[i * k + j] = g.data[j * k + i];
            }
        }
        (g, right)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(a: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().map(|v| v * alpha).collect()
}

pub fn frobenius_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::dim("frobenius norm of an empty matrix"));
    }
    Ok(norm2(m.as_slice()))
}

/// Largest singular value with its singular vectors: `M v = σ u`.
///
/// The value comes from [`spectral_norm`]; the vectors from a full
/// eigen-decomposition of the small Gram matrix, which the penalty
/// subgradient needs to full precision.
#[derive(Clone, Debug)]
pub struct SingularTriple {
    pub value: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Largest singular value of `m` by power iteration on the Gram matrix.
///
/// Iterates on whichever of `MᵀM` / `MMᵀ` is smaller; both share the
/// nonzero spectrum. Stops when the Rayleigh quotient changes by at most
/// `tol` relative.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize, rng: &mut Rng) -> Result<f64> {
    power_iteration(m, tol, max_iter, rng)
}

/// [`spectral_norm`] with the default tolerance, iteration cap and a fixed
/// start seed. When the iteration stalls on a tiny eigengap, the value is
/// read from an exact eigendecomposition of the small Gram matrix instead.
pub fn spectral_norm_default(m: &Matrix) -> Result<f64> {
    let mut rng = Rng::new(POWER_ITERATION_SEED);
    match spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER, &mut rng) {
        Err(Error::Convergence { .. }) => gram_top_eigenvalue(m).map(|v| v.max(0.0).sqrt()),
        other => other,
    }
}

fn gram_top_eigenvalue(m: &Matrix) -> Result<f64> {
    let (gram, _) = m.small_gram();
    Ok(symmetric_eigen(&gram)?.0[0])
}

/// [`top_singular_triple`] with the defaults of [`spectral_norm_default`].
pub fn top_singular_triple_default(m: &Matrix) -> Result<SingularTriple> {
    let mut rng = Rng::new(POWER_ITERATION_SEED);
    match top_singular_triple(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER, &mut rng) {
        Err(Error::Convergence { .. }) => singular_triple_with_value(m, gram_top_eigenvalue(m)?.max(0.0).sqrt()),
        other => other,
    }
}

pub fn top_singular_triple(
    m: &Matrix,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<SingularTriple> {
    let value = power_iteration(m, tol, max_iter, rng)?;
    singular_triple_with_value(m, value)
}

/// Singular vectors from the Gram eigendecomposition, paired with `value`.
fn singular_triple_with_value(m: &Matrix, value: f64) -> Result<SingularTriple> {
    let (gram, right_side) = m.small_gram();
    let (_, vectors) = symmetric_eigen(&gram)?;
    let vec = vectors.column(0);
    let other = if right_side { m.matvec(&vec) } else { m.t_matvec(&vec) };
    let n = norm2(&other);
    let other = if n > 0.0 {
        other.iter().map(|v| v / n).collect()
    } else {
        other
    };
    Ok(if right_side {
        SingularTriple { value, left: other, right: vec }
    } else {
        SingularTriple { value, left: vec, right: other }
    })
}

fn power_iteration(m: &Matrix, tol: f64, max_iter: usize, rng: &mut Rng) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::arg(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::arg("max_iter must be at least 1"));
    }
    if m.is_empty() {
        return Err(Error::dim("spectral norm of an empty matrix"));
    }
    let (gram, _) = m.small_gram();
    let k = gram.rows();
    if gram.as_slice().iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    if k == 1 {
        return Ok(gram.get(0, 0).sqrt());
    }

    let mut v = sample_unit_sphere(k, rng)?;
    let mut lambda_prev = f64::NAN;
    let mut lambda = 0.0;
    for iter in 0..max_iter {
        let w = gram.matvec(&v);
        lambda = dot(&v, &w);
        let n = norm2(&w);
        if n == 0.0 {
            // start vector in the null space
            v = sample_unit_sphere(k, rng)?;
            continue;
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        if iter > 0 && (lambda - lambda_prev).abs() <= tol * lambda.abs() {
            let refined = dot(&next, &gram.matvec(&next));
            return Ok(refined.max(lambda).sqrt());
        }
        lambda_prev = lambda;
        v = next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        estimate: lambda.max(0.0).sqrt(),
    })
}

/// Uniform draw from the unit sphere in `R^dim` (normalized Gaussian).
pub fn sample_unit_sphere(dim: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::dim("unit sphere of dimension 0"));
    }
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm2(&g);
        if n > 1e-300 {
            return Ok(g.iter().map(|v| v / n).collect());
        }
    }
}

/// Orthonormal basis for the column span, by modified Gram–Schmidt with one
/// re-orthogonalization pass.
pub fn orthonormalize(columns: &Matrix) -> Result<Matrix> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.cols());
    for j in 0..columns.cols() {
        let mut v = columns.column(j);
        for _pass in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                axpy(-c, q, &mut v);
            }
        }
        let n = norm2(&v);
        if n < RANK_TOL {
            return Err(Error::Rank { column: j, pivot: n });
        }
        basis.push(scaled(&v, 1.0 / n));
    }
    if basis.is_empty() {
        return Ok(Matrix::zeros(columns.rows(), 0));
    }
    Matrix::from_columns(&basis)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order
/// with matching eigenvector columns.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::dim("symmetric_eigen needs a square matrix"));
    }
    let n = m.rows();
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, c, eig.eigenvectors[(r, i)]);
        }
    }
    Ok((values, vectors))
}

/// Seeded xoshiro256++ generator.
#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream for `(seed, stream)`, e.g. one per data point.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(
            seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)),
        ))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen::<u64>()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

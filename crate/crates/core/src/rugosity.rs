//! Tangent-Hessian rugosity estimators.
//!
//! Smooth functions use gradients: directly through the tangent Hessian, or
//! through Monte Carlo directional differences of the gradient.
//! Piecewise-affine functions use finite differences of their affine
//! operators, `(A[x + εu] − A[x]) / ε`, along tangent directions.
//!
//! Per-point work runs in parallel; every aggregate is summed in index order,
//! so reports are bit-for-bit reproducible for a given seed.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSet;
use crate::error::{Error, Result};
use crate::linalg::{self, norm2, Matrix, Rng};
use crate::manifold::{self, Dataset, TangentBasis};
use crate::network::{fmt_f64, Network, PenaltyNorm};

/// Default finite-difference step as a fraction of the median
/// nearest-neighbour distance.
pub const DEFAULT_STEP_FRACTION: f64 = 0.05;

/// Directions closer than this to the tangent space count as tangent.
const TANGENT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub evaluate: bool,
    pub gradient: bool,
    pub affine_operator: bool,
}

/// Anything the estimators can probe.
pub trait FunctionHandle: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn capabilities(&self) -> Capabilities;
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn gradient(&self, _x: &[f64], _out_index: usize) -> Result<Vec<f64>> {
        Err(Error::config("function handle has no gradient capability"))
    }

    /// `(A[x], b[x])`.
    fn affine_operator(&self, _x: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        Err(Error::config("function handle has no affine-operator capability"))
    }

    /// Input Jacobian, `out × D`.
    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        if self.capabilities().affine_operator {
            return Ok(self.affine_operator(x)?.0);
        }
        let rows = (0..self.output_dim())
            .map(|k| self.gradient(x, k))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Point to use instead of `x` when `x` sits on a region boundary, and
    /// whether it moved.
    fn boundary_guard(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        Ok((x.to_vec(), false))
    }
}

impl FunctionHandle for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Network::output_dim(self)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            evaluate: true,
            gradient: true,
            affine_operator: self.is_piecewise(),
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval(x)
    }

    fn gradient(&self, x: &[f64], out_index: usize) -> Result<Vec<f64>> {
        self.gradient_wrt_input(x, out_index)
    }

    fn affine_operator(&self, x: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        let op = Network::affine_operator(self, x)?;
        Ok((op.a, op.b))
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Network::jacobian(self, x)
    }

    fn boundary_guard(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        if self.is_piecewise() {
            Network::boundary_guard(self, x)
        } else {
            Ok((x.to_vec(), false))
        }
    }
}

/// A globally affine map `x ↦ A x + b`.
#[derive(Clone, Debug)]
pub struct AffineHandle {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl FunctionHandle for AffineHandle {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_dim(&self) -> usize {
        self.a.rows()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            evaluate: true,
            gradient: true,
            affine_operator: true,
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::add(&self.a.matvec(x), &self.b))
    }

    fn gradient(&self, _x: &[f64], out_index: usize) -> Result<Vec<f64>> {
        Ok(self.a.row(out_index).to_vec())
    }

    fn affine_operator(&self, _x: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Scalar function given in closed form with its gradient.
pub struct SmoothHandle {
    dim: usize,
    value: Box<ScalarFn>,
    grad: Box<GradientFn>,
}

impl SmoothHandle {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Box::new(value),
            grad: Box::new(grad),
        }
    }

    /// `f(x) = ‖x‖²`.
    pub fn squared_norm(dim: usize) -> Self {
        Self::new(
            dim,
            |x| x.iter().map(|v| v * v).sum(),
            |x| x.iter().map(|v| 2.0 * v).collect(),
        )
    }
}

impl FunctionHandle for SmoothHandle {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            evaluate: true,
            gradient: true,
            affine_operator: false,
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![(self.value)(x)])
    }

    fn gradient(&self, x: &[f64], out_index: usize) -> Result<Vec<f64>> {
        if out_index != 0 {
            return Err(Error::dim("scalar function has a single output"));
        }
        Ok((self.grad)(x))
    }
}

/// `α f` for a wrapped handle.
pub struct Scaled<'a, H: FunctionHandle + ?Sized> {
    pub inner: &'a H,
    pub alpha: f64,
}

impl<H: FunctionHandle + ?Sized> FunctionHandle for Scaled<'_, H> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::scaled(&self.inner.evaluate(x)?, self.alpha))
    }

    fn gradient(&self, x: &[f64], out_index: usize) -> Result<Vec<f64>> {
        Ok(linalg::scaled(&self.inner.gradient(x, out_index)?, self.alpha))
    }

    fn affine_operator(&self, x: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        let (a, b) = self.inner.affine_operator(x)?;
        Ok((a.scaled(self.alpha), linalg::scaled(&b, self.alpha)))
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(self.inner.jacobian(x)?.scaled(self.alpha))
    }

    fn boundary_guard(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        self.inner.boundary_guard(x)
    }
}

/// Where Monte Carlo directions come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSource {
    /// Uniform on the unit sphere of the (given or estimated) tangent space.
    #[default]
    Tangent,
    /// Normalized image translations by up to `max_shift` pixels.
    Translation { max_shift: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RugosityConfig {
    /// Outer exponent, 1 or 2.
    pub p: u32,
    /// Finite-difference step for piecewise-affine functions.
    pub eps: f64,
    /// Finite-difference step for smooth functions.
    pub delta: f64,
    /// Monte Carlo directions per point.
    pub m: usize,
    /// Intrinsic dimension used in the `d^{p/2}` prefactor; `None` takes
    /// the dataset's.
    pub d: Option<usize>,
    pub seed: u64,
    /// Matrix norm applied to operator differences.
    #[serde(default)]
    pub norm: PenaltyNorm,
    /// Restrict to one output; `None` uses the whole output map (smooth
    /// estimators then use output 0).
    #[serde(default)]
    pub out_index: Option<usize>,
    /// Neighbourhood size for local PCA tangents; `None` uses the default.
    #[serde(default)]
    pub neighbours: Option<usize>,
    #[serde(default = "default_true")]
    pub boundary_guard: bool,
    #[serde(default)]
    pub directions: DirectionSource,
}

fn default_true() -> bool {
    true
}

impl Default for RugosityConfig {
    fn default() -> Self {
        Self {
            p: 2,
            eps: 1e-2,
            delta: 1e-4,
            m: 8,
            d: None,
            seed: 0,
            norm: PenaltyNorm::Spectral,
            out_index: None,
            neighbours: None,
            boundary_guard: true,
            directions: DirectionSource::Tangent,
        }
    }
}

impl RugosityConfig {
    /// Defaults with `eps = delta = 0.05 · median nearest-neighbour distance`.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let step = DEFAULT_STEP_FRACTION * ds.median_nn_distance();
        let mut cfg = Self {
            eps: step,
            delta: step,
            ..Self::default()
        };
        if ds.image_shape().is_some() {
            cfg.directions = DirectionSource::Translation { max_shift: 2 };
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::config(format!("p must be 1 or 2, got {}", self.p)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        if self.d == Some(0) {
            return Err(Error::config("d must be at least 1"));
        }
        Ok(())
    }

    fn scaling_dim(&self, ds: &Dataset) -> Result<usize> {
        let d = self.d.unwrap_or(ds.intrinsic_dim());
        if d > ds.dim() {
            return Err(Error::config(format!(
                "intrinsic dimension {d} exceeds ambient dimension {}",
                ds.dim()
            )));
        }
        Ok(d)
    }

    fn neighbourhood(&self, ds: &Dataset) -> usize {
        self.neighbours
            .unwrap_or_else(|| manifold::default_neighbourhood(ds.intrinsic_dim()))
    }
}

/// Output of one estimator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RugosityReport {
    pub estimator: String,
    pub value: f64,
    /// Inner per-point terms, in dataset order.
    pub per_point: Vec<f64>,
    pub p: u32,
    /// Step used (`eps` or `delta`); zero when no step applies.
    pub step: f64,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub boundary_warnings: usize,
    /// Prefactor applied to the per-point sum before the outer root.
    pub scale: f64,
}

impl RugosityReport {
    /// Recomputes `value` from `per_point`: `(scale · Σ per_point)^{1/p}`,
    /// summed in index order.
    pub fn aggregate(&self) -> f64 {
        let sum: f64 = self.per_point.iter().sum();
        let inner = self.scale * sum;
        match self.p {
            1 => inner,
            2 => inner.sqrt(),
            p => inner.powf(1.0 / f64::from(p)),
        }
    }

    /// `value²`, the squared rugosity usually tabulated for `p = 2`.
    pub fn squared(&self) -> f64 {
        self.value * self.value
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "estimator = {}", self.estimator);
        let _ = writeln!(out, "value = {}", fmt_f64(self.value));
        let _ = writeln!(out, "p = {}", self.p);
        let _ = writeln!(out, "step = {}", fmt_f64(self.step));
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "d = {}", self.d);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "boundary_warnings = {}", self.boundary_warnings);
        let _ = writeln!(out, "n = {}", self.per_point.len());
        out
    }

    pub const CSV_HEADER: &'static str = "estimator,p,eps,m,d,value,boundary_warnings,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.estimator,
            self.p,
            fmt_f64(self.step),
            self.m,
            self.d,
            fmt_f64(self.value),
            self.boundary_warnings,
            self.seed
        )
    }

    /// Same report under another estimator name.
    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.estimator = name.into();
        self
    }
}

fn outer_root(inner: f64, p: u32) -> f64 {
    match p {
        1 => inner,
        2 => inner.sqrt(),
        p => inner.powf(1.0 / f64::from(p)),
    }
}

/// `x^{p/2}` for `p ∈ {1, 2}`.
fn half_power(x: f64, p: u32) -> f64 {
    match p {
        2 => x,
        1 => x.sqrt(),
        p => x.powf(f64::from(p) / 2.0),
    }
}

fn matrix_norm(m: &Matrix, norm: PenaltyNorm) -> Result<f64> {
    match norm {
        PenaltyNorm::Spectral => linalg::spectral_norm_default(m),
        PenaltyNorm::Frobenius => linalg::frobenius_norm(m),
    }
}

fn require(fh: &(impl FunctionHandle + ?Sized), affine: bool) -> Result<()> {
    let caps = fh.capabilities();
    if affine && !caps.affine_operator {
        return Err(Error::config(
            "piecewise estimator needs the affine-operator capability",
        ));
    }
    if !affine && !caps.gradient {
        return Err(Error::config("smooth estimator needs the gradient capability"));
    }
    Ok(())
}

fn check_dataset(fh: &(impl FunctionHandle + ?Sized), ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    if ds.dim() != fh.input_dim() {
        return Err(Error::dim(format!(
            "dataset has D = {} but the function takes {}",
            ds.dim(),
            fh.input_dim()
        )));
    }
    Ok(())
}

/// Tangent Hessian (`d × d`) of output `out_index` at `x` from forward
/// differences of the gradient along the basis columns, symmetrized.
pub fn tangent_hessian_smooth(
    fh: &(impl FunctionHandle + ?Sized),
    x: &[f64],
    basis: &TangentBasis,
    delta: f64,
    out_index: usize,
) -> Result<Matrix> {
    require(fh, false)?;
    if !(delta > 0.0) {
        return Err(Error::arg(format!("delta must be positive, got {delta}")));
    }
    let d = basis.dim();
    let g0 = fh.gradient(x, out_index)?;
    let mut h = Matrix::zeros(d, d);
    for j in 0..d {
        let dir = basis.basis.column(j);
        let shifted: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + delta * b).collect();
        let g1 = fh.gradient(&shifted, out_index)?;
        let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| (a - b) / delta).collect();
        let col = basis.basis.t_matvec(&diff);
        for (i, v) in col.iter().enumerate() {
            h.set(i, j, *v);
        }
    }
    let mut sym = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sym.set(i, j, 0.5 * (h.get(i, j) + h.get(j, i)));
        }
    }
    Ok(sym)
}

/// Training-data Monte Carlo estimate `((1/n) Σ ‖∇²_tan f(x_i)‖_F^p)^{1/p}`.
pub fn rugosity_smooth_direct(
    fh: &(impl FunctionHandle + ?Sized),
    ds: &Dataset,
    cfg: &RugosityConfig,
) -> Result<RugosityReport> {
    cfg.validate()?;
    require(fh, false)?;
    check_dataset(fh, ds)?;
    let d = cfg.scaling_dim(ds)?;
    let k = cfg.neighbourhood(ds);
    let out = cfg.out_index.unwrap_or(0);
    let per_point = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let basis = ds.tangent_basis(i, k)?;
            let h = tangent_hessian_smooth(fh, ds.point(i), &basis, cfg.delta, out)?;
            let f = linalg::frobenius_norm(&h)?;
            Ok(f.powi(cfg.p as i32))
        })
        .collect::<Result<Vec<f64>>>()?;
    let scale = 1.0 / ds.len() as f64;
    let value = outer_root(scale * per_point.iter().sum::<f64>(), cfg.p);
    Ok(RugosityReport {
        estimator: "c_tilde_smooth_direct".into(),
        value,
        per_point,
        p: cfg.p,
        step: cfg.delta,
        m: 0,
        d,
        seed: cfg.seed,
        boundary_warnings: 0,
        scale,
    })
}

/// `m` unit directions at point `i`, from the configured source.
fn directions_at(
    ds: &Dataset,
    i: usize,
    cfg: &RugosityConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng::derive(cfg.seed, i as u64);
    match &cfg.directions {
        DirectionSource::Tangent => {
            let basis = ds.tangent_basis(i, cfg.neighbourhood(ds))?;
            (0..cfg.m)
                .map(|_| manifold::sample_tangent_direction(&basis, &mut rng))
                .collect()
        }
        DirectionSource::Translation { max_shift } => {
            let pool: Vec<Vec<f64>> = crate::augment::translation_displacements(ds, i, *max_shift)?
                .into_iter()
                .filter_map(|u| {
                    let n = norm2(&u);
                    (n > 0.0).then(|| u.iter().map(|v| v / n).collect())
                })
                .collect();
            if pool.is_empty() {
                return Err(Error::config(format!(
                    "point {i} has no nonzero translation displacement"
                )));
            }
            Ok((0..cfg.m).map(|_| pool[rng.below(pool.len())].clone()).collect())
        }
    }
}

/// Gradient-difference Monte Carlo estimate with prefactor
/// `d^{p/2} / (n δ^p m^{p/2})`.
pub fn rugosity_smooth_mc(
    fh: &(impl FunctionHandle + ?Sized),
    ds: &Dataset,
    cfg: &RugosityConfig,
) -> Result<RugosityReport> {
    cfg.validate()?;
    require(fh, false)?;
    check_dataset(fh, ds)?;
    let d = cfg.scaling_dim(ds)?;
    let out = cfg.out_index.unwrap_or(0);
    let per_point = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            let g0 = fh.gradient(x, out)?;
            let mut sum = 0.0;
            for u in directions_at(ds, i, cfg)? {
                let shifted: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + cfg.delta * b).collect();
                let g1 = fh.gradient(&shifted, out)?;
                let diff = linalg::sub(&g1, &g0);
                sum += linalg::dot(&diff, &diff);
            }
            Ok(half_power(sum, cfg.p))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (p, n, m) = (f64::from(cfg.p), ds.len() as f64, cfg.m as f64);
    let scale = (d as f64).powf(p / 2.0) / (n * cfg.delta.powf(p) * m.powf(p / 2.0));
    let value = outer_root(scale * per_point.iter().sum::<f64>(), cfg.p);
    Ok(RugosityReport {
        estimator: "c_tilde_smooth_mc".into(),
        value,
        per_point,
        p: cfg.p,
        step: cfg.delta,
        m: cfg.m,
        d,
        seed: cfg.seed,
        boundary_warnings: 0,
        scale,
    })
}

/// Selected output rows of an affine operator.
fn select_rows(a: Matrix, out_index: Option<usize>) -> Result<Matrix> {
    match out_index {
        None => Ok(a),
        Some(k) if k < a.rows() => Matrix::from_vec(1, a.cols(), a.row(k).to_vec()),
        Some(k) => Err(Error::dim(format!("output index {k} for {} outputs", a.rows()))),
    }
}

/// `(A[x + εu] − A[x]) / ε`, or zero when `tangent` is given and `u` leaves
/// it. Also reports whether the boundary guard moved `x`.
pub fn piecewise_hessian_direction(
    fh: &(impl FunctionHandle + ?Sized),
    x: &[f64],
    u: &[f64],
    eps: f64,
    tangent: Option<&TangentBasis>,
) -> Result<(Matrix, bool)> {
    require(fh, true)?;
    if !(eps > 0.0) {
        return Err(Error::arg(format!("eps must be positive, got {eps}")));
    }
    if let Some(t) = tangent {
        let back = t.basis.matvec(&t.basis.t_matvec(u));
        if norm2(&linalg::sub(u, &back)) > TANGENT_TOL {
            return Ok((Matrix::zeros(fh.output_dim(), fh.input_dim()), false));
        }
    }
    let (x, guarded) = fh.boundary_guard(x)?;
    let (a0, _) = fh.affine_operator(&x)?;
    let shifted: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + eps * b).collect();
    let (a1, _) = fh.affine_operator(&shifted)?;
    let mut h = a1.sub(&a0)?;
    h.scale(1.0 / eps);
    Ok((h, guarded))
}

/// Finite-difference rugosity of a piecewise-affine function with prefactor
/// `d^{p/2} / (n ε^p m^{p/2})` and inner sums `Σ_j ‖A[x_i + εu_j] − A[x_i]‖²`.
pub fn rugosity_piecewise(
    fh: &(impl FunctionHandle + ?Sized),
    ds: &Dataset,
    cfg: &RugosityConfig,
) -> Result<RugosityReport> {
    cfg.validate()?;
    require(fh, true)?;
    check_dataset(fh, ds)?;
    let d = cfg.scaling_dim(ds)?;
    let terms = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let (x, guarded) = if cfg.boundary_guard {
                fh.boundary_guard(ds.point(i))?
            } else {
                (ds.point(i).to_vec(), false)
            };
            let a0 = select_rows(fh.affine_operator(&x)?.0, cfg.out_index)?;
            let mut sum = 0.0;
            for u in directions_at(ds, i, cfg)? {
                let shifted: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + cfg.eps * b).collect();
                let a1 = select_rows(fh.affine_operator(&shifted)?.0, cfg.out_index)?;
                let diff = matrix_norm(&a1.sub(&a0)?, cfg.norm)?;
                sum += diff * diff;
            }
            Ok((half_power(sum, cfg.p), guarded))
        })
        .collect::<Result<Vec<(f64, bool)>>>()?;
    let per_point: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let boundary_warnings = terms.iter().filter(|t| t.1).count();
    let (p, n, m) = (f64::from(cfg.p), ds.len() as f64, cfg.m as f64);
    let scale = (d as f64).powf(p / 2.0) / (n * cfg.eps.powf(p) * m.powf(p / 2.0));
    let value = outer_root(scale * per_point.iter().sum::<f64>(), cfg.p);
    Ok(RugosityReport {
        estimator: "c_tilde_piecewise".into(),
        value,
        per_point,
        p: cfg.p,
        step: cfg.eps,
        m: cfg.m,
        d,
        seed: cfg.seed,
        boundary_warnings,
        scale,
    })
}

/// Unnormalized double sum `Σ_i Σ_j ‖A[x_i + u_ij] − A[x_i]‖₂`.
pub fn c_hat(
    fh: &(impl FunctionHandle + ?Sized),
    ds: &Dataset,
    aug: &AugmentationSet,
) -> Result<RugosityReport> {
    c_hat_with_norm(fh, ds, aug, PenaltyNorm::Spectral)
}

pub fn c_hat_with_norm(
    fh: &(impl FunctionHandle + ?Sized),
    ds: &Dataset,
    aug: &AugmentationSet,
    norm: PenaltyNorm,
) -> Result<RugosityReport> {
    require(fh, true)?;
    check_dataset(fh, ds)?;
    if aug.len() != ds.len() {
        return Err(Error::dim(format!(
            "augmentation covers {} points, dataset has {}",
            aug.len(),
            ds.len()
        )));
    }
    let terms = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            let warned = fh.boundary_guard(x)?.1;
            let a0 = fh.affine_operator(x)?.0;
            let mut sum = 0.0;
            for u in aug.displacements(i) {
                let shifted = linalg::add(x, u);
                let a1 = fh.affine_operator(&shifted)?.0;
                sum += matrix_norm(&a1.sub(&a0)?, norm)?;
            }
            Ok((sum, warned))
        })
        .collect::<Result<Vec<(f64, bool)>>>()?;
    let per_point: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let value = per_point.iter().sum();
    Ok(RugosityReport {
        estimator: "c_hat".into(),
        value,
        per_point,
        p: 1,
        step: aug.eps_bound(),
        m: aug.m(),
        d: ds.intrinsic_dim(),
        seed: 0,
        boundary_warnings: terms.iter().filter(|t| t.1).count(),
        scale: 1.0,
    })
}

/// Mean Frobenius norm of the input Jacobian, `(1/n) Σ ‖A[x_i]‖_F`.
pub fn jacobian_norm(fh: &(impl FunctionHandle + ?Sized), ds: &Dataset) -> Result<RugosityReport> {
    check_dataset(fh, ds)?;
    let per_point = (0..ds.len())
        .into_par_iter()
        .map(|i| linalg::frobenius_norm(&fh.jacobian(ds.point(i))?))
        .collect::<Result<Vec<f64>>>()?;
    let scale = 1.0 / ds.len() as f64;
    let value = scale * per_point.iter().sum::<f64>();
    Ok(RugosityReport {
        estimator: "jacobian_norm".into(),
        value,
        per_point,
        p: 1,
        step: 0.0,
        m: 0,
        d: ds.intrinsic_dim(),
        seed: 0,
        boundary_warnings: 0,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationKind, Layer};

    fn relu_1d() -> Network {
        Network::new(vec![
            Layer::new(Matrix::identity(1), vec![0.0], ActivationKind::Relu).unwrap(),
            Layer::new(Matrix::identity(1), vec![0.0], ActivationKind::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn line_dataset(points: &[f64]) -> Dataset {
        let pts = points.iter().map(|v| vec![*v]).collect();
        Dataset::new(pts, vec![0.0; points.len()], 1)
            .unwrap()
            .with_tangent_bases(vec![Matrix::identity(1); points.len()])
            .unwrap()
    }

    #[test]
    fn hessian_of_affine_is_zero() {
        let f = AffineHandle {
            a: Matrix::from_rows(&[vec![1.5, -2.0, 0.5]]).unwrap(),
            b: vec![3.0],
        };
        let basis = TangentBasis {
            basis: Matrix::identity(3),
            anchor_index: 0,
            degenerate: false,
        };
        let h = tangent_hessian_smooth(&f, &[0.1, 0.2, 0.3], &basis, 1e-4, 0).unwrap();
        assert!(h.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn hessian_of_squared_norm() {
        let f = SmoothHandle::squared_norm(3);
        let basis = TangentBasis {
            basis: Matrix::identity(3),
            anchor_index: 0,
            degenerate: false,
        };
        let h = tangent_hessian_smooth(&f, &[0.3, -1.0, 2.0], &basis, 1e-4, 0).unwrap();
        assert!(h.max_abs_diff(&Matrix::identity(3).scaled(2.0)) < 1e-6);
    }

    #[test]
    fn hessian_of_sin_product() {
        let f = SmoothHandle::new(
            2,
            |x| x[0].sin() * x[1],
            |x| vec![x[0].cos() * x[1], x[0].sin()],
        );
        let basis = TangentBasis {
            basis: Matrix::identity(2),
            anchor_index: 0,
            degenerate: false,
        };
        let h = tangent_hessian_smooth(&f, &[0.0, 1.0], &basis, 1e-6, 0).unwrap();
        let expected = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(h.max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn kink_direction() {
        let f = relu_1d();
        let eps = 0.1;
        let (h, guarded) =
            piecewise_hessian_direction(&f, &[-eps / 2.0], &[1.0], eps, None).unwrap();
        assert!(!guarded);
        assert!((h.get(0, 0) - 1.0 / eps).abs() < 1e-12);

        let (h, _) = piecewise_hessian_direction(&f, &[0.5], &[1.0], eps, None).unwrap();
        assert_eq!(h.get(0, 0), 0.0);
        assert!(piecewise_hessian_direction(&f, &[0.5], &[1.0], 0.0, None).is_err());
    }

    #[test]
    fn off_tangent_direction_is_zero() {
        let mut rng = Rng::new(1);
        let net = Network::init(&[2, 8, 1], ActivationKind::Relu, &mut rng).unwrap();
        let tangent = TangentBasis {
            basis: Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            anchor_index: 0,
            degenerate: false,
        };
        let (h, _) =
            piecewise_hessian_direction(&net, &[0.1, 0.1], &[0.0, 1.0], 5.0, Some(&tangent))
                .unwrap();
        assert!(h.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn c_hat_kink_example() {
        let f = relu_1d();
        let eps = 0.2;
        let ds = line_dataset(&[-eps / 2.0]);
        let aug = AugmentationSet::from_displacements(
            crate::augment::AugmentKind::TangentJitter,
            vec![vec![vec![eps]]],
        )
        .unwrap();
        let r = c_hat(&f, &ds, &aug).unwrap();
        assert_eq!(r.value, 1.0);

        let zeros = AugmentationSet::zeros(1, 3, 1);
        assert_eq!(c_hat(&f, &ds, &zeros).unwrap().value, 0.0);
    }

    #[test]
    fn single_point_prefactor_check() {
        // n = 1, m = 1, p = 1: value = √d/ε · ‖ΔA‖
        let f = relu_1d();
        let eps = 0.3;
        let ds = line_dataset(&[-0.1]);
        let cfg = RugosityConfig {
            p: 1,
            eps,
            m: 1,
            seed: 4,
            ..RugosityConfig::default()
        };
        let r = rugosity_piecewise(&f, &ds, &cfg).unwrap();
        let u = directions_at(&ds, 0, &cfg).unwrap()[0][0];
        let (a1, _) = FunctionHandle::affine_operator(&f, &[-0.1 + eps * u]).unwrap();
        let expected = 1f64.sqrt() / eps * a1.get(0, 0).abs();
        assert!((r.value - expected).abs() < 1e-12);
        assert!((r.aggregate() - r.value).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = RugosityConfig {
            p: 3,
            ..RugosityConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RugosityConfig {
            m: 0,
            ..RugosityConfig::default()
        };
        assert!(bad.validate().is_err());
        let too_big = RugosityConfig {
            d: Some(5),
            ..RugosityConfig::default()
        };
        let ds = line_dataset(&[0.0, 1.0]);
        assert!(matches!(
            rugosity_smooth_direct(&SmoothHandle::squared_norm(1), &ds, &too_big),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn smooth_estimators_reject_missing_capabilities() {
        let ds = line_dataset(&[0.0, 1.0]);
        let cfg = RugosityConfig::default();
        let smooth = SmoothHandle::squared_norm(1);
        assert!(matches!(
            rugosity_piecewise(&smooth, &ds, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_serialization() {
        let f = relu_1d();
        let ds = line_dataset(&[-0.05, 0.3]);
        let r = rugosity_piecewise(&f, &ds, &RugosityConfig::default()).unwrap();
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), RugosityReport::CSV_HEADER.split(',').count());
        assert!(r.to_key_value().contains("boundary_warnings = 0"));
    }
}

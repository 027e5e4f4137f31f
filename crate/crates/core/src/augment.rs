//! Augmentation sets, losses, and numerical checks of the augmented-loss
//! upper bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, Rng};
use crate::manifold::{self, Dataset};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    TangentJitter,
    Translation,
    Flip,
}

/// Displacements `u_ij`, `m` per point. The identity copy `u_i0 = 0` is
/// implicit and not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSet {
    kind: AugmentKind,
    displacements: Vec<Vec<Vec<f64>>>,
    eps_bound: f64,
    non_continuous: bool,
}

impl AugmentationSet {
    pub fn from_displacements(kind: AugmentKind, displacements: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let eps_bound = max_norm(&displacements);
        Self::with_bound(kind, displacements, eps_bound)
    }

    fn with_bound(kind: AugmentKind, displacements: Vec<Vec<Vec<f64>>>, eps_bound: f64) -> Result<Self> {
        let m = displacements.first().map_or(0, Vec::len);
        let dim = displacements
            .iter()
            .flatten()
            .next()
            .map(Vec::len);
        for (i, us) in displacements.iter().enumerate() {
            if us.len() != m {
                return Err(Error::dim(format!(
                    "point {i} has {} displacements, expected {m}",
                    us.len()
                )));
            }
            for u in us {
                if Some(u.len()) != dim {
                    return Err(Error::dim(format!("point {i} has a displacement of wrong length")));
                }
                if !u.iter().all(|v| v.is_finite()) {
                    return Err(Error::arg(format!("point {i} has a non-finite displacement")));
                }
            }
        }
        debug_assert!(max_norm(&displacements) <= eps_bound);
        Ok(Self {
            kind,
            displacements,
            eps_bound,
            non_continuous: kind == AugmentKind::Flip,
        })
    }

    /// `m` zero displacements for each of `n` points.
    pub fn zeros(n: usize, m: usize, dim: usize) -> Self {
        Self {
            kind: AugmentKind::TangentJitter,
            displacements: vec![vec![vec![0.0; dim]; m]; n],
            eps_bound: 0.0,
            non_continuous: false,
        }
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    /// Number of points covered.
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    /// Augmented copies per point.
    pub fn m(&self) -> usize {
        self.displacements.first().map_or(0, Vec::len)
    }

    pub fn displacements(&self, i: usize) -> &[Vec<f64>] {
        &self.displacements[i]
    }

    /// Upper bound `ε` on every `‖u_ij‖₂`.
    pub fn eps_bound(&self) -> f64 {
        self.eps_bound
    }

    pub fn is_continuous(&self) -> bool {
        !self.non_continuous
    }

    /// Rows restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            kind: self.kind,
            displacements: indices.iter().map(|&i| self.displacements[i].clone()).collect(),
            eps_bound: self.eps_bound,
            non_continuous: self.non_continuous,
        }
    }

    fn require_continuous(&self) -> Result<()> {
        if self.non_continuous {
            return Err(Error::NonContinuous(format!("{:?} augmentation", self.kind)));
        }
        Ok(())
    }
}

fn max_norm(displacements: &[Vec<Vec<f64>>]) -> f64 {
    displacements
        .iter()
        .flatten()
        .map(|u| norm2(u))
        .fold(0.0, f64::max)
}

/// Tangent-space jitter: `u_ij = r · B_i s` with `s` uniform on the unit
/// sphere of the tangent space and `r` uniform on `(0, ε]`.
pub fn make_tangent_jitter(ds: &Dataset, m: usize, eps: f64, rng: &mut Rng) -> Result<AugmentationSet> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::arg(format!("eps must be non-negative, got {eps}")));
    }
    let k = manifold::default_neighbourhood(ds.intrinsic_dim());
    let bases = (0..ds.len())
        .into_par_iter()
        .map(|i| ds.tangent_basis(i, k))
        .collect::<Result<Vec<_>>>()?;
    let mut displacements = Vec::with_capacity(ds.len());
    for basis in &bases {
        let mut us = Vec::with_capacity(m);
        for _ in 0..m {
            let s = linalg::sample_unit_sphere(basis.dim(), rng)?;
            let r = eps * (1.0 - rng.uniform());
            us.push(linalg::scaled(&basis.basis.matvec(&s), r));
        }
        displacements.push(us);
    }
    // nominal ε, raised by any rounding excess of ‖B s‖ over 1
    let bound = eps.max(max_norm(&displacements));
    AugmentationSet::with_bound(AugmentKind::TangentJitter, displacements, bound)
}

/// `translate_image(x_i, dx, dy) − x_i` for every shift `(dx, dy) ≠ (0, 0)`
/// with `|dx|, |dy| ≤ max_shift`; `dy` is the outer loop.
pub fn translation_displacements(ds: &Dataset, i: usize, max_shift: usize) -> Result<Vec<Vec<f64>>> {
    let shape = ds
        .image_shape()
        .ok_or_else(|| Error::config("translation needs image shape metadata"))?;
    let s = max_shift as i64;
    let x = ds.point(i);
    let mut out = Vec::with_capacity((2 * max_shift + 1).pow(2) - 1);
    for dy in -s..=s {
        for dx in -s..=s {
            if dx == 0 && dy == 0 {
                continue;
            }
            let shifted = manifold::translate_image(x, shape.width, shape.height, dx, dy)?;
            out.push(linalg::sub(&shifted, x));
        }
    }
    Ok(out)
}

/// All integer translations up to `max_shift` pixels, `(2s + 1)² − 1` per point.
pub fn make_translations(ds: &Dataset, max_shift: usize) -> Result<AugmentationSet> {
    if ds.image_shape().is_none() {
        return Err(Error::config("translation needs image shape metadata"));
    }
    if max_shift == 0 {
        return Err(Error::arg("max_shift must be at least 1"));
    }
    let displacements = (0..ds.len())
        .into_par_iter()
        .map(|i| translation_displacements(ds, i, max_shift))
        .collect::<Result<Vec<_>>>()?;
    AugmentationSet::from_displacements(AugmentKind::Translation, displacements)
}

/// One horizontally mirrored copy per point. Not continuous, so the bound
/// checks reject it.
pub fn make_flips(ds: &Dataset) -> Result<AugmentationSet> {
    let shape = ds
        .image_shape()
        .ok_or_else(|| Error::config("flip needs image shape metadata"))?;
    let displacements = (0..ds.len())
        .map(|i| {
            let x = ds.point(i);
            let f = manifold::flip_horizontal(x, shape.width, shape.height)?;
            Ok(vec![linalg::sub(&f, x)])
        })
        .collect::<Result<Vec<_>>>()?;
    AugmentationSet::from_displacements(AugmentKind::Flip, displacements)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖f − t‖²` with `t` the scalar target, or one-hot for several outputs.
    SquaredError,
    /// `−log softmax(f)_y`.
    SoftmaxCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Lipschitz constant of the loss in its first argument.
    #[serde(default)]
    pub k2: Option<f64>,
}

impl LossSpec {
    pub fn squared_error() -> Self {
        Self {
            kind: LossKind::SquaredError,
            k2: None,
        }
    }

    pub fn softmax_cross_entropy() -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy,
            k2: None,
        }
    }

    pub fn with_k2(mut self, k2: f64) -> Self {
        self.k2 = Some(k2);
        self
    }

    pub fn is_classification(&self, out_dim: usize) -> bool {
        self.kind == LossKind::SoftmaxCrossEntropy || out_dim > 1
    }

    /// Loss value and its gradient with respect to the network output.
    pub fn value_and_grad(&self, out: &[f64], label: f64) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            LossKind::SquaredError => {
                let t = target(out.len(), label)?;
                let r = linalg::sub(out, &t);
                Ok((dot(&r, &r), linalg::scaled(&r, 2.0)))
            }
            LossKind::SoftmaxCrossEntropy => {
                let y = class_index(out.len(), label)?;
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let value = z.ln() + max - out[y];
                let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
                grad[y] -= 1.0;
                Ok((value, grad))
            }
        }
    }

    pub fn value(&self, out: &[f64], label: f64) -> Result<f64> {
        Ok(self.value_and_grad(out, label)?.0)
    }
}

fn class_index(out_dim: usize, label: f64) -> Result<usize> {
    if label < 0.0 || label.fract() != 0.0 || label as usize >= out_dim {
        return Err(Error::arg(format!("label {label} is not a class index below {out_dim}")));
    }
    Ok(label as usize)
}

/// Regression target for one output, one-hot class target otherwise.
fn target(out_dim: usize, label: f64) -> Result<Vec<f64>> {
    if out_dim == 1 {
        return Ok(vec![label]);
    }
    let mut t = vec![0.0; out_dim];
    t[class_index(out_dim, label)?] = 1.0;
    Ok(t)
}

/// Plain summed loss `L = Σ_i ℓ(f(x_i), y_i)`.
pub fn total_loss(net: &Network, ds: &Dataset, loss: &LossSpec) -> Result<f64> {
    let per = (0..ds.len())
        .into_par_iter()
        .map(|i| loss.value(&net.eval(ds.point(i))?, ds.label(i)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum())
}

/// `L^aug = (1/(m+1)) Σ_i [ℓ(f(x_i), y_i) + Σ_j ℓ(f(x_i + u_ij), y_i)]`.
pub fn augmented_loss(net: &Network, ds: &Dataset, aug: &AugmentationSet, loss: &LossSpec) -> Result<f64> {
    check_aug(ds, aug)?;
    let per = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            let y = ds.label(i);
            let mut s = loss.value(&net.eval(x)?, y)?;
            for u in aug.displacements(i) {
                s += loss.value(&net.eval(&linalg::add(x, u))?, y)?;
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / (aug.m() + 1) as f64)
}

fn check_aug(ds: &Dataset, aug: &AugmentationSet) -> Result<()> {
    if aug.len() != ds.len() {
        return Err(Error::dim(format!(
            "augmentation covers {} points, dataset has {}",
            aug.len(),
            ds.len()
        )));
    }
    if let Some(u) = aug.displacements.iter().flatten().next() {
        if u.len() != ds.dim() {
            return Err(Error::dim("displacement length differs from the data dimension"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct K1Estimate {
    /// Max `‖A[x]‖₂` over original and augmented points. A lower bound on
    /// the global Lipschitz constant.
    pub empirical: f64,
    /// `∏_l ‖W_l‖₂`, a certified upper bound.
    pub certified: f64,
}

pub fn estimate_k1(net: &Network, ds: &Dataset, aug: &AugmentationSet) -> Result<K1Estimate> {
    check_aug(ds, aug)?;
    let per = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            let mut best = linalg::spectral_norm_default(&net.affine_operator(x)?.a)?;
            for u in aug.displacements(i) {
                let a = net.affine_operator(&linalg::add(x, u))?.a;
                best = best.max(linalg::spectral_norm_default(&a)?);
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(K1Estimate {
        empirical: per.iter().copied().fold(0.0, f64::max),
        certified: net.lipschitz_product_bound()?,
    })
}

/// Largest per-sample loss-gradient norm on `ds`.
pub fn max_loss_gradient_norm(net: &Network, ds: &Dataset, loss: &LossSpec) -> Result<f64> {
    let per = (0..ds.len())
        .into_par_iter()
        .map(|i| Ok(norm2(&loss.value_and_grad(&net.eval(ds.point(i))?, ds.label(i))?.1)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().copied().fold(0.0, f64::max))
}

/// `K₂`: the configured value (checked against every observed gradient),
/// `√2` for softmax cross-entropy, or the observed maximum for squared error.
pub fn resolve_k2(net: &Network, ds: &Dataset, loss: &LossSpec) -> Result<f64> {
    let observed = max_loss_gradient_norm(net, ds, loss)?;
    match (loss.k2, loss.kind) {
        (Some(k2), _) => {
            if observed > k2 {
                return Err(Error::config(format!(
                    "K2 = {k2} is below an observed loss-gradient norm {observed}"
                )));
            }
            Ok(k2)
        }
        (None, LossKind::SoftmaxCrossEntropy) => Ok(std::f64::consts::SQRT_2),
        (None, LossKind::SquaredError) => Ok(observed),
    }
}

/// Per-pair check of `ℓ̃_ij ≤ ℓ_i + R K₂ ‖ΔA‖₂ + K₂ |Δb| + ε K₁ K₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderCheck {
    /// `rhs_ij − ℓ̃_ij`, point-major.
    pub residuals: Vec<f64>,
    /// `ℓ̃_ij − ℓ_i = [ΔA x_i + Δb + A[x_i + u_ij] u_ij]ᵀ ∇ℓ`, point-major.
    pub increments: Vec<f64>,
    pub min_residual: f64,
    pub k1: f64,
    pub k2: f64,
    pub r: f64,
    pub eps: f64,
}

impl FirstOrderCheck {
    pub fn holds(&self) -> bool {
        self.min_residual >= -1e-9
    }
}

/// Everything computed per point in one pass.
struct PointTerms {
    loss: f64,
    aug_loss: f64,
    increments: Vec<f64>,
    delta_a: Vec<f64>,
    delta_b: Vec<f64>,
    k1: f64,
}

fn point_terms(net: &Network, ds: &Dataset, aug: &AugmentationSet, loss: &LossSpec) -> Result<Vec<PointTerms>> {
    check_aug(ds, aug)?;
    aug.require_continuous()?;
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            let y = ds.label(i);
            let op0 = net.affine_operator(x)?;
            let f0 = linalg::add(&op0.a.matvec(x), &op0.b);
            let (l0, grad) = loss.value_and_grad(&f0, y)?;
            let mut k1 = linalg::spectral_norm_default(&op0.a)?;
            let mut t = PointTerms {
                loss: l0,
                aug_loss: l0,
                increments: Vec::with_capacity(aug.m()),
                delta_a: Vec::with_capacity(aug.m()),
                delta_b: Vec::with_capacity(aug.m()),
                k1: 0.0,
            };
            for u in aug.displacements(i) {
                let xu = linalg::add(x, u);
                let op1 = net.affine_operator(&xu)?;
                let da = op1.a.sub(&op0.a)?;
                let db = linalg::sub(&op1.b, &op0.b);
                t.delta_a.push(linalg::spectral_norm_default(&da)?);
                t.delta_b.push(db.iter().map(|v| v.abs()).sum());
                k1 = k1.max(linalg::spectral_norm_default(&op1.a)?);
                // ΔA x + Δb + A[x + u] u
                let mut v = da.matvec(x);
                linalg::axpy(1.0, &db, &mut v);
                linalg::axpy(1.0, &op1.a.matvec(u), &mut v);
                t.increments.push(dot(&v, &grad));
                t.aug_loss += loss.value(&linalg::add(&op1.a.matvec(&xu), &op1.b), y)?;
            }
            t.k1 = k1;
            Ok(t)
        })
        .collect()
}

fn check_from_terms(terms: &[PointTerms], k1: f64, k2: f64, r: f64, eps: f64) -> FirstOrderCheck {
    let mut residuals = Vec::new();
    let mut increments = Vec::new();
    for t in terms {
        for ((inc, da), db) in t.increments.iter().zip(&t.delta_a).zip(&t.delta_b) {
            let allowance = r * k2 * da + k2 * db + eps * k1 * k2;
            residuals.push(allowance - inc);
            increments.push(*inc);
        }
    }
    let min_residual = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    FirstOrderCheck {
        residuals,
        increments,
        min_residual,
        k1,
        k2,
        r,
        eps,
    }
}

/// Per-pair residuals of the first-order inequality, using the empirical
/// `K₁` over original and augmented points.
pub fn verify_firstorder_bound(
    net: &Network,
    ds: &Dataset,
    aug: &AugmentationSet,
    loss: &LossSpec,
) -> Result<FirstOrderCheck> {
    let terms = point_terms(net, ds, aug, loss)?;
    let k1 = terms.iter().map(|t| t.k1).fold(0.0, f64::max);
    let k2 = resolve_k2(net, ds, loss)?;
    Ok(check_from_terms(&terms, k1, k2, ds.radius(), aug.eps_bound()))
}

/// Every term of the augmented-loss upper bound, evaluated explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_aug")]
    pub l_aug: f64,
    /// First-order approximation of `L_aug`, the quantity the bound controls.
    #[serde(rename = "L_tilde_aug")]
    pub l_tilde_aug: f64,
    #[serde(rename = "term_A")]
    pub term_a: f64,
    pub term_b: f64,
    pub term_eps: f64,
    pub rhs: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K1_certified")]
    pub k1_certified: f64,
    pub term_eps_certified: f64,
    pub rhs_certified: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub eps: f64,
    pub m: usize,
    pub n: usize,
    /// `Σ_i Σ_j ‖ΔA_ij‖₂`.
    pub c_hat: f64,
    pub residual_min: f64,
    pub residual_mean: f64,
    pub residual_count: usize,
    pub first_order_holds: bool,
    /// `L_aug ≤ rhs`; informational, since the remainder is not bounded.
    pub full_bound_holds: bool,
}

impl BoundReport {
    /// `rhs − (L + term_A + term_b + term_eps)` recomputed in the same
    /// order; zero by construction.
    pub fn identity_residual(&self) -> f64 {
        self.rhs - (((self.l + self.term_a) + self.term_b) + self.term_eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn theorem1_bound(net: &Network, ds: &Dataset, aug: &AugmentationSet, loss: &LossSpec) -> Result<BoundReport> {
    let terms = point_terms(net, ds, aug, loss)?;
    let k1 = terms.iter().map(|t| t.k1).fold(0.0, f64::max);
    let k1_certified = net.lipschitz_product_bound()?;
    let k2 = resolve_k2(net, ds, loss)?;
    let r = ds.radius();
    let eps = aug.eps_bound();
    let m = aug.m();
    let n = ds.len();
    let denom = (m + 1) as f64;

    let l: f64 = terms.iter().map(|t| t.loss).sum();
    let l_aug = terms.iter().map(|t| t.aug_loss).sum::<f64>() / denom;
    let l_tilde_aug = terms
        .iter()
        .map(|t| t.loss * denom + t.increments.iter().sum::<f64>())
        .sum::<f64>()
        / denom;
    let c_hat: f64 = terms.iter().map(|t| t.delta_a.iter().sum::<f64>()).sum();
    let db_sum: f64 = terms.iter().map(|t| t.delta_b.iter().sum::<f64>()).sum();

    let term_a = r * k2 / denom * c_hat;
    let term_b = k2 / denom * db_sum;
    let term_eps = k1 * k2 * (m * n) as f64 * eps / denom;
    let term_eps_certified = k1_certified * k2 * (m * n) as f64 * eps / denom;
    let rhs = ((l + term_a) + term_b) + term_eps;
    let rhs_certified = ((l + term_a) + term_b) + term_eps_certified;

    let check = check_from_terms(&terms, k1, k2, r, eps);
    let residual_count = check.residuals.len();
    let residual_mean = if residual_count == 0 {
        0.0
    } else {
        check.residuals.iter().sum::<f64>() / residual_count as f64
    };
    let residual_min = if residual_count == 0 { 0.0 } else { check.min_residual };
    Ok(BoundReport {
        l,
        l_aug,
        l_tilde_aug,
        term_a,
        term_b,
        term_eps,
        rhs,
        k1,
        k1_certified,
        term_eps_certified,
        rhs_certified,
        k2,
        r,
        eps,
        m,
        n,
        c_hat,
        residual_min,
        residual_mean,
        residual_count,
        first_order_holds: residual_min >= -1e-9 && l_tilde_aug <= rhs,
        full_bound_holds: l_aug <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::manifold::{gen_circle, ImageShape};
    use crate::network::{ActivationKind, Layer};

    fn affine_net(a: Matrix, b: Vec<f64>) -> Network {
        Network::new(vec![Layer::new(a, b, ActivationKind::Identity).unwrap()]).unwrap()
    }

    fn image_dataset(pixels: Vec<f64>, w: usize, h: usize) -> Dataset {
        Dataset::new(vec![pixels], vec![0.0], 1)
            .unwrap()
            .with_image_shape(ImageShape {
                width: w,
                height: h,
                channels: 1,
            })
            .unwrap()
    }

    #[test]
    fn jitter_zero_eps_and_tangency() {
        let mut rng = Rng::new(3);
        let ds = gen_circle(4, 30, 0.0, &mut rng).unwrap();
        let zero = make_tangent_jitter(&ds, 5, 0.0, &mut rng).unwrap();
        assert!(zero.displacements.iter().flatten().flatten().all(|v| *v == 0.0));
        assert_eq!(zero.eps_bound(), 0.0);

        let eps = 0.01;
        let aug = make_tangent_jitter(&ds, 5, eps, &mut rng).unwrap();
        assert_eq!(aug.m(), 5);
        let bases = ds.tangent_bases().unwrap();
        for i in 0..ds.len() {
            for u in aug.displacements(i) {
                let back = bases[i].matvec(&bases[i].t_matvec(u));
                assert!(norm2(&linalg::sub(u, &back)) <= 1e-10);
                assert!(norm2(u) <= eps);
                let r = norm2(&linalg::add(ds.point(i), u));
                assert!(r >= 1.0 - eps && r <= 1.0 + eps);
            }
        }
    }

    #[test]
    fn translation_counts_and_norms() {
        let ds = image_dataset(vec![0.0; 25], 5, 5);
        let aug = make_translations(&ds, 1).unwrap();
        assert_eq!(aug.m(), 8);
        assert_eq!(aug.eps_bound(), 0.0);

        let mut px = vec![0.0; 25];
        px[12] = 0.7;
        let ds = image_dataset(px, 5, 5);
        let aug = make_translations(&ds, 1).unwrap();
        // (dx, dy) = (-1, -1) is the first displacement
        assert!((norm2(&aug.displacements(0)[0]) - 2f64.sqrt() * 0.7).abs() < 1e-12);
        assert_eq!(make_translations(&ds, 2).unwrap().m(), 24);

        let plain = Dataset::new(vec![vec![0.0; 4]], vec![0.0], 1).unwrap();
        assert!(matches!(make_translations(&plain, 1), Err(Error::Config(_))));
    }

    #[test]
    fn flips_are_rejected_by_bounds() {
        let ds = image_dataset((0..16).map(f64::from).collect(), 4, 4);
        let aug = make_flips(&ds).unwrap();
        assert!(!aug.is_continuous());
        let net = affine_net(Matrix::from_rows(&[vec![0.1; 16]]).unwrap(), vec![0.0]);
        let loss = LossSpec::squared_error();
        assert!(matches!(
            theorem1_bound(&net, &ds, &aug, &loss),
            Err(Error::NonContinuous(_))
        ));
        assert!(matches!(
            verify_firstorder_bound(&net, &ds, &aug, &loss),
            Err(Error::NonContinuous(_))
        ));
    }

    #[test]
    fn losses() {
        let ce = LossSpec::softmax_cross_entropy();
        let (v, g) = ce.value_and_grad(&[0.0, 0.0], 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
        let (v, g) = ce.value_and_grad(&[1000.0, 0.0], 0.0).unwrap();
        assert!(v.abs() < 1e-12 && g.iter().all(|x| x.abs() < 1e-12));
        assert!(ce.value(&[0.0, 0.0], 2.0).is_err());

        let sq = LossSpec::squared_error();
        assert_eq!(sq.value_and_grad(&[3.0], 1.0).unwrap(), (4.0, vec![4.0]));
        assert_eq!(sq.value(&[0.0, 1.0, 0.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn augmented_loss_degenerate_cases() {
        let mut rng = Rng::new(5);
        let ds = gen_circle(3, 20, 0.0, &mut rng).unwrap();
        let net = Network::init(&[3, 16, 2], ActivationKind::Relu, &mut rng).unwrap();
        let loss = LossSpec::softmax_cross_entropy();
        let l = total_loss(&net, &ds, &loss).unwrap();
        let empty = AugmentationSet::zeros(ds.len(), 0, 3);
        assert_eq!(augmented_loss(&net, &ds, &empty, &loss).unwrap(), l);
        let zeros = AugmentationSet::zeros(ds.len(), 4, 3);
        let la = augmented_loss(&net, &ds, &zeros, &loss).unwrap();
        assert!((la - l).abs() <= 1e-12 * l);
    }

    #[test]
    fn bound_degenerate_and_affine_cases() {
        let mut rng = Rng::new(9);
        let ds = gen_circle(3, 25, 0.0, &mut rng).unwrap();
        let net = Network::init(&[3, 16, 2], ActivationKind::Relu, &mut rng).unwrap();
        let loss = LossSpec::softmax_cross_entropy();
        let zeros = AugmentationSet::zeros(ds.len(), 3, 3);
        let rep = theorem1_bound(&net, &ds, &zeros, &loss).unwrap();
        assert_eq!(rep.rhs, rep.l);
        assert_eq!(rep.identity_residual(), 0.0);
        let check = verify_firstorder_bound(&net, &ds, &zeros, &loss).unwrap();
        assert!(check.residuals.iter().all(|r| *r == 0.0));

        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 1.0]]).unwrap();
        let affine = affine_net(a.clone(), vec![0.1, -0.2]);
        let aug = make_tangent_jitter(&ds, 4, 0.05, &mut rng).unwrap();
        let rep = theorem1_bound(&affine, &ds, &aug, &loss).unwrap();
        assert_eq!(rep.term_a, 0.0);
        assert_eq!(rep.term_b, 0.0);
        let k1 = linalg::spectral_norm_default(&a).unwrap();
        assert!((rep.k1 - k1).abs() < 1e-9);
        let expected = rep.k1 * rep.k2 * (4 * ds.len()) as f64 * aug.eps_bound() / 5.0;
        assert_eq!(rep.term_eps, expected);
        assert!(rep.residual_min >= 0.0);
    }

    #[test]
    fn k1_examples() {
        let mut rng = Rng::new(2);
        let ds = gen_circle(3, 10, 0.0, &mut rng).unwrap();
        let aug = make_tangent_jitter(&ds, 2, 0.1, &mut rng).unwrap();
        let id = affine_net(Matrix::identity(3), vec![0.0; 3]);
        assert!((estimate_k1(&id, &ds, &aug).unwrap().empirical - 1.0).abs() < 1e-9);

        let net = Network::init(&[3, 8, 8, 2], ActivationKind::Relu, &mut rng).unwrap();
        let k = estimate_k1(&net, &ds, &aug).unwrap();
        assert!(k.empirical <= k.certified * (1.0 + 1e-9));
        let scaled = estimate_k1(&net.scaled_output(2.0), &ds, &aug).unwrap();
        assert!((scaled.empirical - 2.0 * k.empirical).abs() < 1e-9 * k.empirical);
    }

    #[test]
    fn configured_k2_is_validated() {
        let mut rng = Rng::new(4);
        let ds = gen_circle(2, 10, 0.0, &mut rng).unwrap();
        let net = Network::init(&[2, 8, 1], ActivationKind::Relu, &mut rng).unwrap();
        let loss = LossSpec::squared_error().with_k2(1e-6);
        assert!(matches!(resolve_k2(&net, &ds, &loss), Err(Error::Config(_))));
    }
}

//! Feedforward networks and their piecewise-affine structure.
//!
//! A network with relu / leaky-relu / abs hidden units is a continuous
//! piecewise-affine map. On the region containing `x` it equals
//! `A[x] x + b[x]`, where `A[x] = W_L D_{L-1} W_{L-1} ... D_1 W_1` and each
//! `D_l` is the diagonal of unit slopes selected by the activation pattern.
//!
//! Layer `l` computes `z_l = W_l a_{l-1} + c_l`, `a_l = act_l(z_l)`; the last
//! layer is always the identity.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, norm2, Matrix, Rng};

/// Pre-activations below this magnitude trigger the boundary guard.
pub const BOUNDARY_TOL: f64 = 1e-12;
/// Size of the boundary-guard nudge.
pub const BOUNDARY_NUDGE: f64 = 1e-9;

const FORMAT_HEADER: &str = "maso-net v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Abs,
    Tanh,
    Identity,
}

impl ActivationKind {
    /// relu, leaky relu, abs and identity are piecewise affine.
    pub fn is_piecewise(self) -> bool {
        !matches!(self, ActivationKind::Tanh)
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            ActivationKind::Abs => z.abs(),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Identity => z,
        }
    }

    /// Derivative used for backprop; for piecewise kinds this is the mask
    /// entry selected by [`ActivationKind::state`].
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            kind => kind.slope_of_state(kind.state(z)),
        }
    }

    /// Activation state of a unit. relu / leaky relu: 1 when `z > 0`, else 0.
    /// abs: +1 when `z >= 0`, else -1. identity: always 1.
    pub fn state(self, z: f64) -> i8 {
        match self {
            ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => i8::from(z > 0.0),
            ActivationKind::Abs => {
                if z >= 0.0 {
                    1
                } else {
                    -1
                }
            }
            ActivationKind::Tanh | ActivationKind::Identity => 1,
        }
    }

    /// Diagonal entry of `D` for a given state.
    pub fn slope_of_state(self, state: i8) -> f64 {
        match self {
            ActivationKind::Relu => f64::from(state),
            ActivationKind::LeakyRelu { slope } => {
                if state == 1 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Abs => f64::from(state),
            ActivationKind::Tanh | ActivationKind::Identity => 1.0,
        }
    }

    fn validate(self) -> Result<()> {
        if let ActivationKind::LeakyRelu { slope } = self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::arg(format!(
                    "leaky relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu { slope } => write!(f, "leaky_relu {}", fmt_f64(*slope)),
            ActivationKind::Abs => write!(f, "abs"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = match parts.next() {
            Some("relu") => ActivationKind::Relu,
            Some("leaky_relu") => {
                let slope = parts
                    .next()
                    .unwrap_or("0.01")
                    .parse::<f64>()
                    .map_err(|e| Error::arg(format!("leaky relu slope: {e}")))?;
                ActivationKind::LeakyRelu { slope }
            }
            Some("abs") => ActivationKind::Abs,
            Some("tanh") => ActivationKind::Tanh,
            Some("identity") => ActivationKind::Identity,
            _ => return Err(Error::arg(format!("unknown activation `{s}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::arg(format!("trailing tokens in activation `{s}`")));
        }
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: ActivationKind) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim(format!(
                "bias of length {} for {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        activation.validate()?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Per-layer unit states of the hidden layers. Smooth layers contribute an
/// empty entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub layers: Vec<Vec<i8>>,
}

impl Pattern {
    pub fn units(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Canonical region code: one character per hidden unit
    /// (`0`/`1` for relu-type units, `-`/`+` for abs, `1` for identity),
    /// layers separated by `|`.
    pub fn region_id(&self) -> RegionId {
        let code = self
            .layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|s| match s {
                        -1 => '-',
                        0 => '0',
                        _ => '1',
                    })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("|");
        RegionId(code)
    }
}

/// Hashable identifier of a VQ region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub String);

impl RegionId {
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.0.hash(&mut h);
        h.finish()
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `f(x) = a x + b` on the region of the extraction point.
#[derive(Clone, Debug)]
pub struct AffineOperator {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient with the same shapes as a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<LayerGradient>,
}

impl ParamGradient {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, b.weights.as_slice(), a.weights.as_mut_slice());
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weights.scale(alpha);
            l.bias.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| dot(l.weights.as_slice(), l.weights.as_slice()) + dot(&l.bias, &l.bias))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.as_slice().iter().all(|v| *v == 0.0) && l.bias.iter().all(|v| *v == 0.0)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Matrix norm used for the rugosity penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    #[default]
    Spectral,
    Frobenius,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::arg("a network needs at least one layer"));
        };
        if last.activation != ActivationKind::Identity {
            return Err(Error::arg("the final layer must use the identity activation"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {i} outputs {} units but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let hidden = &layers[..layers.len() - 1];
        let smooth = hidden.iter().any(|l| l.activation == ActivationKind::Tanh);
        let kinked = hidden.iter().any(|l| {
            l.activation.is_piecewise() && l.activation != ActivationKind::Identity
        });
        if smooth && kinked {
            return Err(Error::UnsupportedActivation(
                "mixing smooth and piecewise-affine hidden activations".into(),
            ));
        }
        for l in &layers {
            l.activation.validate()?;
            if !l.weights.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg("network parameters must be finite"));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform Glorot initialization on `[-s, s]`, `s = sqrt(6 / (in + out))`,
    /// zero biases. `widths` lists input, hidden and output widths.
    pub fn init(widths: &[usize], hidden: ActivationKind, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::arg(format!("invalid layer widths {widths:?}")));
        }
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-s, s))
                    .collect();
                let act = if i + 1 == n_layers {
                    ActivationKind::Identity
                } else {
                    hidden
                };
                Layer::new(Matrix::from_vec(fan_out, fan_in, data)?, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for optimizers; layer shapes must not change.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn hidden_activation(&self) -> ActivationKind {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.activation)
            .find(|a| *a != ActivationKind::Identity)
            .unwrap_or(ActivationKind::Identity)
    }

    /// True when every activation is piecewise affine.
    pub fn is_piecewise(&self) -> bool {
        self.layers.iter().all(|l| l.activation.is_piecewise())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input of length {} for a network with D = {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn require_piecewise(&self) -> Result<()> {
        if self.is_piecewise() {
            Ok(())
        } else {
            Err(Error::UnsupportedActivation(
                "affine operators need piecewise-affine activations".into(),
            ))
        }
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("nonempty");
            let mut z = layer.weights.matvec(prev);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let a = z.iter().map(|v| layer.activation.apply(*v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(Trace {
            activations,
            pre_activations,
        })
    }

    fn pattern_of(&self, trace: &Trace) -> Pattern {
        let hidden = self.layers.len() - 1;
        Pattern {
            layers: self.layers[..hidden]
                .iter()
                .zip(&trace.pre_activations)
                .map(|(layer, z)| {
                    if layer.activation.is_piecewise() {
                        z.iter().map(|v| layer.activation.state(*v)).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    /// Output and activation pattern at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Pattern)> {
        let trace = self.trace(x)?;
        let pattern = self.pattern_of(&trace);
        Ok((trace.output().to_vec(), pattern))
    }

    /// Network output only.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output().to_vec())
    }

    pub fn pattern(&self, x: &[f64]) -> Result<Pattern> {
        Ok(self.forward(x)?.1)
    }

    pub fn vq_region_id(&self, x: &[f64]) -> Result<RegionId> {
        self.require_piecewise()?;
        Ok(self.pattern(x)?.region_id())
    }

    /// Diagonal mask entries of every hidden layer for a pattern.
    fn masks(&self, pattern: &Pattern) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .zip(&pattern.layers)
            .map(|(layer, states)| {
                states
                    .iter()
                    .map(|s| layer.activation.slope_of_state(*s))
                    .collect()
            })
            .collect()
    }

    /// `(A, b)` for fixed hidden masks, by the right-to-left product
    /// `W_L D_{L-1} W_{L-1} ... D_1 W_1` accumulated from the output side.
    fn affine_from_masks(&self, masks: &[Vec<f64>]) -> (Matrix, Vec<f64>) {
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].weights.clone();
        let mut b = self.layers[last].bias.clone();
        for l in (0..last).rev() {
            let layer = &self.layers[l];
            let mask = &masks[l];
            for r in 0..g.rows() {
                for (v, m) in g.row_mut(r).iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            for (r, br) in b.iter_mut().enumerate() {
                *br += dot(g.row(r), &layer.bias);
            }
            g = g.matmul(&layer.weights).expect("chained layer shapes");
        }
        (g, b)
    }

    pub fn affine_operator(&self, x: &[f64]) -> Result<AffineOperator> {
        self.require_piecewise()?;
        let pattern = self.pattern(x)?;
        let (a, b) = self.affine_from_masks(&self.masks(&pattern));
        Ok(AffineOperator { a, b, pattern })
    }

    /// Vector-Jacobian product `wᵀ J_f(x)`.
    fn input_vjp(&self, trace: &Trace, w: &[f64]) -> Vec<f64> {
        let mut g = w.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            for (gi, z) in g.iter_mut().zip(&trace.pre_activations[l]) {
                *gi *= layer.activation.derivative(*z);
            }
            g = layer.weights.t_matvec(&g);
        }
        g
    }

    /// Gradient of output `out_index` with respect to the input. For
    /// piecewise nets this is the corresponding row of `A[x]`.
    pub fn gradient_wrt_input(&self, x: &[f64], out_index: usize) -> Result<Vec<f64>> {
        if out_index >= self.output_dim() {
            return Err(Error::dim(format!(
                "output index {out_index} for {} outputs",
                self.output_dim()
            )));
        }
        if self.is_piecewise() {
            return Ok(self.affine_operator(x)?.a.row(out_index).to_vec());
        }
        let trace = self.trace(x)?;
        let mut e = vec![0.0; self.output_dim()];
        e[out_index] = 1.0;
        Ok(self.input_vjp(&trace, &e))
    }

    /// Full input Jacobian (`out × D`).
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        if self.is_piecewise() {
            return Ok(self.affine_operator(x)?.a);
        }
        let trace = self.trace(x)?;
        let rows = (0..self.output_dim())
            .map(|k| {
                let mut e = vec![0.0; self.output_dim()];
                e[k] = 1.0;
                self.input_vjp(&trace, &e)
            })
            .collect::<Vec<_>>();
        Matrix::from_rows(&rows)
    }

    /// Parameter gradient of a loss given `dLoss/dOutput` at `x`.
    pub fn backprop(&self, x: &[f64], output_gradient: &[f64]) -> Result<ParamGradient> {
        let trace = self.trace(x)?;
        self.backprop_trace(&trace, output_gradient)
    }

    pub fn backprop_trace(&self, trace: &Trace, output_gradient: &[f64]) -> Result<ParamGradient> {
        if output_gradient.len() != self.output_dim() {
            return Err(Error::dim(format!(
                "output gradient of length {} for {} outputs",
                output_gradient.len(),
                self.output_dim()
            )));
        }
        let mut grad = ParamGradient::zeros_like(self);
        let mut delta = output_gradient.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            for (d, z) in delta.iter_mut().zip(&trace.pre_activations[l]) {
                *d *= layer.activation.derivative(*z);
            }
            let input = &trace.activations[l];
            let lg = &mut grad.layers[l];
            for (r, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    axpy(*d, input, lg.weights.row_mut(r));
                }
            }
            lg.bias.copy_from_slice(&delta);
            if l > 0 {
                delta = layer.weights.t_matvec(&delta);
            }
        }
        Ok(grad)
    }

    /// Adds `sign · ∂(leftᵀ A right)/∂W` to `grad`, where `A` is built from
    /// `masks` held fixed.
    fn accumulate_frozen_bilinear(
        &self,
        masks: &[Vec<f64>],
        left: &[f64],
        right: &[f64],
        sign: f64,
        grad: &mut ParamGradient,
    ) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut v = right.to_vec();
        for l in 0..n {
            let mut next = self.layers[l].weights.matvec(&v);
            if l + 1 < n {
                for (vi, m) in next.iter_mut().zip(&masks[l]) {
                    *vi *= m;
                }
            }
            inputs.push(v);
            v = next;
        }
        let mut g = left.to_vec();
        for l in (0..n).rev() {
            let lg = &mut grad.layers[l];
            for (r, gr) in g.iter().enumerate() {
                if *gr != 0.0 {
                    axpy(sign * gr, &inputs[l], lg.weights.row_mut(r));
                }
            }
            if l > 0 {
                g = self.layers[l].weights.t_matvec(&g);
                for (gi, m) in g.iter_mut().zip(&masks[l - 1]) {
                    *gi *= m;
                }
            }
        }
    }

    /// Value and weight gradient of `‖A[x + eps·u] − A[x]‖`, with both
    /// activation patterns held fixed. Bias gradients are zero because `A`
    /// does not depend on biases once the patterns are frozen.
    pub fn penalty_gradient(
        &self,
        x: &[f64],
        u: &[f64],
        eps: f64,
        norm: PenaltyNorm,
    ) -> Result<(f64, ParamGradient)> {
        self.require_piecewise()?;
        if !(eps > 0.0) {
            return Err(Error::arg(format!("eps must be positive, got {eps}")));
        }
        self.check_input(x)?;
        self.check_input(u)?;
        if (norm2(u) - 1.0).abs() > 1e-9 {
            return Err(Error::arg("penalty direction must be a unit vector"));
        }
        let shifted: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + eps * b).collect();
        self.penalty_between(x, &shifted, norm)
    }

    /// [`Network::penalty_gradient`] for an explicit pair of points.
    pub fn penalty_between(
        &self,
        x: &[f64],
        shifted: &[f64],
        norm: PenaltyNorm,
    ) -> Result<(f64, ParamGradient)> {
        self.require_piecewise()?;
        let masks0 = self.masks(&self.pattern(x)?);
        let masks1 = self.masks(&self.pattern(shifted)?);
        let mut grad = ParamGradient::zeros_like(self);
        if masks0 == masks1 {
            return Ok((0.0, grad));
        }
        let (a0, _) = self.affine_from_masks(&masks0);
        let (a1, _) = self.affine_from_masks(&masks1);
        let diff = a1.sub(&a0)?;
        match norm {
            PenaltyNorm::Spectral => {
                let t = linalg::top_singular_triple_default(&diff)?;
                if t.value > 0.0 {
                    self.accumulate_frozen_bilinear(&masks1, &t.left, &t.right, 1.0, &mut grad);
                    self.accumulate_frozen_bilinear(&masks0, &t.left, &t.right, -1.0, &mut grad);
                }
                Ok((t.value, grad))
            }
            PenaltyNorm::Frobenius => {
                let value = linalg::frobenius_norm(&diff)?;
                if value > 0.0 {
                    let mut e = vec![0.0; self.output_dim()];
                    for r in 0..diff.rows() {
                        e.fill(0.0);
                        e[r] = 1.0;
                        let right = linalg::scaled(diff.row(r), 1.0 / value);
                        self.accumulate_frozen_bilinear(&masks1, &e, &right, 1.0, &mut grad);
                        self.accumulate_frozen_bilinear(&masks0, &e, &right, -1.0, &mut grad);
                    }
                }
                Ok((value, grad))
            }
        }
    }

    /// Smallest pre-activation magnitude over all hidden units at `x`.
    pub fn min_hidden_margin(&self, x: &[f64]) -> Result<f64> {
        let trace = self.trace(x)?;
        let hidden = self.layers.len() - 1;
        Ok(trace.pre_activations[..hidden]
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.activation.is_piecewise() && l.activation != ActivationKind::Identity)
            .flat_map(|(z, _)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// Moves `x` off a region boundary: when some hidden pre-activation is
    /// below [`BOUNDARY_TOL`] in magnitude, returns `x` nudged by
    /// [`BOUNDARY_NUDGE`] along the fixed unit direction `(1, …, 1)/√D`.
    pub fn boundary_guard(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        if self.min_hidden_margin(x)? >= BOUNDARY_TOL {
            return Ok((x.to_vec(), false));
        }
        let step = BOUNDARY_NUDGE / (x.len() as f64).sqrt();
        Ok((x.iter().map(|v| v + step).collect(), true))
    }

    /// Multiplies the final layer's weights and bias by `alpha`.
    pub fn scale_output(&mut self, alpha: f64) {
        let last = self.layers.len() - 1;
        self.layers[last].weights.scale(alpha);
        self.layers[last].bias.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled_output(&self, alpha: f64) -> Network {
        let mut n = self.clone();
        n.scale_output(alpha);
        n
    }

    /// `∏_l ‖W_l‖₂`, a certified Lipschitz bound for relu / leaky relu / abs nets.
    pub fn lipschitz_product_bound(&self) -> Result<f64> {
        self.layers
            .iter()
            .map(|l| linalg::spectral_norm_default(&l.weights))
            .product()
    }

    /// `params -= lr * grad` style update: `params += alpha * grad`.
    pub fn add_scaled(&mut self, alpha: f64, grad: &ParamGradient) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            axpy(alpha, g.weights.as_slice(), layer.weights.as_mut_slice());
            axpy(alpha, &g.bias, &mut layer.bias);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{FORMAT_HEADER} D={} L={}\n",
            self.input_dim(),
            self.layers.len()
        );
        for layer in &self.layers {
            out.push_str(&format!("{} {}\n", layer.out_dim(), layer.in_dim()));
            out.push_str(&format!("{}\n", layer.activation));
            for r in 0..layer.out_dim() {
                out.push_str(&join_f64(layer.weights.row(r)));
                out.push('\n');
            }
            out.push_str(&join_f64(&layer.bias));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .ok_or_else(|| Error::config(format!("network file truncated, expected {what}")))
        };
        let (_, header) = next("header")?;
        let rest = header
            .strip_prefix(FORMAT_HEADER)
            .ok_or_else(|| Error::config(format!("bad network header `{header}`")))?;
        let mut d = None;
        let mut l = None;
        for tok in rest.split_whitespace() {
            if let Some(v) = tok.strip_prefix("D=") {
                d = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("L=") {
                l = v.parse::<usize>().ok();
            }
        }
        let (d, n_layers) = d
            .zip(l)
            .ok_or_else(|| Error::config(format!("bad network header `{header}`")))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (ln, dims) = next("layer dims")?;
            let dims: Vec<usize> = dims
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config(format!("line {}: {e}", ln + 1)))?;
            let [out, inp] = dims[..] else {
                return Err(Error::config(format!("line {}: expected `<out> <in>`", ln + 1)));
            };
            let (_, act) = next("activation")?;
            let activation: ActivationKind = act.trim().parse()?;
            let mut data = Vec::with_capacity(out * inp);
            for _ in 0..out {
                let (ln, row) = next("weight row")?;
                let row = parse_f64_line(row, ln)?;
                if row.len() != inp {
                    return Err(Error::config(format!(
                        "line {}: {} weights, expected {inp}",
                        ln + 1,
                        row.len()
                    )));
                }
                data.extend(row);
            }
            let (ln, bias) = next("bias")?;
            let bias = parse_f64_line(bias, ln)?;
            layers.push(Layer::new(Matrix::from_vec(out, inp, data)?, bias, activation)?);
        }
        let net = Self::new(layers)?;
        if net.input_dim() != d {
            return Err(Error::config(format!(
                "header says D={d} but the first layer takes {}",
                net.input_dim()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_f64_line(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::config(format!("line {}: `{t}`: {e}", ln + 1)))
        })
        .collect()
}

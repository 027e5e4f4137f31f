//! Mini-batch training for plain, augmented and rugosity-penalized
//! objectives.
//!
//! Shuffling uses one RNG stream per epoch and penalty sampling another, and
//! per-item gradients are reduced in batch order, so a run is determined by
//! its seed regardless of the thread count.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSet, LossSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Rng};
use crate::manifold::Dataset;
use crate::network::{fmt_f64, Network, ParamGradient, PenaltyNorm};
use crate::rugosity::{self, RugosityConfig};

/// Stream offset separating penalty sampling from shuffling.
const PENALTY_STREAM: u64 = 0x5eed_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// `(epoch, lr)` pairs: from 0-based epoch `epoch` on, use `lr`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub penalty_norm: PenaltyNorm,
    /// Penalize every displacement of a batch point instead of one sampled
    /// displacement per step.
    #[serde(default)]
    pub penalty_full_sum: bool,
    /// With `lambda = 0`, train on the augmented loss when an augmentation
    /// set is given. When false the set only feeds the `c_hat` metric.
    #[serde(default = "default_true")]
    pub aug_in_loss: bool,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: usize,
    /// Fill the `wall_ms` column; off by default so traces are byte-stable.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Estimator settings for the trace; `None` derives them from the
    /// training data.
    #[serde(default)]
    pub metrics: Option<RugosityConfig>,
}

impl TrainConfig {
    /// Adam at 0.005, dropping to 0.0015 at half the epochs and 0.001 at
    /// three quarters, batch 16.
    pub fn recipe(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            optimizer: Optimizer::adam(0.005),
            lr_schedule: default_schedule(epochs),
            lambda: 0.0,
            penalty_norm: PenaltyNorm::Spectral,
            penalty_full_sum: false,
            aug_in_loss: true,
            seed,
            eval_every: epochs.max(1),
            record_wall_time: false,
            metrics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::config("lr_schedule epochs must be strictly increasing"));
            }
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(Error::config("scheduled learning rates must be positive"));
        }
        if let Some(m) = &self.metrics {
            m.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map_or(self.optimizer.lr(), |&(_, lr)| lr)
    }

    /// Metric estimator settings, deriving defaults from `train` when unset.
    pub fn resolved_metrics(&self, train: &Dataset) -> RugosityConfig {
        self.metrics.clone().unwrap_or_else(|| RugosityConfig {
            seed: self.seed,
            ..RugosityConfig::for_dataset(train)
        })
    }
}

pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
    let mut s = Vec::new();
    if epochs / 2 > 0 {
        s.push((epochs / 2, 0.0015));
    }
    if 3 * epochs / 4 > epochs / 2 {
        s.push((3 * epochs / 4, 0.001));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Squared finite-difference rugosity `C̃²` on the training split.
    pub rugosity_train: f64,
    pub rugosity_test: Option<f64>,
    pub jacobian_norm: f64,
    pub c_hat: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTrace {
    pub rows: Vec<MetricRow>,
}

impl MetricTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,train_acc,test_acc,rugosity_train,rugosity_test,jacobian_norm,c_hat,wall_ms";

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f64(r.train_loss),
                opt(r.train_acc),
                opt(r.test_acc),
                fmt_f64(r.rugosity_train),
                opt(r.rugosity_test),
                fmt_f64(r.jacobian_norm),
                opt(r.c_hat),
                r.wall_ms
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean per-sample loss.
    pub loss: f64,
    /// Argmax accuracy; `None` for regression.
    pub accuracy: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(net: &Network, ds: &Dataset, loss: &LossSpec) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let classify = loss.is_classification(net.output_dim());
    let per = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let out = net.eval(ds.point(i))?;
            let l = loss.value(&out, ds.label(i))?;
            let hit = classify && argmax(&out) as f64 == ds.label(i);
            Ok((l, hit))
        })
        .collect::<Result<Vec<(f64, bool)>>>()?;
    let n = ds.len() as f64;
    Ok(Evaluation {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: classify.then(|| per.iter().filter(|p| p.1).count() as f64 / n),
    })
}

/// Squared rugosity with the estimator matching the network type.
pub fn squared_rugosity(net: &Network, ds: &Dataset, cfg: &RugosityConfig) -> Result<f64> {
    let cfg = RugosityConfig { p: 2, ..cfg.clone() };
    let report = if net.is_piecewise() {
        rugosity::rugosity_piecewise(net, ds, &cfg)?
    } else {
        rugosity::rugosity_smooth_mc(net, ds, &cfg)?
    };
    Ok(report.squared())
}

enum OptState {
    Sgd,
    Adam { m: ParamGradient, v: ParamGradient, t: i32 },
}

impl OptState {
    fn new(opt: &Optimizer, net: &Network) -> Self {
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd,
            Optimizer::Adam { .. } => OptState::Adam {
                m: ParamGradient::zeros_like(net),
                v: ParamGradient::zeros_like(net),
                t: 0,
            },
        }
    }

    fn step(&mut self, opt: &Optimizer, net: &mut Network, grad: &ParamGradient, lr: f64) {
        match (self, *opt) {
            (OptState::Sgd, _) => net.add_scaled(-lr, grad),
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps, .. }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let update = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for k in 0..w.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                };
                for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                    update(
                        layer.weights.as_mut_slice(),
                        grad.layers[l].weights.as_slice(),
                        m.layers[l].weights.as_mut_slice(),
                        v.layers[l].weights.as_mut_slice(),
                    );
                    update(
                        &mut layer.bias,
                        &grad.layers[l].bias,
                        &mut m.layers[l].bias,
                        &mut v.layers[l].bias,
                    );
                }
            }
            (OptState::Adam { .. }, Optimizer::Sgd { .. }) => unreachable!("state built from optimizer"),
        }
    }
}

/// Loss value and parameter gradient of `ℓ(f(x), y)`.
fn sample_grad(net: &Network, x: &[f64], y: f64, loss: &LossSpec) -> Result<(f64, ParamGradient)> {
    let trace = net.trace(x)?;
    let (l, g) = loss.value_and_grad(trace.output(), y)?;
    Ok((l, net.backprop_trace(&trace, &g)?))
}

/// Which penalty terms a batch item carries.
#[derive(Clone, Copy)]
enum Penalty {
    None,
    One(usize),
    All,
}

struct Objective<'a> {
    net: &'a Network,
    ds: &'a Dataset,
    aug: Option<&'a AugmentationSet>,
    loss: &'a LossSpec,
    lambda: f64,
    norm: PenaltyNorm,
    aug_in_loss: bool,
}

impl Objective<'_> {
    fn item(&self, i: usize, penalty: Penalty) -> Result<(f64, ParamGradient)> {
        let x = self.ds.point(i);
        let y = self.ds.label(i);
        let (l0, g0) = sample_grad(self.net, x, y, self.loss)?;
        match (self.aug, penalty) {
            (None, _) => Ok((l0, g0)),
            (Some(_), Penalty::None) if !self.aug_in_loss => Ok((l0, g0)),
            (Some(aug), Penalty::None) => {
                // Copies with u = 0 fold into the weight of the original, so an
                // all-zero set reproduces the plain objective exactly.
                let us = aug.displacements(i);
                let denom = (us.len() + 1) as f64;
                let zeros = us.iter().filter(|u| u.iter().all(|v| *v == 0.0)).count();
                let w0 = (1 + zeros) as f64 / denom;
                let mut value = l0 * w0;
                let mut grad = g0;
                if w0 != 1.0 {
                    grad.scale(w0);
                }
                for u in us.iter().filter(|u| u.iter().any(|v| *v != 0.0)) {
                    let (l, g) = sample_grad(self.net, &linalg::add(x, u), y, self.loss)?;
                    value += l / denom;
                    grad.add_scaled(1.0 / denom, &g);
                }
                Ok((value, grad))
            }
            (Some(aug), penalty) => {
                let us = aug.displacements(i);
                let (picked, weight): (Vec<&Vec<f64>>, f64) = match penalty {
                    Penalty::One(j) => (vec![&us[j]], self.lambda * us.len() as f64),
                    _ => (us.iter().collect(), self.lambda),
                };
                let mut value = l0;
                let mut grad = g0;
                for u in picked {
                    let (p, g) = self.net.penalty_between(x, &linalg::add(x, u), self.norm)?;
                    value += weight * p;
                    grad.add_scaled(weight, &g);
                }
                Ok((value, grad))
            }
        }
    }
}

/// Runs mini-batch training and returns the trained network with its trace.
///
/// With `lambda = 0` the objective is the plain loss, or the augmented loss
/// when `aug` is given and `aug_in_loss` is set. With `lambda > 0` it is `L + λ Ĉ` restricted to each
/// batch, and `aug` supplies the displacements of `Ĉ`.
pub fn train(
    net: &Network,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    aug: Option<&AugmentationSet>,
    loss: &LossSpec,
) -> Result<(Network, MetricTrace)> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    if train_ds.dim() != net.input_dim() {
        return Err(Error::dim(format!(
            "training data has D = {} but the network takes {}",
            train_ds.dim(),
            net.input_dim()
        )));
    }
    if let Some(t) = test_ds {
        if t.dim() != net.input_dim() {
            return Err(Error::dim("test data dimension differs from the network input"));
        }
    }
    if let Some(a) = aug {
        if a.len() != train_ds.len() {
            return Err(Error::dim(format!(
                "augmentation covers {} points, training set has {}",
                a.len(),
                train_ds.len()
            )));
        }
    }
    if cfg.lambda > 0.0 {
        if !net.is_piecewise() {
            return Err(Error::UnsupportedActivation(format!(
                "rugosity penalty needs a piecewise-affine network, got {}",
                net.hidden_activation()
            )));
        }
        match aug {
            None => return Err(Error::config("lambda > 0 needs an augmentation set")),
            Some(a) if a.m() == 0 => return Err(Error::config("lambda > 0 needs m >= 1")),
            _ => {}
        }
    }

    let metrics = cfg.resolved_metrics(train_ds);
    let start = Instant::now();
    let mut net = net.clone();
    let mut state = OptState::new(&cfg.optimizer, &net);
    let mut trace = MetricTrace::default();
    let n = train_ds.len();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut pen_rng = Rng::derive(cfg.seed, PENALTY_STREAM + epoch as u64);

        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(usize, Penalty)> = batch
                .iter()
                .map(|&i| {
                    let p = match aug {
                        Some(_) if cfg.lambda > 0.0 && cfg.penalty_full_sum => Penalty::All,
                        Some(a) if cfg.lambda > 0.0 => Penalty::One(pen_rng.below(a.m())),
                        _ => Penalty::None,
                    };
                    (i, p)
                })
                .collect();
            let obj = Objective {
                net: &net,
                ds: train_ds,
                aug,
                loss,
                lambda: cfg.lambda,
                norm: cfg.penalty_norm,
                aug_in_loss: cfg.aug_in_loss,
            };
            let results = items
                .par_iter()
                .map(|&(i, p)| obj.item(i, p))
                .collect::<Result<Vec<_>>>()?;
            let mut results = results.into_iter();
            let (mut value, mut grad) = results.next().expect("non-empty batch");
            for (v, g) in results {
                value += v;
                grad.add_scaled(1.0, &g);
            }
            let b = batch.len() as f64;
            value /= b;
            grad.scale(1.0 / b);
            if !value.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            state.step(&cfg.optimizer, &mut net, &grad, lr);
        }

        let done = epoch + 1;
        if done % cfg.eval_every == 0 || done == cfg.epochs {
            let mut row = metric_row(&net, train_ds, test_ds, aug, loss, &metrics, done)?;
            if !row.train_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: done,
                    loss: row.train_loss,
                });
            }
            if cfg.record_wall_time {
                row.wall_ms = start.elapsed().as_millis() as u64;
            }
            trace.rows.push(row);
        }
    }
    Ok((net, trace))
}

/// One trace row for a frozen network.
pub fn metric_row(
    net: &Network,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    aug: Option<&AugmentationSet>,
    loss: &LossSpec,
    metrics: &RugosityConfig,
    epoch: usize,
) -> Result<MetricRow> {
    let train_eval = evaluate(net, train_ds, loss)?;
    let test_eval = test_ds.map(|t| evaluate(net, t, loss)).transpose()?;
    let c_hat = match aug {
        Some(a) if net.is_piecewise() => Some(rugosity::c_hat(net, train_ds, a)?.value),
        _ => None,
    };
    Ok(MetricRow {
        epoch,
        train_loss: train_eval.loss,
        train_acc: train_eval.accuracy,
        test_acc: test_eval.and_then(|e| e.accuracy),
        rugosity_train: squared_rugosity(net, train_ds, metrics)?,
        rugosity_test: test_ds.map(|t| squared_rugosity(net, t, metrics)).transpose()?,
        jacobian_norm: rugosity::jacobian_norm(net, train_ds)?.value,
        c_hat,
        wall_ms: 0,
    })
}

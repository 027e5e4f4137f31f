//! Command-line experiment runner.
//!
//! Every subcommand reads one JSON [`ExperimentConfig`], writes its outputs
//! into the configured directory, and writes the fully resolved config next
//! to them as `config.resolved.json`. Feeding that file back in reproduces
//! the CSV outputs byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentKind, AugmentationSet, LossKind, LossSpec};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::manifold::{self, Dataset, ImageShape};
use crate::network::{fmt_f64, ActivationKind, Network, PenaltyNorm};
use crate::rugosity::{self, DirectionSource, RugosityConfig, RugosityReport};
use crate::train::{self, MetricRow, MetricTrace, Optimizer, TrainConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// RNG stream ids derived from a run seed.
const STREAM_DATA: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_AUG_TEST: u64 = 4;

/// Default λ grid for sweeps.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Parser)]
#[command(name = "rugosity", version, about = "Rugosity measurement and augmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the augmentation section: `none`, `flip`,
    /// `translation:<max_shift>` or `tangent_jitter:<m>:<eps>`.
    #[arg(long, global = true)]
    pub augment: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset splits and metadata.
    Generate,
    /// Train a network and write its metric trace.
    Train,
    /// Measure rugosity, Ĉ and the Jacobian norm of a saved network.
    Measure {
        #[arg(long)]
        network: PathBuf,
        /// Multiply the final layer by this factor before measuring.
        #[arg(long)]
        rescale: Option<f64>,
    },
    /// Evaluate every term of the augmented-loss bound for a saved network.
    Bound {
        #[arg(long)]
        network: PathBuf,
    },
    /// Train over a grid of settings and seeds and aggregate final metrics.
    Sweep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Circle,
    SwissRoll,
    #[default]
    Spirals,
    Idx,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Ambient dimension of the circle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Intrinsic dimension override (image data defaults to 10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Directory written by `generate`; when set the splits are read from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub kind: DatasetKind,
    #[serde(default)]
    pub params: DatasetParams,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden-layer widths.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// `relu`, `leaky_relu <slope>`, `abs`, `tanh` or `identity`.
    #[serde(default = "default_activation", with = "activation_text")]
    pub activation: ActivationKind,
}

fn default_widths() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            activation: default_activation(),
        }
    }
}

mod activation_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::network::ActivationKind;

    pub fn serialize<S: Serializer>(a: &ActivationKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&a.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ActivationKind, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Training section; unset fields take the desk-scale recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_norm: Option<PenaltyNorm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_full_sum: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_in_loss: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_wall_time: Option<bool>,
}

impl TrainSection {
    fn resolve(&self) -> TrainConfig {
        let epochs = self.epochs.unwrap_or(200);
        let base = TrainConfig::recipe(epochs, self.seed.unwrap_or(0));
        TrainConfig {
            epochs,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            optimizer: self.optimizer.unwrap_or(base.optimizer),
            lr_schedule: self.lr_schedule.clone().unwrap_or(base.lr_schedule),
            lambda: self.lambda.unwrap_or(0.0),
            penalty_norm: self.penalty_norm.unwrap_or_default(),
            penalty_full_sum: self.penalty_full_sum.unwrap_or(false),
            aug_in_loss: self.aug_in_loss.unwrap_or(true),
            seed: base.seed,
            eval_every: self.eval_every.unwrap_or(base.eval_every),
            record_wall_time: self.record_wall_time.unwrap_or(false),
            metrics: None,
        }
    }

    fn from_config(c: &TrainConfig) -> Self {
        Self {
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            optimizer: Some(c.optimizer),
            lr_schedule: Some(c.lr_schedule.clone()),
            lambda: Some(c.lambda),
            penalty_norm: Some(c.penalty_norm),
            penalty_full_sum: Some(c.penalty_full_sum),
            aug_in_loss: Some(c.aug_in_loss),
            seed: Some(c.seed),
            eval_every: Some(c.eval_every),
            record_wall_time: Some(c.record_wall_time),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationChoice {
    #[default]
    None,
    TangentJitter,
    Translation,
    Flip,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shift: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    #[serde(default)]
    pub kind: AugmentationChoice,
    #[serde(default)]
    pub params: AugmentationParams,
}

impl AugmentationSection {
    /// Parses `none`, `flip`, `translation:<s>` or `tangent_jitter:<m>:<eps>`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::config(format!("bad number {s:?} in --augment {text:?}")))
        };
        let count = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::config(format!("bad count {s:?} in --augment {text:?}")))
        };
        let mut section = Self::default();
        match parts.as_slice() {
            ["none"] => {}
            ["flip"] => section.kind = AugmentationChoice::Flip,
            ["translation"] => section.kind = AugmentationChoice::Translation,
            ["translation", s] => {
                section.kind = AugmentationChoice::Translation;
                section.params.max_shift = Some(count(s)?);
            }
            ["tangent_jitter", m, eps] => {
                section.kind = AugmentationChoice::TangentJitter;
                section.params.m = Some(count(m)?);
                section.params.eps = Some(num(eps)?);
            }
            _ => return Err(Error::config(format!("unrecognized --augment value {text:?}"))),
        }
        Ok(section)
    }

    fn resolved(&self, train: &Dataset) -> Self {
        let mut out = self.clone();
        match self.kind {
            AugmentationChoice::TangentJitter => {
                out.params.m = Some(self.params.m.unwrap_or(8));
                out.params.eps = Some(
                    self.params
                        .eps
                        .unwrap_or_else(|| rugosity::DEFAULT_STEP_FRACTION * train.median_nn_distance()),
                );
            }
            AugmentationChoice::Translation => {
                out.params.max_shift = Some(self.params.max_shift.unwrap_or(2));
            }
            AugmentationChoice::None | AugmentationChoice::Flip => {}
        }
        out
    }

    fn label(&self) -> String {
        match self.kind {
            AugmentationChoice::None => "none".into(),
            AugmentationChoice::Flip => "flip".into(),
            AugmentationChoice::Translation => {
                format!("translation:{}", self.params.max_shift.unwrap_or(2))
            }
            AugmentationChoice::TangentJitter => format!(
                "tangent_jitter:{}:{}",
                self.params.m.unwrap_or(8),
                self.params.eps.unwrap_or(0.0)
            ),
        }
    }

    /// Builds the set on `ds` from a resolved section.
    fn build(&self, ds: &Dataset, seed: u64, stream: u64) -> Result<Option<AugmentationSet>> {
        Ok(match self.kind {
            AugmentationChoice::None => None,
            AugmentationChoice::TangentJitter => Some(augment::make_tangent_jitter(
                ds,
                self.params.m.unwrap_or(8),
                self.params.eps.unwrap_or(0.0),
                &mut Rng::derive(seed, stream),
            )?),
            AugmentationChoice::Translation => {
                Some(augment::make_translations(ds, self.params.max_shift.unwrap_or(2))?)
            }
            AugmentationChoice::Flip => Some(augment::make_flips(ds)?),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Piecewise estimator for piecewise-affine nets, gradient Monte Carlo otherwise.
    #[default]
    Auto,
    Piecewise,
    SmoothMc,
    SmoothDirect,
}

/// Estimator section; unset fields take [`RugosityConfig::for_dataset`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RugositySection {
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<PenaltyNorm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbours: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_guard: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<DirectionSource>,
}

impl RugositySection {
    fn resolve(&self, train: &Dataset) -> RugosityConfig {
        let base = RugosityConfig::for_dataset(train);
        RugosityConfig {
            p: self.p.unwrap_or(base.p),
            eps: self.eps.unwrap_or(base.eps),
            delta: self.delta.unwrap_or(base.delta),
            m: self.m.unwrap_or(base.m),
            d: Some(self.d.unwrap_or(train.intrinsic_dim())),
            seed: self.seed.unwrap_or(base.seed),
            norm: self.norm.unwrap_or(base.norm),
            out_index: self.out_index,
            neighbours: self.neighbours,
            boundary_guard: self.boundary_guard.unwrap_or(base.boundary_guard),
            directions: self.directions.clone().unwrap_or(base.directions),
        }
    }

    fn from_config(estimator: EstimatorKind, c: &RugosityConfig) -> Self {
        Self {
            estimator,
            p: Some(c.p),
            eps: Some(c.eps),
            delta: Some(c.delta),
            m: Some(c.m),
            d: c.d,
            seed: Some(c.seed),
            norm: Some(c.norm),
            out_index: c.out_index,
            neighbours: c.neighbours,
            boundary_guard: Some(c.boundary_guard),
            directions: Some(c.directions.clone()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// λ values; defaults to `{0, 0.001, 0.01, 0.1, 1}` unless
    /// `augmentations` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    /// Augmentation settings; defaults to the config's augmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentations: Option<Vec<AugmentationSection>>,
    /// Seeds; defaults to the train seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out_dir() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub network: NetworkSection,
    /// Defaults to softmax cross-entropy for class labels and squared error
    /// for regression targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub rugosity: RugositySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses JSON, reporting unknown or malformed keys with their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies command-line overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<&Path>, augment: Option<&str>) -> Result<()> {
        if let Some(s) = seed {
            self.dataset.seed = s;
            self.train.seed = Some(s);
            self.rugosity.seed = Some(s);
        }
        if let Some(o) = out {
            self.output.dir = o.to_path_buf();
        }
        if let Some(a) = augment {
            self.augmentation = AugmentationSection::parse(a)?;
        }
        Ok(())
    }
}

/// Dataset splits plus how they were obtained.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub regression: bool,
}

fn synthetic(kind: DatasetKind, params: &DatasetParams, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let noise = params.noise.unwrap_or(0.0);
    match kind {
        DatasetKind::Circle => manifold::gen_circle(params.dim.unwrap_or(2), n, noise, rng),
        DatasetKind::SwissRoll => manifold::gen_swiss_roll(n, noise, rng),
        DatasetKind::Spirals => manifold::gen_spirals(n, noise, rng),
        DatasetKind::Idx => unreachable!("idx data is loaded, not generated"),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::config(format!("dataset.params.{name} is required for idx data")))
}

/// Builds or loads the train/test splits described by `section`.
pub fn load_splits(section: &DatasetSection) -> Result<Splits> {
    let p = &section.params;
    let regression = section.kind == DatasetKind::SwissRoll;
    if let Some(dir) = &p.dir {
        return read_dataset_dir(dir).map(|(train, test)| Splits { train, test, regression });
    }
    let (mut train, mut test) = match section.kind {
        DatasetKind::Idx => {
            let train = manifold::load_idx(
                required(&p.train_images, "train_images")?,
                required(&p.train_labels, "train_labels")?,
                p.n_train.unwrap_or(1000),
            )?;
            let test = manifold::load_idx(
                required(&p.test_images, "test_images")?,
                required(&p.test_labels, "test_labels")?,
                p.n_test.unwrap_or(500),
            )?;
            (train, test)
        }
        kind => {
            // One draw split in two, so both splits share the manifold.
            let (n_train, n_test) = (p.n_train.unwrap_or(200), p.n_test.unwrap_or(200));
            let all = synthetic(kind, p, n_train + n_test, &mut Rng::derive(section.seed, STREAM_DATA))?;
            all.split(n_test, &mut Rng::derive(section.seed, STREAM_SPLIT))?
        }
    };
    if let Some(d) = p.intrinsic_dim {
        train = train.with_intrinsic_dim(d)?;
        test = test.with_intrinsic_dim(d)?;
    }
    Ok(Splits { train, test, regression })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    kind: DatasetKind,
    d: usize,
    #[serde(rename = "D")]
    ambient: usize,
    #[serde(rename = "R")]
    radius: f64,
    seed: u64,
    n_train: usize,
    n_test: usize,
    regression: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_shape: Option<ImageShape>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    manifold::write_file(path, text)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_dataset_dir(dir: &Path, section: &DatasetSection, splits: &Splits) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("train.csv"), &splits.train.to_csv())?;
    write_text(&dir.join("test.csv"), &splits.test.to_csv())?;
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        if let Some(t) = ds.tangents_to_csv() {
            write_text(&dir.join(format!("{name}_tangents.csv")), &t)?;
        }
    }
    let meta = DatasetMeta {
        kind: section.kind,
        d: splits.train.intrinsic_dim(),
        ambient: splits.train.dim(),
        radius: splits.train.radius(),
        seed: section.seed,
        n_train: splits.train.len(),
        n_test: splits.test.len(),
        regression: splits.regression,
        image_shape: splits.train.image_shape(),
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    write_text(&dir.join("meta.json"), &json)
}

fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: DatasetMeta = serde_json::from_str(&read("meta.json")?)
        .map_err(|e| Error::config(format!("{}: {e}", dir.join("meta.json").display())))?;
    let mut out = Vec::new();
    for name in ["train", "test"] {
        let mut ds = Dataset::from_csv(&read(&format!("{name}.csv"))?, meta.d)?;
        let tangents = dir.join(format!("{name}_tangents.csv"));
        if tangents.exists() {
            ds = ds.with_tangents_csv(&read(&format!("{name}_tangents.csv"))?)?;
        }
        if let Some(shape) = meta.image_shape {
            ds = ds.with_image_shape(shape)?;
        }
        out.push(ds);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

/// Loss from the config, or the default for the dataset.
fn resolve_loss(cfg: &ExperimentConfig, splits: &Splits) -> LossSpec {
    cfg.loss.unwrap_or(if splits.regression {
        LossSpec::squared_error()
    } else {
        LossSpec::softmax_cross_entropy()
    })
}

fn output_dim(loss: &LossSpec, train: &Dataset) -> usize {
    match loss.kind {
        LossKind::SoftmaxCrossEntropy => train.num_classes().max(2),
        LossKind::SquaredError => 1,
    }
}

/// Everything a run needs, with all defaults filled in.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub metrics: RugosityConfig,
}

pub fn resolve(mut cfg: ExperimentConfig) -> Result<Resolved> {
    let splits = load_splits(&cfg.dataset)?;
    let loss = resolve_loss(&cfg, &splits);
    let mut train = cfg.train.resolve();
    let metrics = cfg.rugosity.resolve(&splits.train);
    train.metrics = Some(metrics.clone());
    train.validate()?;
    cfg.loss = Some(loss);
    cfg.train = TrainSection::from_config(&train);
    cfg.rugosity = RugositySection::from_config(cfg.rugosity.estimator, &metrics);
    cfg.augmentation = cfg.augmentation.resolved(&splits.train);
    if let Some(sweep) = &mut cfg.sweep {
        if sweep.lambdas.is_none() && sweep.augmentations.is_none() {
            sweep.lambdas = Some(DEFAULT_LAMBDAS.to_vec());
        }
        if let Some(augs) = &mut sweep.augmentations {
            for a in augs.iter_mut() {
                *a = a.resolved(&splits.train);
            }
        }
        sweep.seeds.get_or_insert_with(|| vec![train.seed]);
    }
    Ok(Resolved {
        config: cfg,
        splits,
        loss,
        train,
        metrics,
    })
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join(RESOLVED_CONFIG), &cfg.to_json())
}

pub fn cmd_generate(cfg: ExperimentConfig) -> Result<PathBuf> {
    let splits = load_splits(&cfg.dataset)?;
    let out = cfg.output.dir.clone();
    let data_dir = out.join("dataset");
    write_dataset_dir(&data_dir, &cfg.dataset, &splits)?;
    write_resolved(&out, &cfg)?;
    Ok(data_dir)
}

fn init_network(section: &NetworkSection, input: usize, output: usize, seed: u64) -> Result<Network> {
    let mut widths = Vec::with_capacity(section.widths.len() + 2);
    widths.push(input);
    widths.extend(&section.widths);
    widths.push(output);
    Network::init(&widths, section.activation, &mut Rng::derive(seed, STREAM_INIT))
}

/// Result of one training run.
pub struct RunOutput {
    pub network: Network,
    pub trace: MetricTrace,
}

fn run_training(r: &Resolved, train_cfg: &TrainConfig, aug_section: &AugmentationSection) -> Result<RunOutput> {
    let out_dim = output_dim(&r.loss, &r.splits.train);
    let net = init_network(&r.config.network, r.splits.train.dim(), out_dim, train_cfg.seed)?;
    let aug = aug_section.build(&r.splits.train, train_cfg.seed, STREAM_AUG)?;
    if train_cfg.lambda > 0.0 && aug.is_none() {
        return Err(Error::config("train.lambda > 0 needs an augmentation section"));
    }
    let (network, trace) = train::train(&net, &r.splits.train, Some(&r.splits.test), train_cfg, aug.as_ref(), &r.loss)?;
    Ok(RunOutput { network, trace })
}

pub fn cmd_train(cfg: ExperimentConfig) -> Result<RunOutput> {
    let r = resolve(cfg)?;
    let out = r.config.output.dir.clone();
    let run = run_training(&r, &r.train, &r.config.augmentation)?;
    ensure_dir(&out)?;
    write_text(&out.join("trace.csv"), &run.trace.to_csv())?;
    run.network.save(out.join("network.txt"))?;
    write_resolved(&out, &r.config)?;
    Ok(run)
}

fn check_estimator(kind: EstimatorKind, net: &Network) -> Result<EstimatorKind> {
    match (kind, net.is_piecewise()) {
        (EstimatorKind::Auto, true) => Ok(EstimatorKind::Piecewise),
        (EstimatorKind::Auto, false) => Ok(EstimatorKind::SmoothMc),
        (EstimatorKind::Piecewise, false) => Err(Error::config(format!(
            "piecewise estimator requested for a {} network",
            net.hidden_activation()
        ))),
        (EstimatorKind::SmoothMc | EstimatorKind::SmoothDirect, true) => Err(Error::config(
            "smooth estimator requested for a piecewise-affine network",
        )),
        (k, _) => Ok(k),
    }
}

fn rugosity_report(kind: EstimatorKind, net: &Network, ds: &Dataset, cfg: &RugosityConfig) -> Result<RugosityReport> {
    match kind {
        EstimatorKind::Piecewise => rugosity::rugosity_piecewise(net, ds, cfg),
        EstimatorKind::SmoothMc => rugosity::rugosity_smooth_mc(net, ds, cfg),
        EstimatorKind::SmoothDirect => rugosity::rugosity_smooth_direct(net, ds, cfg),
        EstimatorKind::Auto => unreachable!("resolved by check_estimator"),
    }
}

/// Measurement rows for both splits, as CSV.
pub fn measure_csv(r: &Resolved, net: &Network) -> Result<String> {
    let kind = check_estimator(r.config.rugosity.estimator, net)?;
    let aug_section = &r.config.augmentation;
    let mut out = String::from(RugosityReport::CSV_HEADER);
    out.push('\n');
    for (split, ds, stream) in [
        ("train", &r.splits.train, STREAM_AUG),
        ("test", &r.splits.test, STREAM_AUG_TEST),
    ] {
        for p in [1, 2] {
            let cfg = RugosityConfig { p, ..r.metrics.clone() };
            let rep = rugosity_report(kind, net, ds, &cfg)?;
            let _ = writeln!(out, "{}", rep.renamed(format!("c_tilde_{split}")).csv_row());
        }
        let aug = match aug_section.kind {
            AugmentationChoice::None | AugmentationChoice::Flip => None,
            _ => aug_section.build(ds, r.train.seed, stream)?,
        };
        if let (Some(aug), true) = (aug, net.is_piecewise()) {
            let rep = rugosity::c_hat(net, ds, &aug)?;
            let pairs = (ds.len() * aug.m()).max(1) as f64;
            let per_pair = RugosityReport {
                value: rep.value / pairs,
                ..rep.clone()
            };
            let _ = writeln!(out, "{}", rep.renamed(format!("c_hat_{split}")).csv_row());
            let _ = writeln!(out, "{}", per_pair.renamed(format!("c_hat_per_pair_{split}")).csv_row());
        }
        let j = rugosity::jacobian_norm(net, ds)?;
        let _ = writeln!(out, "{}", j.renamed(format!("jacobian_norm_{split}")).csv_row());
    }
    Ok(out)
}

pub fn cmd_measure(cfg: ExperimentConfig, network: &Path, rescale: Option<f64>) -> Result<String> {
    let r = resolve(cfg)?;
    let mut net = Network::load(network)?;
    if let Some(alpha) = rescale {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::arg(format!("rescale factor must be positive, got {alpha}")));
        }
        net.scale_output(alpha);
    }
    let csv = measure_csv(&r, &net)?;
    let out = r.config.output.dir.clone();
    ensure_dir(&out)?;
    write_text(&out.join("measure.csv"), &csv)?;
    write_resolved(&out, &r.config)?;
    Ok(csv)
}

pub fn cmd_bound(cfg: ExperimentConfig, network: &Path) -> Result<augment::BoundReport> {
    let r = resolve(cfg)?;
    let net = Network::load(network)?;
    let aug = match r.config.augmentation.kind {
        AugmentationChoice::None => {
            return Err(Error::config("bound needs an augmentation section"));
        }
        _ => r
            .config
            .augmentation
            .build(&r.splits.train, r.train.seed, STREAM_AUG)?
            .expect("augmentation configured"),
    };
    if !aug.is_continuous() {
        return Err(Error::NonContinuous(format!("{:?} augmentation", AugmentKind::Flip)));
    }
    let report = augment::theorem1_bound(&net, &r.splits.train, &aug, &r.loss)?;
    let out = r.config.output.dir.clone();
    ensure_dir(&out)?;
    let mut json = report.to_json();
    json.push('\n');
    write_text(&out.join("bound.json"), &json)?;
    write_resolved(&out, &r.config)?;
    if report.residual_min < -1e-9 {
        return Err(Error::BoundViolation {
            min_residual: report.residual_min,
        });
    }
    Ok(report)
}

pub const SWEEP_HEADER: &str =
    "setting,lambda,augmentation,seed,epoch,train_loss,train_acc,test_acc,rugosity_train,rugosity_test,jacobian_norm,c_hat";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn sweep_row(setting: &str, lambda: f64, aug: &str, seed: &str, row: &MetricRow) -> String {
    format!(
        "{setting},{},{aug},{seed},{},{},{},{},{},{},{},{}",
        fmt_f64(lambda),
        row.epoch,
        fmt_f64(row.train_loss),
        opt(row.train_acc),
        opt(row.test_acc),
        fmt_f64(row.rugosity_train),
        opt(row.rugosity_test),
        fmt_f64(row.jacobian_norm),
        opt(row.c_hat)
    )
}

/// Median of the finite values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn median_row(rows: &[&MetricRow]) -> MetricRow {
    let med = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        median(&vals)
    };
    MetricRow {
        epoch: rows.first().map_or(0, |r| r.epoch),
        train_loss: med(&|r| Some(r.train_loss)).unwrap_or(f64::NAN),
        train_acc: med(&|r| r.train_acc),
        test_acc: med(&|r| r.test_acc),
        rugosity_train: med(&|r| Some(r.rugosity_train)).unwrap_or(f64::NAN),
        rugosity_test: med(&|r| r.rugosity_test),
        jacobian_norm: med(&|r| Some(r.jacobian_norm)).unwrap_or(f64::NAN),
        c_hat: med(&|r| r.c_hat),
        wall_ms: 0,
    }
}

/// Setting name with path-hostile characters replaced.
fn run_dir_name(setting: &str) -> String {
    setting
        .chars()
        .map(|c| match c {
            '|' => '_',
            ':' | '=' => '-',
            c => c,
        })
        .collect()
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("RUGOSITY_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Error::config(format!("RUGOSITY_THREADS must be a positive integer, got {v:?}"))),
    }
}

pub struct SweepOutput {
    pub csv: String,
    /// `(setting, seed, final row)` in grid order.
    pub runs: Vec<(String, u64, MetricRow)>,
}

pub fn cmd_sweep(cfg: ExperimentConfig) -> Result<SweepOutput> {
    let mut cfg = cfg;
    cfg.sweep.get_or_insert_with(SweepSection::default);
    let r = resolve(cfg)?;
    let sweep = r.config.sweep.clone().expect("sweep section resolved");
    let lambdas = sweep.lambdas.clone().unwrap_or_else(|| vec![r.train.lambda]);
    let augs = sweep
        .augmentations
        .clone()
        .unwrap_or_else(|| vec![r.config.augmentation.clone()]);
    let seeds = sweep.seeds.clone().unwrap_or_else(|| vec![r.train.seed]);

    let mut settings = Vec::new();
    for aug in &augs {
        for &lambda in &lambdas {
            let name = format!("lambda={lambda}|aug={}", aug.label());
            settings.push((name, lambda, aug.clone()));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..settings.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let out = r.config.output.dir.clone();
    let run_job = |&(s, seed): &(usize, u64)| -> Result<MetricRow> {
        let (_, lambda, aug) = &settings[s];
        let train_cfg = TrainConfig {
            lambda: *lambda,
            seed,
            ..r.train.clone()
        };
        let run = run_training(&r, &train_cfg, aug)?;
        let dir = out.join("runs").join(format!("{}_seed{seed}", run_dir_name(&settings[s].0)));
        ensure_dir(&dir)?;
        write_text(&dir.join("trace.csv"), &run.trace.to_csv())?;
        run.network.save(dir.join("network.txt"))?;
        Ok(run.trace.last().cloned().expect("trace has a final row"))
    };
    let rows: Vec<MetricRow> = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?,
        None => jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>()?,
    };

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut runs = Vec::new();
    for (k, &(s, seed)) in jobs.iter().enumerate() {
        let (name, lambda, aug) = &settings[s];
        let _ = writeln!(csv, "{}", sweep_row(name, *lambda, &aug.label(), &seed.to_string(), &rows[k]));
        runs.push((name.clone(), seed, rows[k].clone()));
    }
    for (s, (name, lambda, aug)) in settings.iter().enumerate() {
        let group: Vec<&MetricRow> = jobs
            .iter()
            .zip(&rows)
            .filter(|((js, _), _)| *js == s)
            .map(|(_, row)| row)
            .collect();
        let _ = writeln!(csv, "{}", sweep_row(name, *lambda, &aug.label(), "median", &median_row(&group)));
    }
    ensure_dir(&out)?;
    write_text(&out.join("sweep.csv"), &csv)?;
    write_resolved(&out, &r.config)?;
    Ok(SweepOutput { csv, runs })
}

/// Entry point behind the binary.
pub fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config <path> is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(cli.seed, cli.out.as_deref(), cli.augment.as_deref())?;
    match cli.command {
        Command::Generate => {
            let dir = cmd_generate(cfg)?;
            println!("wrote {}", dir.display());
        }
        Command::Train => {
            let dir = cfg.output.dir.clone();
            let run = cmd_train(cfg)?;
            if let Some(row) = run.trace.last() {
                println!(
                    "epoch {} train_loss {} train_acc {}",
                    row.epoch,
                    fmt_f64(row.train_loss),
                    opt(row.train_acc)
                );
            }
            println!("wrote {}", dir.join("trace.csv").display());
        }
        Command::Measure { network, rescale } => {
            print!("{}", cmd_measure(cfg, &network, rescale)?);
        }
        Command::Bound { network } => {
            let rep = cmd_bound(cfg, &network)?;
            println!("{}", rep.to_json());
        }
        Command::Sweep => {
            print!("{}", cmd_sweep(cfg)?.csv);
        }
    }
    Ok(())
}

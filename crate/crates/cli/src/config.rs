//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! kind = "rate_sweep"            # rate_sweep | width_sweep | strength_sweep
//!                                # | entropy_report | nist_report | e2e_compare
//! name = "rates"                 # default: the kind
//! output_dir = "runs/rates"      # default: $SCATSENSE_OUT/<name>, else runs/<name>
//! rates = [0.05, 0.1]            # default [0.1]
//! seeds = [0, 1, 2]              # default [0]
//!
//! [dataset]
//! train_images = "data/mnist/train-images-idx3-ubyte"
//! train_labels = "data/mnist/train-labels-idx1-ubyte"
//! test_images = "data/mnist/t10k-images-idx3-ubyte"   # needed by sweeps and e2e_compare
//! test_labels = "data/mnist/t10k-labels-idx1-ubyte"
//! resize = [64, 64]              # default [64, 64]; [0, 0] keeps native size
//! train_size = 5000              # default 5000
//! test_size = 1000               # default 1000
//!
//! [scatter]
//! family = "scatnet_like"        # monte_like | scatnet_like | transfer_matrix
//! strengths = [0.0, 0.75]        # default [0.0, 0.75]
//! # seed = 7                     # default: the cell seed
//! # kernel_max_radius = 16       # default: width / 4
//!
//! [mask]
//! strategy = "full"              # full | a_central | b_interleaved
//! params = [32]                  # default []: the strategy's full-field value
//!
//! [train]
//! epochs = 20
//! batch_size = 32
//! learning_rate = 0.001
//! optimizer = "adam"             # adam | sgd
//! hidden = 256
//!
//! [noise]
//! # snr_db = 30.0                # default: noiseless
//!
//! [nist]
//! image_index = 0                # test-set image (train set when no test set)
//! image_size = 1000
//! rate = 1.0
//! quantization = "affine16"      # affine16 | median
//! include_runs = false
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use scatsense::decoder::{Optimizer, TrainConfig, TrainMode};
use scatsense::nist::Quantization;
use scatsense::patterns::{make_mask, FovStrategy, PATTERN_ORDER_LIMIT};
use scatsense::ScatterFamily;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SCATSENSE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RateSweep,
    WidthSweep,
    StrengthSweep,
    EntropyReport,
    NistReport,
    E2eCompare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::RateSweep => "rate_sweep",
            Self::WidthSweep => "width_sweep",
            Self::StrengthSweep => "strength_sweep",
            Self::EntropyReport => "entropy_report",
            Self::NistReport => "nist_report",
            Self::E2eCompare => "e2e_compare",
        }
    }

    fn needs_test_set(self) -> bool {
        matches!(
            self,
            Self::RateSweep | Self::WidthSweep | Self::StrengthSweep | Self::E2eCompare
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_resize")]
    pub resize: [usize; 2],
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_resize() -> [usize; 2] {
    [64, 64]
}
fn default_train_size() -> usize {
    5000
}
fn default_test_size() -> usize {
    1000
}

impl DatasetSpec {
    /// Target size, `None` when images keep their native size.
    pub fn resize_to(&self) -> Option<(usize, usize)> {
        match self.resize {
            [0, 0] => None,
            [w, h] => Some((w, h)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterSpec {
    #[serde(default = "default_family")]
    pub family: ScatterFamily,
    #[serde(default = "default_strengths")]
    pub strengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_max_radius: Option<usize>,
}

fn default_family() -> ScatterFamily {
    ScatterFamily::ScatnetLike
}
fn default_strengths() -> Vec<f64> {
    vec![0.0, 0.75]
}

impl Default for ScatterSpec {
    fn default() -> Self {
        Self {
            family: default_family(),
            strengths: default_strengths(),
            seed: None,
            kernel_max_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default = "default_strategy")]
    pub strategy: FovStrategy,
    #[serde(default)]
    pub params: Vec<usize>,
}

fn default_strategy() -> FovStrategy {
    FovStrategy::Full
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            params: Vec::new(),
        }
    }
}

impl MaskSpec {
    /// Parameter list to iterate; `[None]` when none are given.
    pub fn param_list(&self) -> Vec<Option<usize>> {
        if self.params.is_empty() {
            vec![None]
        } else {
            self.params.iter().map(|&p| Some(p)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    pub hidden: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            optimizer: OptimizerName::Adam,
            hidden: d.hidden,
        }
    }
}

impl TrainSpec {
    pub fn to_config(&self, seed: u64, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            optimizer: match self.optimizer {
                OptimizerName::Adam => Optimizer::adam(),
                OptimizerName::Sgd => Optimizer::Sgd,
            },
            mode,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NistSpec {
    pub image_index: usize,
    pub image_size: usize,
    pub rate: f64,
    pub quantization: Quantization,
    pub include_runs: bool,
}

impl Default for NistSpec {
    fn default() -> Self {
        Self {
            image_index: 0,
            image_size: 1000,
            rate: 1.0,
            quantization: Quantization::Affine16,
            include_runs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub scatter: ScatterSpec,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub nist: NistSpec,
}

fn default_rates() -> Vec<f64> {
    vec![0.1]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.name())
    }

    /// Output directory: explicit, else under `$SCATSENSE_OUT`, else `runs/`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.name())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Make relative dataset paths absolute against `base`.
    pub fn anchor_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.train_images);
        fix(&mut self.dataset.train_labels);
        if let Some(p) = self.dataset.test_images.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dataset.test_labels.as_mut() {
            fix(p);
        }
    }
}

/// One violated constraint, named by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} invalid field(s):\n  {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<FieldError>),
}

/// Parse TOML text; `path` is only used in messages.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e: toml::de::Error| {
        let (line, column) = e
            .span()
            .map(|s| line_col(text, s.start))
            .unwrap_or((1, 1));
        ConfigError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Read, parse and validate a config file. Relative dataset paths are
/// taken relative to the current directory.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg = parse_config(&text, path)?;
    check(&cfg)?;
    Ok(cfg)
}

/// Every constraint violation in `cfg`.
pub fn check(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let mut errs = Vec::new();
    let mut err = |field: &str, message: String| {
        errs.push(FieldError {
            field: field.to_string(),
            message,
        })
    };

    let ds = &cfg.dataset;
    let mut paths = vec![
        ("dataset.train_images", Some(&ds.train_images)),
        ("dataset.train_labels", Some(&ds.train_labels)),
    ];
    if cfg.kind.needs_test_set() || ds.test_images.is_some() || ds.test_labels.is_some() {
        paths.push(("dataset.test_images", ds.test_images.as_ref()));
        paths.push(("dataset.test_labels", ds.test_labels.as_ref()));
    }
    for (field, p) in paths {
        match p {
            None => err(field, format!("required for {}", cfg.kind.name())),
            Some(p) if !p.is_file() => err(field, format!("{} does not exist", p.display())),
            Some(_) => {}
        }
    }
    if ds.resize.iter().filter(|&&d| d == 0).count() == 1 {
        err("dataset.resize", format!("{:?}: both or neither dimension may be 0", ds.resize));
    }
    if ds.train_size == 0 {
        err("dataset.train_size", "must be at least 1".into());
    }
    if cfg.kind.needs_test_set() && ds.test_size == 0 {
        err("dataset.test_size", "must be at least 1".into());
    }

    if cfg.rates.is_empty() {
        err("rates", "list is empty".into());
    }
    for (i, &r) in cfg.rates.iter().enumerate() {
        if !(r > 0.0 && r <= 1.0) {
            err(&format!("rates[{i}]"), format!("{r} outside (0, 1]"));
        }
    }
    if cfg.seeds.is_empty() {
        err("seeds", "list is empty".into());
    }
    if cfg.scatter.strengths.is_empty() {
        err("scatter.strengths", "list is empty".into());
    }
    for (i, &s) in cfg.scatter.strengths.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            err(&format!("scatter.strengths[{i}]"), format!("{s} outside [0, 1]"));
        }
    }
    if cfg.scatter.kernel_max_radius == Some(0) {
        err("scatter.kernel_max_radius", "must be at least 1".into());
    }

    let (w, h) = ds.resize_to().unwrap_or((28, 28));
    if cfg.mask.strategy == FovStrategy::Full && !cfg.mask.params.is_empty() {
        err("mask.params", "the full strategy takes no parameter".into());
    }
    if w > 0 && h > 0 {
        for (i, &p) in cfg.mask.params.iter().enumerate() {
            if cfg.mask.strategy != FovStrategy::Full {
                if let Err(e) = make_mask(cfg.mask.strategy, w, h, Some(p)) {
                    err(&format!("mask.params[{i}]"), e.to_string());
                }
            }
        }
    }

    let t = &cfg.train;
    if t.epochs == 0 {
        err("train.epochs", "must be at least 1".into());
    }
    if t.batch_size == 0 {
        err("train.batch_size", "must be at least 1".into());
    }
    if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
        err("train.learning_rate", format!("{} must be positive", t.learning_rate));
    }
    if t.hidden == 0 {
        err("train.hidden", "must be at least 1".into());
    }
    if let Some(snr) = cfg.noise.snr_db {
        if !snr.is_finite() {
            err("noise.snr_db", "must be finite".into());
        }
    }

    let n = &cfg.nist;
    if cfg.kind == ExperimentKind::NistReport {
        if n.image_size == 0 {
            err("nist.image_size", "must be at least 1".into());
        } else if (n.image_size * n.image_size).next_power_of_two() > 1 << PATTERN_ORDER_LIMIT {
            err(
                "nist.image_size",
                format!("{0}x{0} exceeds the 2^{PATTERN_ORDER_LIMIT} pattern limit", n.image_size),
            );
        }
        if !(n.rate > 0.0 && n.rate <= 1.0) {
            err("nist.rate", format!("{} outside (0, 1]", n.rate));
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(errs))
    }
}

//! Experiment configuration: one `key = value` per line, `#` comments.
//!
//! | key | default |
//! |---|---|
//! | `seed` | 0 |
//! | `data.root` | unset (generate into the run directory) |
//! | `data.seed`, `data.n_identities`, `data.images_per_identity` | 0, 50, 20 |
//! | `data.height`, `data.width` | 96, 32 |
//! | `model.downsample`, `model.backbone_channels`, `model.reduced_channels` | 8, 64, 32 |
//! | `train.lr`, `train.decay_epoch`, `train.decay_factor`, `train.epochs` | 0.2, 20, 0.1, 30 |
//! | `train.p`, `train.k`, `train.steps_per_epoch` | 4, 4, 0 (= train images / batch) |
//! | `train.augment` | true |
//! | `loss.lambda`, `loss.margin`, `mask.tau` | 0.1, 0.3, 0.5 |
//! | `variant` | `full` (`g`, `w`, `d`) |
//! | `method` | `esa` (`baseline`: global pooling, triplet only) |
//! | `eval.distance`, `eval.max_rank` | `extended`, 20 |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::align::{DistanceKind, UnconfidentSource};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synthdata::{SynthConfig, N_REGIONS};
use crate::{Error, Result};

/// Environment variable overriding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ESA_REID_OUT";

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, found `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Table-4 style ablations of the unconfident pseudo-region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Fixed-threshold entropy mask.
    #[default]
    Full,
    /// Global average feature in place of the masked one.
    G,
    /// No unconfident term.
    W,
    /// Median (per-image) threshold.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::G, Variant::W, Variant::D];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "g" => Ok(Variant::G),
            "w" => Ok(Variant::W),
            "d" => Ok(Variant::D),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::G => "g",
            Variant::W => "w",
            Variant::D => "d",
        }
    }

    pub fn source(self, tau: f64) -> UnconfidentSource {
        match self {
            Variant::Full => UnconfidentSource::Fixed(tau),
            Variant::G => UnconfidentSource::Global,
            Variant::W => UnconfidentSource::Omitted,
            Variant::D => UnconfidentSource::Dynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    #[default]
    Esa,
    /// Globally pooled, normalized reduced features with batch-hard triplet
    /// loss only.
    Baseline,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "esa" => Ok(Method::Esa),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Esa => "esa",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    /// 0 means one pass worth of images per epoch.
    pub steps_per_epoch: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            decay_epoch: 20,
            decay_factor: 0.1,
            epochs: 30,
            p: 4,
            k: 4,
            steps_per_epoch: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub data: SynthConfig,
    pub downsample: usize,
    pub backbone_channels: usize,
    pub reduced_channels: usize,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub tau: f64,
    pub variant: Variant,
    pub method: Method,
    pub distance: DistanceKind,
    pub max_rank: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            data_root: None,
            data: SynthConfig::default(),
            downsample: model.downsample,
            backbone_channels: model.backbone_channels,
            reduced_channels: model.reduced_channels,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            tau: 0.5,
            variant: Variant::Full,
            method: Method::Esa,
            distance: DistanceKind::Extended,
            max_rank: 20,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}`: expected a boolean, found `{value}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one override. Does not re-validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "data.root" => self.data_root = Some(PathBuf::from(value)),
            "data.seed" => self.data.seed = parse_num(key, value)?,
            "data.n_identities" => self.data.n_identities = parse_num(key, value)?,
            "data.images_per_identity" => self.data.images_per_identity = parse_num(key, value)?,
            "data.height" => self.data.height = parse_num(key, value)?,
            "data.width" => self.data.width = parse_num(key, value)?,
            "model.downsample" => self.downsample = parse_num(key, value)?,
            "model.backbone_channels" => self.backbone_channels = parse_num(key, value)?,
            "model.reduced_channels" => self.reduced_channels = parse_num(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.decay_epoch" => self.train.decay_epoch = parse_num(key, value)?,
            "train.decay_factor" => self.train.decay_factor = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.p" => self.train.p = parse_num(key, value)?,
            "train.k" => self.train.k = parse_num(key, value)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse_num(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "loss.lambda" => self.weights.lambda = parse_num(key, value)?,
            "loss.margin" => self.weights.margin = parse_num(key, value)?,
            "mask.tau" => self.tau = parse_num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "method" => self.method = Method::parse(value)?,
            "eval.distance" => {
                self.distance = match value {
                    "extended" => DistanceKind::Extended,
                    "aligned" => DistanceKind::Aligned,
                    _ => return Err(Error::InvalidConfig(format!("unknown distance `{value}`"))),
                }
            }
            "eval.max_rank" => self.max_rank = parse_num(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model().validate()?;
        self.weights.validate()?;
        let t = &self.train;
        if t.k < 2 || t.p < 2 {
            return Err(Error::InvalidConfig("batches need P ≥ 2 identities and K ≥ 2 images".into()));
        }
        if t.p > self.data.train_identities() {
            return Err(Error::InvalidConfig(format!(
                "P = {} exceeds the {} training identities",
                t.p,
                self.data.train_identities()
            )));
        }
        if !(t.lr > 0.0 && t.decay_factor > 0.0) || t.epochs == 0 {
            return Err(Error::InvalidConfig("learning rate, decay factor and epochs must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidThreshold(self.tau));
        }
        if self.max_rank == 0 {
            return Err(Error::InvalidConfig("eval.max_rank must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_height: self.data.height,
            input_width: self.data.width,
            downsample: self.downsample,
            backbone_channels: self.backbone_channels,
            reduced_channels: self.reduced_channels,
            n_regions: N_REGIONS,
            num_identities: self.data.train_identities(),
            seed: self.seed,
        }
    }

    pub fn source(&self) -> UnconfidentSource {
        self.variant.source(self.tau)
    }

    /// Canonical `key = value` text; parsing it yields this config again.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        s.push_str(&self.body_text());
        s
    }

    fn body_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(root) = &self.data_root {
            kv("data.root", root.display().to_string());
        }
        kv("data.seed", self.data.seed.to_string());
        kv("data.n_identities", self.data.n_identities.to_string());
        kv("data.images_per_identity", self.data.images_per_identity.to_string());
        kv("data.height", self.data.height.to_string());
        kv("data.width", self.data.width.to_string());
        kv("model.downsample", self.downsample.to_string());
        kv("model.backbone_channels", self.backbone_channels.to_string());
        kv("model.reduced_channels", self.reduced_channels.to_string());
        kv("train.lr", format!("{:?}", self.train.lr));
        kv("train.decay_epoch", self.train.decay_epoch.to_string());
        kv("train.decay_factor", format!("{:?}", self.train.decay_factor));
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.p", self.train.p.to_string());
        kv("train.k", self.train.k.to_string());
        kv("train.steps_per_epoch", self.train.steps_per_epoch.to_string());
        kv("train.augment", self.train.augment.to_string());
        kv("loss.lambda", format!("{:?}", self.weights.lambda));
        kv("loss.margin", format!("{:?}", self.weights.margin));
        kv("mask.tau", format!("{:?}", self.tau));
        kv("variant", self.variant.as_str().into());
        kv("method", self.method.as_str().into());
        let distance = match self.distance {
            DistanceKind::Extended => "extended",
            DistanceKind::Aligned => "aligned",
        };
        kv("eval.distance", distance.into());
        kv("eval.max_rank", self.max_rank.to_string());
        s
    }

    /// First 12 hex digits of the SHA-256 of everything except the seed.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.body_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.seed)
    }
}

/// `explicit`, else `$ESA_REID_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

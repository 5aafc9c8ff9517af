//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    Spatial,
    Winograd,
    Joint,
}

impl Regularizer {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Regularizer::None,
            "sd" => Regularizer::Spatial,
            "wd" => Regularizer::Winograd,
            "joint" => Regularizer::Joint,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Spatial => "sd",
            Regularizer::Winograd => "wd",
            Regularizer::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Spatial,
    Winograd,
}

impl Engine {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(Engine::Spatial),
            "winograd" => Some(Engine::Winograd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Engine::Spatial => "spatial",
            Engine::Winograd => "winograd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub seed: u64,
    pub optimizer: String,
    pub lr: f64,
    pub batch: usize,
    /// Plain (unregularized) epochs before the regularized phase.
    pub pretrain_epochs: u64,
    pub epochs: u64,
    pub regularizer: Regularizer,
    pub s_wd: f64,
    pub s_sd: f64,
    pub alpha: f64,
    pub zeta_init: f64,
    pub zeta_lr: f64,
    pub zeta_learnable: bool,
    pub delta: f64,
    pub dithered: bool,
    pub finetune_steps: u64,
    pub finetune_lr: f64,
    pub sweep_deltas: Vec<f64>,
    pub engine: Engine,
    pub include_transforms: bool,
    pub log_every: u64,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "arch",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "seed",
    "optimizer",
    "lr",
    "batch",
    "pretrain_epochs",
    "epochs",
    "regularizer",
    "swd",
    "ssd",
    "alpha",
    "zeta_init",
    "zeta_lr",
    "zeta_learnable",
    "delta",
    "quant",
    "finetune_steps",
    "finetune_lr",
    "sweep_deltas",
    "engine",
    "include_transforms",
    "log_every",
    "out",
];

/// Parses `key = value` lines; `#` starts a comment. Unknown and repeated
/// keys are errors.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(CliError::Config(format!("line {}: unknown key `{k}`", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(map)
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`"))),
    }
}

fn flag(map: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match map.get(key).map(String::as_str) {
        None => Ok(default),
        Some("true" | "1" | "yes") => Ok(true),
        Some("false" | "0" | "no") => Ok(false),
        Some(v) => Err(CliError::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Builds a configuration from parsed keys; paths are resolved against `base`.
    pub fn from_map(map: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let path = |k: &str, default: &str| base.join(map.get(k).map_or(default, String::as_str));
        let seed = map
            .get("seed")
            .ok_or_else(|| CliError::Config("`seed` is required".into()))?
            .parse()
            .map_err(|_| CliError::Config("`seed` must be an unsigned integer".into()))?;
        let regularizer = match map.get("regularizer") {
            None => Regularizer::Joint,
            Some(v) => Regularizer::parse(v).ok_or_else(|| CliError::Config(format!("`regularizer`: unknown `{v}`")))?,
        };
        let engine = match map.get("engine") {
            None => Engine::Spatial,
            Some(v) => Engine::parse(v).ok_or_else(|| CliError::Config(format!("`engine`: unknown `{v}`")))?,
        };
        let dithered = match map.get("quant").map(String::as_str) {
            None | Some("duq") => true,
            Some("uq") => false,
            Some(v) => return Err(CliError::Config(format!("`quant`: expected uq or duq, got `{v}`"))),
        };
        let sweep_deltas = match map.get("sweep_deltas") {
            None => vec![0.005, 0.01, 0.02],
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("`sweep_deltas`: bad value `{s}`"))))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            arch: map.get("arch").cloned().unwrap_or_else(|| "paper-net".into()),
            train_images: path("train_images", "data/mnist/train-images-idx3-ubyte.gz"),
            train_labels: path("train_labels", "data/mnist/train-labels-idx1-ubyte.gz"),
            test_images: path("test_images", "data/mnist/test-images-idx3-ubyte.gz"),
            test_labels: path("test_labels", "data/mnist/test-labels-idx1-ubyte.gz"),
            seed,
            optimizer: map.get("optimizer").cloned().unwrap_or_else(|| "adam".into()),
            lr: num(map, "lr", 1e-3)?,
            batch: num(map, "batch", 64)?,
            pretrain_epochs: num(map, "pretrain_epochs", 2)?,
            epochs: num(map, "epochs", 10)?,
            regularizer,
            s_wd: num(map, "swd", 70.0)?,
            s_sd: num(map, "ssd", 70.0)?,
            alpha: num(map, "alpha", 1.0)?,
            zeta_init: num(map, "zeta_init", 10.0)?,
            zeta_lr: num(map, "zeta_lr", 1e-4)?,
            zeta_learnable: flag(map, "zeta_learnable", true)?,
            delta: num(map, "delta", 0.01)?,
            dithered,
            finetune_steps: num(map, "finetune_steps", 200)?,
            finetune_lr: num(map, "finetune_lr", 1e-4)?,
            sweep_deltas,
            engine,
            include_transforms: flag(map, "include_transforms", false)?,
            log_every: num(map, "log_every", 100)?,
            out: path("out", "out"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_map(&parse_kv(&text)?, base)
    }

    /// Defaults with only the seed set; paths relative to the working directory.
    pub fn with_seed(seed: u64) -> Self {
        let mut m = BTreeMap::new();
        m.insert("seed".to_string(), seed.to_string());
        Self::from_map(&m, Path::new("")).expect("defaults are valid")
    }

    /// Checks ranges and the existence of the dataset files.
    pub fn validate(&self, needs_data: bool) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.arch != "paper-net" {
            return bad(format!("unknown arch `{}`", self.arch));
        }
        if self.optimizer != "adam" && self.optimizer != "sgd" {
            return bad(format!("unknown optimizer `{}`", self.optimizer));
        }
        for (k, v) in [("lr", self.lr), ("zeta_lr", self.zeta_lr), ("finetune_lr", self.finetune_lr), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be positive, got {v}"));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("`delta` must be positive, got {}", self.delta));
        }
        if let Some(d) = self.sweep_deltas.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return bad(format!("`sweep_deltas` entries must be positive, got {d}"));
        }
        for (k, v) in [("swd", self.s_wd), ("ssd", self.s_sd)] {
            if !(0.0..=100.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0, 100], got {v}"));
            }
        }
        if !self.zeta_init.is_finite() {
            return bad("`zeta_init` must be finite".into());
        }
        if self.batch == 0 {
            return bad("`batch` must be positive".into());
        }
        if needs_data {
            for p in [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels] {
                if !p.is_file() {
                    return bad(format!("dataset file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    /// Effective configuration as `key=value` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let deltas: Vec<String> = self.sweep_deltas.iter().map(f64::to_string).collect();
        vec![
            ("arch", self.arch.clone()),
            ("train_images", self.train_images.display().to_string()),
            ("train_labels", self.train_labels.display().to_string()),
            ("test_images", self.test_images.display().to_string()),
            ("test_labels", self.test_labels.display().to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.clone()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("regularizer", self.regularizer.name().into()),
            ("swd", self.s_wd.to_string()),
            ("ssd", self.s_sd.to_string()),
            ("alpha", self.alpha.to_string()),
            ("zeta_init", self.zeta_init.to_string()),
            ("zeta_lr", self.zeta_lr.to_string()),
            ("zeta_learnable", self.zeta_learnable.to_string()),
            ("delta", self.delta.to_string()),
            ("quant", if self.dithered { "duq" } else { "uq" }.into()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("sweep_deltas", deltas.join(",")),
            ("engine", self.engine.name().into()),
            ("include_transforms", self.include_transforms.to_string()),
            ("log_every", self.log_every.to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    /// `# key=value` header lines for CSV outputs.
    pub fn csv_header(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }
}

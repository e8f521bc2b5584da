//! Flat `key=value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bimac::data::{DataSpec, SceneSpec, DEFAULT_BLUR_SIGMA};
use bimac::train::TrainConfig;
use bimac::{Ablation, NetConfig};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("net.bands", "4", "spectral bands of LRMS/HRMS"),
    ("net.base_channels", "32", "feature width at full resolution"),
    ("net.depth", "3", "U-Net levels including the bottleneck"),
    ("net.blocks", "1", "residual blocks per level"),
    ("net.k", "3", "adaptive kernel size (odd)"),
    ("net.alpha", "2", "routing threshold multiplier"),
    ("net.hidden", "0", "focused embedding width, 0 = max(C/2, 8)"),
    (
        "net.ablation",
        "full",
        "full | no_focused | no_compact | no_camg | no_lrk | shared_weights",
    ),
    ("train.lr0", "0.0006", "initial Adam learning rate"),
    ("train.decay", "0.8", "learning-rate decay factor"),
    ("train.period", "200", "epochs between decays"),
    ("train.batch", "32", "mini-batch size"),
    ("train.epochs", "400", "training epochs"),
    ("train.iterations", "0", "optimiser step cap, 0 = none"),
    ("train.seed", "0", "seed for initialisation, shuffling and synthetic data"),
    ("data.dir", "", "dataset directory; empty = synthesise in memory"),
    ("data.count", "64", "synthetic training samples"),
    ("data.val_count", "8", "synthetic validation samples"),
    ("data.h", "64", "PAN/GT height"),
    ("data.w", "64", "PAN/GT width"),
    ("data.blur_sigma", "1.7", "Gaussian blur before 4x decimation"),
    ("data.pan_weights", "", "comma-separated band weights for PAN; empty = uniform"),
    ("data.blobs", "6", "smooth blobs per synthetic scene"),
    ("data.shapes", "8", "hard-edged shapes per synthetic scene"),
    ("out.dir", "out", "artifact directory"),
];

/// `--help` footer listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key=value, '#' starts a comment):\n");
    for (k, d, doc) in KEYS {
        let _ = writeln!(s, "  {k:<20} default {:<8} {doc}", if d.is_empty() { "\"\"" } else { d });
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {n}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: None,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub blocks: usize,
    pub k: usize,
    pub alpha: f64,
    pub hidden: usize,
    pub ablation: Ablation,
    pub lr0: f64,
    pub decay: f64,
    pub period: usize,
    pub batch: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub seed: u64,
    pub data_dir: String,
    pub count: usize,
    pub val_count: usize,
    pub h: usize,
    pub w: usize,
    pub blur_sigma: f64,
    pub pan_weights: Vec<f64>,
    pub blobs: usize,
    pub shapes: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            bands: 0,
            base_channels: 0,
            depth: 0,
            blocks: 0,
            k: 0,
            alpha: 0.0,
            hidden: 0,
            ablation: Ablation::Full,
            lr0: 0.0,
            decay: 0.0,
            period: 0,
            batch: 0,
            epochs: 0,
            iterations: 0,
            seed: 0,
            data_dir: String::new(),
            count: 0,
            val_count: 0,
            h: 0,
            w: 0,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            pan_weights: Vec::new(),
            blobs: 0,
            shapes: 0,
            out_dir: String::new(),
        };
        for (k, d, _) in KEYS {
            c.set(k, d).expect("default values parse");
        }
        c
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| err(format!("{key}: cannot parse {v:?}")))
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "net.bands" => self.bands = num(key, v)?,
            "net.base_channels" => self.base_channels = num(key, v)?,
            "net.depth" => self.depth = num(key, v)?,
            "net.blocks" => self.blocks = num(key, v)?,
            "net.k" => self.k = num(key, v)?,
            "net.alpha" => self.alpha = num(key, v)?,
            "net.hidden" => self.hidden = num(key, v)?,
            "net.ablation" => self.ablation = v.parse().map_err(|e| err(format!("{key}: {e}")))?,
            "train.lr0" => self.lr0 = num(key, v)?,
            "train.decay" => self.decay = num(key, v)?,
            "train.period" => self.period = num(key, v)?,
            "train.batch" => self.batch = num(key, v)?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.iterations" => self.iterations = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "data.dir" => self.data_dir = v.to_string(),
            "data.count" => self.count = num(key, v)?,
            "data.val_count" => self.val_count = num(key, v)?,
            "data.h" => self.h = num(key, v)?,
            "data.w" => self.w = num(key, v)?,
            "data.blur_sigma" => self.blur_sigma = num(key, v)?,
            "data.pan_weights" => {
                self.pan_weights = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|t| num(key, t.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "data.blobs" => self.blobs = num(key, v)?,
            "data.shapes" => self.shapes = num(key, v)?,
            "out.dir" => self.out_dir = v.to_string(),
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "net.bands" => self.bands.to_string(),
            "net.base_channels" => self.base_channels.to_string(),
            "net.depth" => self.depth.to_string(),
            "net.blocks" => self.blocks.to_string(),
            "net.k" => self.k.to_string(),
            "net.alpha" => self.alpha.to_string(),
            "net.hidden" => self.hidden.to_string(),
            "net.ablation" => self.ablation.name().to_string(),
            "train.lr0" => self.lr0.to_string(),
            "train.decay" => self.decay.to_string(),
            "train.period" => self.period.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.iterations" => self.iterations.to_string(),
            "train.seed" => self.seed.to_string(),
            "data.dir" => self.data_dir.clone(),
            "data.count" => self.count.to_string(),
            "data.val_count" => self.val_count.to_string(),
            "data.h" => self.h.to_string(),
            "data.w" => self.w.to_string(),
            "data.blur_sigma" => self.blur_sigma.to_string(),
            "data.pan_weights" => list(&self.pan_weights),
            "data.blobs" => self.blobs.to_string(),
            "data.shapes" => self.shapes.to_string(),
            "out.dir" => self.out_dir.clone(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of the defaults. Later lines win.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |mut e: ConfigError| {
                e.line = Some(n + 1);
                e
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(err(format!("expected key=value, got {line:?}"))))?;
            c.set(k.trim(), v.trim()).map_err(at)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| err(format!("override {s:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key in table order; parsing the result reproduces `self`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            bands: self.bands,
            base_channels: self.base_channels,
            depth: self.depth,
            blocks: self.blocks,
            kernel_size: self.k,
            alpha: self.alpha,
            hidden: self.hidden,
            ablation: self.ablation,
            ..NetConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            decay: self.decay,
            period: self.period,
            batch: self.batch,
            epochs: self.epochs,
            iterations: self.iterations,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn data(&self) -> DataSpec {
        DataSpec {
            bands: self.bands,
            height: self.h,
            width: self.w,
            blur_sigma: self.blur_sigma,
            pan_weights: self.pan_weights.clone(),
            scene: SceneSpec {
                blobs: self.blobs,
                shapes: self.shapes,
            },
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        (!self.data_dir.is_empty()).then(|| PathBuf::from(&self.data_dir))
    }
}

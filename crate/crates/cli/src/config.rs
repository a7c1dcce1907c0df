//! Flat `key = value` run configuration. Blank lines and lines starting with
//! `#` are ignored; unknown or repeated keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use arl_core::data::{generate_synthetic, load_manifest};
use arl_core::{ArlError, Dataset, LossWeights, Mode, Result, TrainConfig};

/// Where the images come from: a manifest on disk or the built-in generator.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        seed: u64,
        classes: usize,
        per_class: usize,
        side: usize,
    },
    Manifest(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                seed,
                classes,
                per_class,
                side,
            } => generate_synthetic(*seed, *classes, *per_class, *side),
            DataSource::Manifest(p) => load_manifest(p),
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 7,
            classes: 32,
            per_class: 30,
            side: 32,
        }
    }
}

/// `synthetic:SEED,CLASSES,PER_CLASS,SIDE` or a manifest path.
impl FromStr for DataSource {
    type Err = ArlError;

    fn from_str(s: &str) -> Result<Self> {
        let Some(spec) = s.strip_prefix("synthetic:") else {
            return Ok(DataSource::Manifest(PathBuf::from(s)));
        };
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let bad = || ArlError::Config(format!("synthetic data spec `{}` is not SEED,CLASSES,PER_CLASS,SIDE", s));
        if parts.len() != 4 {
            return Err(bad());
        }
        let n = |i: usize| parts[i].parse::<u64>().map_err(|_| bad());
        Ok(DataSource::Synthetic {
            seed: n(0)?,
            classes: n(1)? as usize,
            per_class: n(2)? as usize,
            side: n(3)? as usize,
        })
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic {
                seed,
                classes,
                per_class,
                side,
            } => write!(f, "synthetic:{},{},{},{}", seed, classes, per_class, side),
            DataSource::Manifest(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = ArlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(ArlError::Config(format!("precision must be f32 or f64, got `{}`", s))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: DataSource::default(),
            out: PathBuf::from("run"),
            precision: Precision::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ArlError::Config(format!("`{}`: cannot parse `{}`", key, value)))
}

fn parse_mode(value: &str) -> Result<Mode> {
    match value {
        "supervised" => Ok(Mode::Supervised),
        "unsupervised" => Ok(Mode::Unsupervised),
        _ => Err(ArlError::Config(format!(
            "mode must be supervised or unsupervised, got `{}`",
            value
        ))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "mode",
        "data",
        "out",
        "precision",
        "way",
        "shot",
        "queries",
        "m",
        "pairs",
        "p",
        "lr",
        "lr_halve_every",
        "iterations",
        "seed",
        "alpha",
        "beta",
        "gamma",
        "abs_feedback",
        "rel_feedback",
        "detach_feedback",
        "channels",
        "hidden",
        "rel_bins",
        "eval_episodes",
        "log_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "mode" => t.mode = parse_mode(value)?,
            "data" => self.data = value.parse()?,
            "out" => self.out = PathBuf::from(value),
            "precision" => self.precision = value.parse()?,
            "way" => t.way = parse(key, value)?,
            "shot" => t.shot = parse(key, value)?,
            "queries" => t.queries = parse(key, value)?,
            "m" => t.m = parse(key, value)?,
            "pairs" => t.pairs = parse(key, value)?,
            "p" => t.p = parse(key, value)?,
            "lr" => t.lr.base = parse(key, value)?,
            "lr_halve_every" => t.lr.halve_every = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "alpha" => t.weights.alpha = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "gamma" => t.weights.gamma = parse(key, value)?,
            "abs_feedback" => t.abs_feedback = parse(key, value)?,
            "rel_feedback" => t.rel_feedback = parse(key, value)?,
            "detach_feedback" => t.detach_feedback = parse(key, value)?,
            "channels" => t.channels = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "rel_bins" => t.rel_bins = parse(key, value)?,
            "eval_episodes" => t.eval_episodes = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            _ => return Err(ArlError::Config(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mode = match t.mode {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        };
        vec![
            ("mode", mode.to_string()),
            ("data", self.data.to_string()),
            ("out", self.out.display().to_string()),
            ("precision", self.precision.to_string()),
            ("way", t.way.to_string()),
            ("shot", t.shot.to_string()),
            ("queries", t.queries.to_string()),
            ("m", t.m.to_string()),
            ("pairs", t.pairs.to_string()),
            ("p", t.p.to_string()),
            ("lr", t.lr.base.to_string()),
            ("lr_halve_every", t.lr.halve_every.to_string()),
            ("iterations", t.iterations.to_string()),
            ("seed", t.seed.to_string()),
            ("alpha", t.weights.alpha.to_string()),
            ("beta", t.weights.beta.to_string()),
            ("gamma", t.weights.gamma.to_string()),
            ("abs_feedback", t.abs_feedback.to_string()),
            ("rel_feedback", t.rel_feedback.to_string()),
            ("detach_feedback", t.detach_feedback.to_string()),
            ("channels", t.channels.to_string()),
            ("hidden", t.hidden.to_string()),
            ("rel_bins", t.rel_bins.to_string()),
            ("eval_episodes", t.eval_episodes.to_string()),
            ("log_every", t.log_every.to_string()),
        ]
    }

    /// Parse over the defaults, then validate.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ArlError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(ArlError::Config(format!("line {}: `{}` set twice", n + 1, key)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| ArlError::Config(format!("line {}: {}", n + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ArlError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        LossWeights::new(self.train.weights.alpha, self.train.weights.beta, self.train.weights.gamma)?;
        Ok(())
    }

    /// Every key, resolved; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# arl run config, format 1\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{} = {}\n", k, v));
        }
        s
    }
}

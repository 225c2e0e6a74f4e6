//! Flat `key = value` configuration with dotted names, `#` comments, strict
//! unknown-key rejection, and flag > file > default precedence.

use crate::heads::LossWeights;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    LocalQuery,
    GlobalQuery,
    NoGumbelTopk,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::LocalQuery => "local_query",
            Ablation::GlobalQuery => "global_query",
            Ablation::NoGumbelTopk => "no_gumbel_topk",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub c: usize,
    pub l: usize,
    pub n: usize,
    pub heads: usize,
    pub h_mlp: usize,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_objects: usize,
    /// Fraction of motion-discriminative episodes in every stream.
    pub motion_frac: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub grad_clip: f64,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub tolerance: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("malformed line {line}: '{text}' (expected key = value)")]
    MalformedLine { line: usize, text: String },
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

impl Default for Config {
    fn default() -> Config {
        Config {
            model: ModelConfig { c: 32, l: 3, n: 4, heads: 4, h_mlp: 64, tau: 1.0 },
            data: DataConfig {
                t: 6,
                h: 16,
                w: 16,
                n_objects: 3,
                motion_frac: 0.5,
                train_size: 500,
                val_size: 50,
                seed: 0,
            },
            optim: OptimConfig { lr: 1e-4, weight_decay: 1e-4, steps: 2000, batch: 4, grad_clip: 1.0 },
            loss: LossWeights::default(),
            ablation: Ablation::Full,
            eval: EvalConfig { tolerance: 1, threshold: 0.5 },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    /// Applies one dotted key; rejects unknown keys.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "model.C" => self.model.c = parse(key, value)?,
            "model.L" => self.model.l = parse(key, value)?,
            "model.N" => self.model.n = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.H_mlp" => self.model.h_mlp = parse(key, value)?,
            "model.tau" => self.model.tau = parse(key, value)?,
            "data.T" => self.data.t = parse(key, value)?,
            "data.H" => self.data.h = parse(key, value)?,
            "data.W" => self.data.w = parse(key, value)?,
            "data.n_objects" => self.data.n_objects = parse(key, value)?,
            "data.motion_frac" => self.data.motion_frac = parse(key, value)?,
            "data.train_size" => self.data.train_size = parse(key, value)?,
            "data.val_size" => self.data.val_size = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "optim.lr" => self.optim.lr = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.steps" => self.optim.steps = parse(key, value)?,
            "optim.batch" => self.optim.batch = parse(key, value)?,
            "optim.grad_clip" => self.optim.grad_clip = parse(key, value)?,
            "loss.dice" => self.loss.dice = parse(key, value)?,
            "loss.focal" => self.loss.focal = parse(key, value)?,
            "loss.giou" => self.loss.giou = parse(key, value)?,
            "loss.l1" => self.loss.l1 = parse(key, value)?,
            "ablation" => {
                self.ablation = match value {
                    "full" => Ablation::Full,
                    "local_query" => Ablation::LocalQuery,
                    "global_query" => Ablation::GlobalQuery,
                    "no_gumbel_topk" => Ablation::NoGumbelTopk,
                    other => {
                        return Err(ConfigError::InvalidValue {
                            key: key.to_string(),
                            value: other.to_string(),
                            reason: "expected full|local_query|global_query|no_gumbel_topk".to_string(),
                        })
                    }
                }
            }
            "eval.tolerance" => self.eval.tolerance = parse(key, value)?,
            "eval.threshold" => self.eval.threshold = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine { line: i + 1, text: raw.to_string() });
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then command-line overrides.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_file_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.model.c % self.model.heads != 0 {
            return fail(format!("model.C {} not divisible by model.heads {}", self.model.c, self.model.heads));
        }
        if self.model.c % 4 != 0 {
            return fail(format!("model.C {} must be divisible by 4 for the position encoding", self.model.c));
        }
        if !(1..=6).contains(&self.model.l) {
            return fail(format!("model.L {} outside 1..=6", self.model.l));
        }
        if self.model.tau <= 0.0 {
            return fail(format!("model.tau {} must be positive", self.model.tau));
        }
        if self.data.h % 2 != 0 || self.data.w % 2 != 0 {
            return fail(format!("data.H/data.W must be even for 2x2 patches, got {}x{}", self.data.h, self.data.w));
        }
        if self.data.t < 1 || self.model.n < 1 {
            return fail("data.T and model.N must be at least 1".to_string());
        }
        if self.data.n_objects < 2 {
            return fail(format!("data.n_objects {} must be at least 2", self.data.n_objects));
        }
        if !(0.0..=1.0).contains(&self.data.motion_frac) {
            return fail(format!("data.motion_frac {} outside [0,1]", self.data.motion_frac));
        }
        if self.optim.batch < 1 {
            return fail("optim.batch must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return fail(format!("eval.threshold {} outside [0,1]", self.eval.threshold));
        }
        Ok(())
    }

    /// Feature-map side lengths (2x2 patch embedding).
    pub fn feat_hw(&self) -> (usize, usize) {
        (self.data.h / 2, self.data.w / 2)
    }

    /// Canonical flat dump; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.C = {}", self.model.c);
        let _ = writeln!(s, "model.L = {}", self.model.l);
        let _ = writeln!(s, "model.N = {}", self.model.n);
        let _ = writeln!(s, "model.heads = {}", self.model.heads);
        let _ = writeln!(s, "model.H_mlp = {}", self.model.h_mlp);
        let _ = writeln!(s, "model.tau = {}", self.model.tau);
        let _ = writeln!(s, "data.T = {}", self.data.t);
        let _ = writeln!(s, "data.H = {}", self.data.h);
        let _ = writeln!(s, "data.W = {}", self.data.w);
        let _ = writeln!(s, "data.n_objects = {}", self.data.n_objects);
        let _ = writeln!(s, "data.motion_frac = {}", self.data.motion_frac);
        let _ = writeln!(s, "data.train_size = {}", self.data.train_size);
        let _ = writeln!(s, "data.val_size = {}", self.data.val_size);
        let _ = writeln!(s, "data.seed = {}", self.data.seed);
        let _ = writeln!(s, "optim.lr = {}", self.optim.lr);
        let _ = writeln!(s, "optim.weight_decay = {}", self.optim.weight_decay);
        let _ = writeln!(s, "optim.steps = {}", self.optim.steps);
        let _ = writeln!(s, "optim.batch = {}", self.optim.batch);
        let _ = writeln!(s, "optim.grad_clip = {}", self.optim.grad_clip);
        let _ = writeln!(s, "loss.dice = {}", self.loss.dice);
        let _ = writeln!(s, "loss.focal = {}", self.loss.focal);
        let _ = writeln!(s, "loss.giou = {}", self.loss.giou);
        let _ = writeln!(s, "loss.l1 = {}", self.loss.l1);
        let _ = writeln!(s, "ablation = {}", self.ablation.as_str());
        let _ = writeln!(s, "eval.tolerance = {}", self.eval.tolerance);
        let _ = writeln!(s, "eval.threshold = {}", self.eval.threshold);
        s
    }
}

//! Flat `section.key = value` run configuration with a closed key set.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::Architecture;
use crate::guidance::GuidanceScale;
use crate::sampler::{DecodeConfig, DecodeMode};
use crate::svdd::{Selection, SvddConfig, ValueFill};
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const ENDPOINT_ENV: &str = "MDM_EMBED_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Ema,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifierKind {
    None,
    WordVec,
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub max_source_len: usize,
    pub max_target_len: usize,

    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,

    pub train: TrainConfig,

    pub steps: usize,
    pub gamma: f64,
    pub mode: DecodeMode,
    pub decode_seed: u64,
    pub weights: Weights,

    pub m: usize,
    pub selection: String,
    pub alpha: Option<f64>,
    pub value_fill: ValueFill,

    pub verifier: VerifierKind,
    pub wordvec_path: Option<PathBuf>,
    pub hashed_dim: usize,
    pub hashed_seed: u64,
    pub endpoint: String,
    pub max_retries: usize,
    pub timeout_secs: f64,

    pub output_dir: PathBuf,

    pub sweep_steps: Vec<usize>,
    pub sweep_gamma: Vec<f64>,
    pub sweep_m: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_data: None,
            test_data: None,
            max_source_len: 6,
            max_target_len: 6,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            train: TrainConfig::default(),
            steps: 16,
            gamma: 1.0,
            mode: DecodeMode::Ancestral,
            decode_seed: 0,
            weights: Weights::Ema,
            m: 1,
            selection: "argmax".into(),
            alpha: None,
            value_fill: ValueFill::ArgmaxFill,
            verifier: VerifierKind::None,
            wordvec_path: None,
            hashed_dim: 64,
            hashed_seed: 0,
            endpoint: "http://127.0.0.1:8080".into(),
            max_retries: 3,
            timeout_secs: 30.0,
            output_dir: PathBuf::from("run"),
            sweep_steps: vec![4, 16],
            sweep_gamma: vec![1.0],
            sweep_m: vec![1],
            sweep_seeds: vec![0],
            jobs: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in dump order.
    pub fn keys() -> Vec<String> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// The effective configuration as `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let v: Vec<(&str, String)> = vec![
            ("data.train", show_path(&self.train_data)),
            ("data.test", show_path(&self.test_data)),
            ("data.max_source_len", self.max_source_len.to_string()),
            ("data.max_target_len", self.max_target_len.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.layers", self.layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.ff_dim", self.ff_dim.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.peak_lr", t.peak_lr.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.cfg_dropout_prob", t.cfg_dropout_prob.to_string()),
            ("train.epsilon_min", t.epsilon_min.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("decode.steps", self.steps.to_string()),
            ("decode.gamma", self.gamma.to_string()),
            ("decode.mode", self.mode.to_string()),
            ("decode.seed", self.decode_seed.to_string()),
            (
                "decode.weights",
                match self.weights {
                    Weights::Ema => "ema".into(),
                    Weights::Raw => "raw".into(),
                },
            ),
            ("svdd.m", self.m.to_string()),
            ("svdd.selection", self.selection.clone()),
            ("svdd.alpha", self.alpha.map(|a| a.to_string()).unwrap_or_default()),
            ("svdd.value_fill", self.value_fill.to_string()),
            ("verifier.kind", self.verifier_name().into()),
            ("verifier.wordvec_path", show_path(&self.wordvec_path)),
            ("verifier.hashed_dim", self.hashed_dim.to_string()),
            ("verifier.hashed_seed", self.hashed_seed.to_string()),
            ("verifier.endpoint", self.endpoint.clone()),
            ("verifier.max_retries", self.max_retries.to_string()),
            ("verifier.timeout_secs", self.timeout_secs.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("sweep.steps", join(&self.sweep_steps)),
            ("sweep.gamma", join(&self.sweep_gamma)),
            ("sweep.m", join(&self.sweep_m)),
            ("sweep.seeds", join(&self.sweep_seeds)),
            ("sweep.jobs", self.jobs.to_string()),
        ];
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key. Unknown keys yield `Ok(false)`.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "data.train" => self.train_data = opt_path(v),
            "data.test" => self.test_data = opt_path(v),
            "data.max_source_len" => self.max_source_len = parse(key, v)?,
            "data.max_target_len" => self.max_target_len = parse(key, v)?,
            "model.embed_dim" => self.embed_dim = parse(key, v)?,
            "model.layers" => self.layers = parse(key, v)?,
            "model.heads" => self.heads = parse(key, v)?,
            "model.ff_dim" => self.ff_dim = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.peak_lr" => t.peak_lr = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.ema_decay" => t.ema_decay = parse(key, v)?,
            "train.cfg_dropout_prob" => t.cfg_dropout_prob = parse(key, v)?,
            "train.epsilon_min" => t.epsilon_min = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "decode.steps" => self.steps = parse(key, v)?,
            "decode.gamma" => self.gamma = parse(key, v)?,
            "decode.mode" => self.mode = v.parse()?,
            "decode.seed" => self.decode_seed = parse(key, v)?,
            "decode.weights" => {
                self.weights = match v {
                    "ema" => Weights::Ema,
                    "raw" => Weights::Raw,
                    _ => return Err(Error::Config(format!("{key}: expected ema or raw, got `{v}`"))),
                }
            }
            "svdd.m" => self.m = parse(key, v)?,
            "svdd.selection" => match v {
                "argmax" | "soft" => self.selection = v.to_string(),
                _ => return Err(Error::Config(format!("{key}: expected argmax or soft, got `{v}`"))),
            },
            "svdd.alpha" => self.alpha = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "svdd.value_fill" => self.value_fill = v.parse()?,
            "verifier.kind" => {
                self.verifier = match v {
                    "none" => VerifierKind::None,
                    "wordvec" => VerifierKind::WordVec,
                    "hashed" => VerifierKind::Hashed,
                    "remote" => VerifierKind::Remote,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected none, wordvec, hashed or remote, got `{v}`"
                        )))
                    }
                }
            }
            "verifier.wordvec_path" => self.wordvec_path = opt_path(v),
            "verifier.hashed_dim" => self.hashed_dim = parse(key, v)?,
            "verifier.hashed_seed" => self.hashed_seed = parse(key, v)?,
            "verifier.endpoint" => self.endpoint = v.to_string(),
            "verifier.max_retries" => self.max_retries = parse(key, v)?,
            "verifier.timeout_secs" => self.timeout_secs = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "sweep.steps" => self.sweep_steps = parse_list(key, v)?,
            "sweep.gamma" => self.sweep_gamma = parse_list(key, v)?,
            "sweep.m" => self.sweep_m = parse_list(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_list(key, v)?,
            "sweep.jobs" => self.jobs = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies `key = value` assignments in order, rejecting unknown keys
    /// all at once.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            if !self.set(k.trim(), v)? {
                unknown.push(k.trim().to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k, v));
        }
        let mut cfg = RunConfig::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let pairs = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{o}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(pairs)
    }

    /// Applies environment overrides.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint = url.trim().to_string();
            }
        }
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.architecture(4).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.decode_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.svdd_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.max_source_len == 0 || self.max_target_len == 0 {
            return Err(Error::Config("data.max_source_len and data.max_target_len must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("sweep.jobs must be positive".into()));
        }
        if self.verifier == VerifierKind::WordVec && self.wordvec_path.is_none() {
            return Err(Error::Config("verifier.kind = wordvec needs verifier.wordvec_path".into()));
        }
        for &g in &self.sweep_gamma {
            GuidanceScale::new(g).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.sweep_steps.contains(&0) || self.sweep_m.contains(&0) {
            return Err(Error::Config("sweep.steps and sweep.m entries must be positive".into()));
        }
        Ok(())
    }

    pub fn verifier_name(&self) -> &'static str {
        match self.verifier {
            VerifierKind::None => "none",
            VerifierKind::WordVec => "wordvec",
            VerifierKind::Hashed => "hashed",
            VerifierKind::Remote => "remote",
        }
    }

    pub fn layout_len(&self) -> usize {
        self.max_source_len + 1 + self.max_target_len
    }

    pub fn architecture(&self, vocab_size: usize) -> Architecture {
        Architecture {
            vocab_size,
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.layout_len(),
        }
    }

    /// Decode settings. An invalid gamma is reported by [`validate`](Self::validate).
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            steps: self.steps,
            target_len: self.max_target_len,
            gamma: GuidanceScale::new(self.gamma).unwrap_or(GuidanceScale::NONE),
            seed: self.decode_seed,
            mode: self.mode,
        }
    }

    pub fn svdd_config(&self) -> Result<SvddConfig> {
        let selection = match (self.selection.as_str(), self.alpha) {
            ("argmax", None) => Selection::Argmax,
            ("soft", Some(alpha)) => Selection::Soft { alpha },
            ("soft", None) => return Err(Error::Config("svdd.selection = soft needs svdd.alpha".into())),
            (_, Some(_)) => return Err(Error::Config("svdd.alpha is only valid with svdd.selection = soft".into())),
            (other, None) => return Err(Error::Config(format!("unknown selection `{other}`"))),
        };
        Ok(SvddConfig {
            m: self.m,
            selection,
            value_fill: self.value_fill,
        })
    }
}

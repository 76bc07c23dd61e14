//! Line-based run configuration: `section.key = value`, `#` comments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use save_core::model::{DenoiserConfig, PretrainHyper, TrainHyper, Tuning};

/// A config problem, carrying the 1-based line when it came from a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {n}: {}", self.message),
            None => f.write_str(&self.message),
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

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub s_cfg: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, s_cfg: 7.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub video_in: PathBuf,
    pub video_out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.ckpt".into(),
            corpus: "data/corpus/manifest.txt".into(),
            video_in: "data/video.clip".into(),
            video_out: "edit.clip".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub train: TrainHyper,
    pub tuning: Tuning,
    pub pretrain: PretrainHyper,
    pub sample: SampleConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            train: TrainHyper::default(),
            tuning: Tuning::Save,
            pretrain: PretrainHyper::default(),
            sample: SampleConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Every accepted key, in canonical `section.key` form.
pub const KEYS: &[&str] = &[
    "model.h",
    "model.w",
    "model.c",
    "model.d",
    "model.blocks",
    "model.prompt_vocab",
    "model.prompt_len",
    "model.t_max",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.weight_decay",
    "train.decay_delta",
    "train.epochs",
    "train.lambda_reg",
    "train.seed",
    "train.tuning",
    "train.lora_rank",
    "pretrain.steps",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.weight_decay",
    "pretrain.prompt_dropout",
    "sample.steps",
    "sample.s_cfg",
    "paths.checkpoint",
    "paths.corpus",
    "paths.video_in",
    "paths.video_out",
];

/// Short spellings accepted on the command line and in files.
const ALIASES: &[(&str, &str)] = &[
    ("seed", "train.seed"),
    ("train.lambda", "train.lambda_reg"),
    ("train.wd", "train.weight_decay"),
    ("sample.cfg", "sample.s_cfg"),
];

pub fn canonical_key(key: &str) -> Option<&'static str> {
    if let Some(&k) = KEYS.iter().find(|&&k| k == key) {
        return Some(k);
    }
    ALIASES.iter().find(|(a, _)| *a == key).map(|&(_, k)| k)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| err(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(err(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Assigns one key. The key may be an alias.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = canonical_key(key).ok_or_else(|| err(format!("unknown key {key:?}")))?;
        let v = value.trim();
        match key {
            "model.h" => self.model.h = parse(key, v)?,
            "model.w" => self.model.w = parse(key, v)?,
            "model.c" => self.model.c = parse(key, v)?,
            "model.d" => self.model.d = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.prompt_vocab" => self.model.prompt_vocab = parse(key, v)?,
            "model.prompt_len" => self.model.prompt_len = parse(key, v)?,
            "model.t_max" => self.model.t_max = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.decay_delta" => self.train.decay_delta = parse_bool(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lambda_reg" => self.train.lambda_reg = parse(key, v)?,
            "train.seed" => {
                let seed = parse(key, v)?;
                self.train.seed = seed;
                self.pretrain.seed = seed;
            }
            "train.tuning" => self.tuning = parse(key, v)?,
            "train.lora_rank" => self.train.lora_rank = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse(key, v)?,
            "pretrain.prompt_dropout" => self.pretrain.prompt_dropout = parse(key, v)?,
            "sample.steps" => self.sample.steps = parse(key, v)?,
            "sample.s_cfg" => self.sample.s_cfg = parse(key, v)?,
            "paths.checkpoint" => self.paths.checkpoint = v.into(),
            "paths.corpus" => self.paths.corpus = v.into(),
            "paths.video_in" => self.paths.video_in = v.into(),
            "paths.video_out" => self.paths.video_out = v.into(),
            _ => unreachable!("every canonical key is handled"),
        }
        Ok(())
    }

    /// Applies a config file's contents on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let at = |e: ConfigError| ConfigError {
                line: Some(i + 1),
                message: e.message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(err(format!("expected `section.key = value`, got {line:?}"))))?;
            self.set(key.trim(), value).map_err(at)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| err(format!("model: {e}")))?;
        if self.sample.steps == 0 || self.sample.steps > self.model.t_max {
            return Err(err(format!(
                "sample.steps must be in 1..={}, got {}",
                self.model.t_max, self.sample.steps
            )));
        }
        if !self.sample.s_cfg.is_finite() {
            return Err(err("sample.s_cfg must be finite"));
        }
        for (k, x) in [
            ("train.lr", self.train.lr),
            ("pretrain.lr", self.pretrain.lr),
            ("train.lambda_reg", self.train.lambda_reg),
            ("train.weight_decay", self.train.weight_decay),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(err(format!("{k} must be finite and non-negative, got {x}")));
            }
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err(err("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.prompt_dropout) {
            return Err(err("pretrain.prompt_dropout must lie in [0, 1]"));
        }
        if self.train.lora_rank == 0 {
            return Err(err("train.lora_rank must be at least 1"));
        }
        Ok(())
    }

    /// Renders every key with its current value, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let p = |p: &PathBuf| p.display().to_string();
        let m = &self.model;
        let t = &self.train;
        let pt = &self.pretrain;
        let values: Vec<String> = vec![
            m.h.to_string(),
            m.w.to_string(),
            m.c.to_string(),
            m.d.to_string(),
            m.blocks.to_string(),
            m.prompt_vocab.to_string(),
            m.prompt_len.to_string(),
            m.t_max.to_string(),
            t.lr.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.eps.to_string(),
            t.weight_decay.to_string(),
            t.decay_delta.to_string(),
            t.epochs.to_string(),
            t.lambda_reg.to_string(),
            t.seed.to_string(),
            self.tuning.to_string(),
            t.lora_rank.to_string(),
            pt.steps.to_string(),
            pt.batch_size.to_string(),
            pt.lr.to_string(),
            pt.weight_decay.to_string(),
            pt.prompt_dropout.to_string(),
            self.sample.steps.to_string(),
            self.sample.s_cfg.to_string(),
            p(&self.paths.checkpoint),
            p(&self.paths.corpus),
            p(&self.paths.video_in),
            p(&self.paths.video_out),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` overrides (plus
/// aliases such as `--seed`) out of `args`, leaving the rest for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_owned())),
            None => (body, None),
        };
        if !(key.contains('.') || canonical_key(key).is_some()) {
            rest.push(arg);
            continue;
        }
        if canonical_key(key).is_none() {
            return Err(err(format!("unknown key {key:?}")));
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| err(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_owned(), value));
    }
    Ok((rest, overrides))
}

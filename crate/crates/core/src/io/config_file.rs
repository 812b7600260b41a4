//! Flat `key = value` configuration files with dotted keys.
//!
//! `model.*` keys describe a [`ModelConfig`]; `experiment.*` keys the rest of
//! an [`ExperimentConfig`]. A `model.preset` line, wherever it appears, seeds
//! the model before the other `model.*` keys apply. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeVariant};

/// Everything a training run needs besides the corpus contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Text corpus; `synthetic:<kind>` selects a generated one.
    pub data_path: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Held-out evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub base_lr: f64,
}

impl ExperimentConfig {
    /// CLI defaults around a model: batch 16, sequence 256 (capped by the
    /// model), 500 steps, learning rate 3e-3.
    pub fn desk(model: ModelConfig) -> Self {
        Self {
            seq_len: model.max_seq_len.min(256),
            model,
            data_path: PathBuf::from("synthetic:text"),
            steps: 500,
            batch_size: 16,
            eval_every: 0,
            out_dir: PathBuf::from("runs/latest"),
            seed: 0,
            base_lr: 3e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("experiment.steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("experiment.batch_size must be positive".into()));
        }
        if self.seq_len < 2 || self.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "experiment.seq_len {} outside [2, model.max_seq_len = {}]",
                self.seq_len, self.model.max_seq_len
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("experiment.base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "experiment.{k} = {v}");
        };
        put("data_path", self.data_path.display().to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("eval_every", self.eval_every.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("base_lr", format!("{:?}", self.base_lr));
        s
    }

    /// Parses a full experiment; `experiment.*` keys absent from the text keep
    /// the [`ExperimentConfig::desk`] defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let model = model_from_entries(&entries)?;
        let mut exp = Self::desk(model);
        for (line, key, value) in &entries {
            let Some(k) = key.strip_prefix("experiment.") else { continue };
            let v = value.as_str();
            match k {
                "data_path" => exp.data_path = PathBuf::from(v),
                "steps" => exp.steps = num(*line, key, v)?,
                "batch_size" => exp.batch_size = num(*line, key, v)?,
                "seq_len" => exp.seq_len = num(*line, key, v)?,
                "eval_every" => exp.eval_every = num(*line, key, v)?,
                "out_dir" => exp.out_dir = PathBuf::from(v),
                "seed" => exp.seed = num(*line, key, v)?,
                "base_lr" => exp.base_lr = num(*line, key, v)?,
                _ => return Err(unknown_key(*line, key)),
            }
        }
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

const MODEL_KEYS: [&str; 17] = [
    "vocab_size",
    "d_model",
    "ffn_size",
    "n_layers",
    "n_heads",
    "max_seq_len",
    "moe_variant",
    "moe_every_other",
    "n_experts",
    "granularity",
    "top_k",
    "topp_threshold",
    "shared_experts",
    "tied_embeddings",
    "alpha_balance",
    "capacity_factor",
    "seed",
];

const EXPERIMENT_KEYS: [&str; 8] =
    ["data_path", "steps", "batch_size", "seq_len", "eval_every", "out_dir", "seed", "base_lr"];

pub fn model_to_text(c: &ModelConfig) -> String {
    let values = [
        c.vocab_size.to_string(),
        c.d_model.to_string(),
        c.ffn_size.to_string(),
        c.n_layers.to_string(),
        c.n_heads.to_string(),
        c.max_seq_len.to_string(),
        c.moe_variant.to_string(),
        c.moe_every_other.to_string(),
        c.n_experts.to_string(),
        c.granularity.to_string(),
        c.top_k.to_string(),
        format!("{:?}", c.topp_threshold),
        c.shared_experts.to_string(),
        c.tied_embeddings.to_string(),
        format!("{:?}", c.alpha_balance),
        format!("{:?}", c.capacity_factor),
        c.seed.to_string(),
    ];
    MODEL_KEYS.iter().zip(values).map(|(k, v)| format!("model.{k} = {v}\n")).collect()
}

/// Parses the `model.*` keys of a file, ignoring `experiment.*` keys.
pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let cfg = model_from_entries(&entries(text)?)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_model(path: &Path) -> Result<ModelConfig> {
    parse_model(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

type Entry = (usize, String, String);

fn entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some((prev, _, _)) = out.iter().find(|(_, key, _)| *key == k) {
            return Err(Error::Config(format!("line {}: key `{k}` already set on line {prev}", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn model_from_entries(entries: &[Entry]) -> Result<ModelConfig> {
    let mut cfg = match entries.iter().find(|(_, k, _)| k == "model.preset") {
        Some((_, _, name)) => ModelConfig::preset(name)?,
        None => ModelConfig::desk(MoeVariant::Cartesian),
    };
    for (line, key, value) in entries {
        if key == "model.preset" || key.starts_with("experiment.") {
            continue;
        }
        let Some(k) = key.strip_prefix("model.") else {
            return Err(unknown_key(*line, key));
        };
        let v = value.as_str();
        let l = *line;
        match k {
            "vocab_size" => cfg.vocab_size = num(l, key, v)?,
            "d_model" => cfg.d_model = num(l, key, v)?,
            "ffn_size" => cfg.ffn_size = num(l, key, v)?,
            "n_layers" => cfg.n_layers = num(l, key, v)?,
            "n_heads" => cfg.n_heads = num(l, key, v)?,
            "max_seq_len" => cfg.max_seq_len = num(l, key, v)?,
            "moe_variant" => cfg.moe_variant = v.parse()?,
            "moe_every_other" => cfg.moe_every_other = num(l, key, v)?,
            "n_experts" => cfg.n_experts = num(l, key, v)?,
            "granularity" => cfg.granularity = num(l, key, v)?,
            "top_k" => cfg.top_k = num(l, key, v)?,
            "topp_threshold" => cfg.topp_threshold = num(l, key, v)?,
            "shared_experts" => cfg.shared_experts = num(l, key, v)?,
            "tied_embeddings" => cfg.tied_embeddings = num(l, key, v)?,
            "alpha_balance" => cfg.alpha_balance = num(l, key, v)?,
            "capacity_factor" => cfg.capacity_factor = num(l, key, v)?,
            "seed" => cfg.seed = num(l, key, v)?,
            _ => return Err(unknown_key(l, key)),
        }
    }
    Ok(cfg)
}

fn num<X: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<X> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for `{key}`")))
}

fn unknown_key(line: usize, key: &str) -> Error {
    let valid: Vec<String> = std::iter::once("model.preset".to_string())
        .chain(MODEL_KEYS.iter().map(|k| format!("model.{k}")))
        .chain(EXPERIMENT_KEYS.iter().map(|k| format!("experiment.{k}")))
        .collect();
    Error::Config(format!("line {line}: unknown key `{key}`; valid keys: {}", valid.join(", ")))
}

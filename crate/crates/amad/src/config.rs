//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. A `preset` key (published or desk)
//! selects the defaults and is applied before every other key regardless of
//! position; later keys override earlier ones. Manifest-only keys
//! (`artifact.`, `result.`, `synth.`, `grid.`, `ablate.`) are accepted and
//! ignored, so a run manifest can be
//! fed back as a config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use amad_core::harness::PipelineConfig;
use amad_core::model::AttentionScaling;
use amad_core::score::ThresholdPopulation;

use crate::error::{CliError, Result};

/// Manifest-only key families skipped when reading a config.
pub const INFORMATIONAL_PREFIXES: [&str; 5] = ["artifact.", "result.", "synth.", "grid.", "ablate."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters.
    Published,
    /// Small CPU-scale defaults.
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Published => "published",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "published" => Some(Preset::Published),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }

    /// Full pipeline defaults; `input_dim` is filled in once data is known.
    pub fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::Published => PipelineConfig::published(1),
            Preset::Desk => PipelineConfig::desk(1),
        }
    }
}

/// Everything a run needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub pipeline: PipelineConfig,
    pub seed: Option<u64>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(preset: Preset) -> Self {
        RunConfig {
            preset,
            pipeline: preset.pipeline(),
            seed: None,
            train_path: None,
            test_path: None,
            out: None,
        }
    }

    /// Builds a config from `(key, value)` pairs.
    pub fn from_pairs(pairs: &[(String, String)], default_preset: Preset) -> Result<Self> {
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(v)
                .ok_or_else(|| CliError::Usage(format!("unknown preset {v:?} (published or desk)")))?,
            None => default_preset,
        };
        let mut cfg = RunConfig::new(preset);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.pipeline.model;
        let t = &mut self.pipeline.train;
        let s = &mut self.pipeline.score;
        match key {
            "preset" => {}
            k if INFORMATIONAL_PREFIXES.iter().any(|p| k.starts_with(p)) => {}
            "seed" => self.seed = Some(num(key, value)?),
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.test" => self.test_path = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "model.n_layers" => m.n_layers = num(key, value)?,
            "model.d_model" => m.d_model = num(key, value)?,
            "model.n_heads" => m.n_heads = num(key, value)?,
            "model.window_len" => m.window_len = num(key, value)?,
            "model.mixup_alpha" => m.mixup_alpha = num(key, value)?,
            "model.rope_base" => m.rope_base = num(key, value)?,
            "model.scaling" => {
                m.scaling = AttentionScaling::parse(value)
                    .ok_or_else(|| bad(key, value, "per_head or literal"))?
            }
            "train.lambda" => t.lambda = num(key, value)?,
            "train.tau" => t.tau = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.lr_decay" => t.lr_decay = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.max_epochs" => t.max_epochs = num(key, value)?,
            "train.patience" => t.patience = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.adam_eps" => t.adam_eps = num(key, value)?,
            "train.val_fraction" => t.val_fraction = num(key, value)?,
            "train.stride" => t.train_stride = num(key, value)?,
            "train.enable_min" => t.enable_min = flag(key, value)?,
            "train.enable_max" => t.enable_max = flag(key, value)?,
            "train.enable_contrastive" => t.enable_contrastive = flag(key, value)?,
            "train.enable_automask" => t.enable_automask = flag(key, value)?,
            "train.halve_recon" => t.halve_recon = flag(key, value)?,
            "score.ar" => s.anomaly_ratio = num(key, value)?,
            "score.population" => {
                s.population = ThresholdPopulation::parse(value)
                    .ok_or_else(|| bad(key, value, "train_test or test"))?
            }
            "score.batch_size" => s.batch_size = num(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every setting in a fixed order, formatted so that parsing it back
    /// yields an identical config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.pipeline.model;
        let t = &self.pipeline.train;
        let s = &self.pipeline.score;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: &dyn Display| out.push((k.to_string(), v.to_string()));
        put("preset", &self.preset.as_str());
        if let Some(seed) = self.seed {
            put("seed", &seed);
        }
        if let Some(p) = &self.train_path {
            put("data.train", &p.display());
        }
        if let Some(p) = &self.test_path {
            put("data.test", &p.display());
        }
        if let Some(p) = &self.out {
            put("out", &p.display());
        }
        put("model.n_layers", &m.n_layers);
        put("model.d_model", &m.d_model);
        put("model.n_heads", &m.n_heads);
        put("model.window_len", &m.window_len);
        put("model.mixup_alpha", &m.mixup_alpha);
        put("model.rope_base", &m.rope_base);
        put("model.scaling", &m.scaling.as_str());
        put("train.lambda", &t.lambda);
        put("train.tau", &t.tau);
        put("train.lr", &t.lr);
        put("train.lr_decay", &t.lr_decay);
        put("train.batch_size", &t.batch_size);
        put("train.max_epochs", &t.max_epochs);
        put("train.patience", &t.patience);
        put("train.beta1", &t.beta1);
        put("train.beta2", &t.beta2);
        put("train.adam_eps", &t.adam_eps);
        put("train.val_fraction", &t.val_fraction);
        put("train.stride", &t.train_stride);
        put("train.enable_min", &t.enable_min);
        put("train.enable_max", &t.enable_max);
        put("train.enable_contrastive", &t.enable_contrastive);
        put("train.enable_automask", &t.enable_automask);
        put("train.halve_recon", &t.halve_recon);
        put("score.ar", &s.anomaly_ratio);
        put("score.population", &s.population.as_str());
        put("score.batch_size", &s.batch_size);
        out
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed = ...`)".into()))
    }

    /// Pipeline settings for data with `input_dim` channels, seeded.
    pub fn resolved(&self, input_dim: usize) -> Result<PipelineConfig> {
        let seed = self.require_seed()?;
        let mut p = self.pipeline.clone();
        p.model.input_dim = input_dim;
        p.model.seed = seed;
        p.model.automask = p.train.enable_automask;
        p.train.seed = seed;
        p.model.validate()?;
        p.train.validate()?;
        Ok(p)
    }
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Usage(format!("{key} = {value:?}: expected {expected}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

/// Splits config text into pairs, rejecting malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected `key = value`", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {s:?} must look like key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_pairs(&text)
}

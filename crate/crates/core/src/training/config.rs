//! Run configuration: TOML file plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ScheduleParams;
use crate::router::Strategy;
use crate::synthdata::CorpusSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Seeds parameter initialization and per-step sampling.
    pub seed: u64,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub projector_layers: usize,
    pub decoder_layers: usize,
    /// Learnable queries per auxiliary pooler, and projector grid tokens.
    pub queries: usize,
    /// Soft prompt length.
    pub prompt_len: usize,
    pub router_hidden: usize,
    pub max_positions: usize,
    /// Greedy decoding cap, in tokens.
    pub max_decode: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 32,
            heads: 4,
            ffn_mult: 2,
            projector_layers: 1,
            decoder_layers: 2,
            queries: 16,
            prompt_len: 10,
            router_hidden: 32,
            max_positions: 64,
            max_decode: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub strategy: Strategy,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Draw Gumbel noise when routing at evaluation time.
    pub inference_noise: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SoftMerge,
            tau: 0.5,
            inference_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sharpness: f64,
    pub midpoint: u64,
    pub align_weight: f64,
    pub balance_weight: f64,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sharpness: 0.01,
            midpoint: 1500,
            align_weight: 1.0,
            balance_weight: 0.01,
            phase1_steps: 3000,
            phase2_steps: 3000,
        }
    }
}

impl ScheduleConfig {
    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            sharpness: self.sharpness,
            midpoint: self.midpoint,
            align_weight: self.align_weight,
            balance_weight: self.balance_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Abort when the step loss exceeds this multiple of the first step's.
    pub divergence_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a parsed table; the value is read as TOML
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Parses TOML text, applies overrides in order and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.schedule.params().validate()?;
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
            return bad(format!("model.dim {} must be a positive multiple of model.heads {}", m.dim, m.heads));
        }
        if m.queries == 0 || self.corpus.brain_dim % m.queries != 0 {
            return bad(format!(
                "corpus.brain_dim {} must split into model.queries {} tokens",
                self.corpus.brain_dim, m.queries
            ));
        }
        if m.prompt_len == 0 || m.ffn_mult == 0 || m.decoder_layers == 0 || m.max_decode == 0 {
            return bad("prompt_len, ffn_mult, decoder_layers and max_decode must be positive".into());
        }
        if m.router_hidden < self.corpus.modalities {
            return bad(format!("model.router_hidden must be at least {}", self.corpus.modalities));
        }
        // Longest caption is 7 words plus the end token.
        let need = m.prompt_len + m.queries + m.max_decode.max(8);
        if m.max_positions < need {
            return bad(format!("model.max_positions must be at least {need}"));
        }
        if !(self.router.tau > 0.0) {
            return bad(format!("router.tau must be positive, got {}", self.router.tau));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim: need lr > 0, 0 <= beta < 1, eps > 0".into());
        }
        if !(o.weight_decay >= 0.0) || o.batch_size == 0 || !(o.divergence_factor > 1.0) {
            return bad("optim: need weight_decay >= 0, batch_size > 0, divergence_factor > 1".into());
        }
        Ok(())
    }
}

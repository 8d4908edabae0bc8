//! Run configuration: built-in defaults < config file < command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SplitOrder;
use crate::error::{Error, Result};
use crate::model::{Channel, ModelConfig};
use crate::partition::PartitionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecPositions {
    /// Next-item loss at every valid position (causal prefixes).
    #[default]
    All,
    /// Only at the final position.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeReduction {
    /// Squared norm of the residual at the last position.
    #[default]
    Last,
    /// Mean squared norm over all retained positions.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrozenTarget {
    /// Copied once, never updated afterwards.
    #[default]
    Snapshot,
    /// Exponential moving average refreshed after every epoch.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Sampled,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceChannel {
    #[default]
    None,
    Interval,
    Context,
}

impl ForceChannel {
    pub fn channel(self) -> Option<Channel> {
        match self {
            Self::None => None,
            Self::Interval => Some(Channel::Interval),
            Self::Context => Some(Channel::Context),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // preprocessing
    pub k_user: usize,
    pub k_item: usize,
    pub split_order: SplitOrder,
    // partitioning
    pub uniform_ratio: f64,
    pub frequent_ratio: f64,
    pub partition_mode: PartitionMode,
    // model
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub layer_norm: bool,
    pub calendar_weekday: bool,
    // optimization
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub train_negatives: usize,
    pub rec_positions: RecPositions,
    // auxiliary tasks
    pub subseq_len: usize,
    pub neighbors: usize,
    pub candidates: usize,
    pub enhance_start: usize,
    pub refine_start: usize,
    pub alpha_seq: f64,
    pub alpha_freq: f64,
    pub alpha_low: f64,
    pub channel_consistency: f64,
    pub se_reduction: SeReduction,
    pub frozen_target: FrozenTarget,
    pub ema_decay: f64,
    /// Neighbor-score offset in days; median co-occurrence gap when unset.
    pub theta: Option<f64>,
    /// Neighbor-score spread in days; `2·theta` when unset.
    pub gamma: Option<f64>,
    // ablations
    pub time_multi: bool,
    pub seq_enh: bool,
    pub item_enh: bool,
    pub pop_sim: bool,
    pub force_channel: ForceChannel,
    // evaluation
    pub eval_mode: EvalMode,
    pub eval_negatives: usize,
    pub ks: Vec<usize>,
    pub retrain_per_cell: bool,
    // seeds
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            k_user: 5,
            k_item: 5,
            split_order: SplitOrder::ValidLast,
            uniform_ratio: 0.6,
            frequent_ratio: 0.7,
            partition_mode: PartitionMode::Ratio,
            dim: 64,
            max_len: 50,
            heads: 2,
            num_blocks: 1,
            layer_norm: false,
            calendar_weekday: true,
            batch_size: 512,
            lr: 0.01,
            epochs: 200,
            patience: 20,
            train_negatives: 100,
            rec_positions: RecPositions::All,
            subseq_len: 3,
            neighbors: 3,
            candidates: 20,
            enhance_start: 5,
            refine_start: 20,
            alpha_seq: 1.0,
            alpha_freq: 1.0,
            alpha_low: 1.0,
            channel_consistency: 0.0,
            se_reduction: SeReduction::Last,
            frozen_target: FrozenTarget::Snapshot,
            ema_decay: 0.9,
            theta: None,
            gamma: None,
            time_multi: true,
            seq_enh: true,
            item_enh: true,
            pop_sim: true,
            force_channel: ForceChannel::None,
            eval_mode: EvalMode::Sampled,
            eval_negatives: 100,
            ks: vec![10, 20],
            retrain_per_cell: false,
            seed: 42,
            eval_seed: 2024,
        }
    }
}

/// Interprets a `key=value` right-hand side as JSON when possible.
fn coerce(key: &str, raw: &str) -> Value {
    let raw = raw.trim();
    if key == "ks" {
        let parts: Option<Vec<Value>> = raw
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(|p| p.trim().parse::<u64>().ok().map(Value::from))
            .collect();
        if let Some(parts) = parts {
            return Value::Array(parts);
        }
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Builds an override layer from `(key, raw value)` pairs.
pub fn pairs_layer<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Map<String, Value> {
    pairs
        .iter()
        .map(|(k, v)| (k.as_ref().to_string(), coerce(k.as_ref(), v.as_ref())))
        .collect()
}

/// Parses a JSON object or `key = value` lines (`#` starts a comment).
pub fn parse_overrides(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return match serde_json::from_str(trimmed)? {
            Value::Object(map) => Ok(map),
            _ => Err(Error::Config("config JSON must be an object".into())),
        };
    }
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        let key = k.trim().to_string();
        map.insert(key.clone(), coerce(&key, v));
    }
    Ok(map)
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Map<String, Value>> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        parse_overrides(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies override layers in order; later layers win.
    pub fn layered(layers: &[Map<String, Value>]) -> Result<Self> {
        let Value::Object(mut base) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object");
        };
        for layer in layers {
            for (k, v) in layer {
                if !base.contains_key(k) {
                    return Err(Error::Config(format!("unknown key `{k}`")));
                }
                base.insert(k.clone(), v.clone());
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut layer = Map::new();
        layer.insert(key.to_string(), coerce(key, raw));
        let Value::Object(current) = serde_json::to_value(&*self)? else {
            unreachable!("config serializes to an object");
        };
        *self = Self::layered(&[current, layer])?;
        Ok(())
    }

    /// Turns off the components named by letters: a = multi-channel time,
    /// b = sequence enhancement, c = item enhancement, d = popularity/similarity.
    pub fn ablate(&mut self, letters: &str) -> Result<()> {
        for part in letters.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "a" => self.time_multi = false,
                "b" => self.seq_enh = false,
                "c" => self.item_enh = false,
                "d" => self.pop_sim = false,
                other => return Err(Error::Config(format!("unknown ablation `{other}` (expected a,b,c,d)"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.uniform_ratio > 0.0 && self.uniform_ratio < 1.0) {
            return fail(format!("uniform_ratio {} outside (0,1)", self.uniform_ratio));
        }
        if !(self.frequent_ratio > 0.0 && self.frequent_ratio < 1.0) {
            return fail(format!("frequent_ratio {} outside (0,1)", self.frequent_ratio));
        }
        if !(self.enhance_start <= self.refine_start && self.refine_start <= self.epochs) {
            return fail(format!(
                "need enhance_start ≤ refine_start ≤ epochs, got {} ≤ {} ≤ {}",
                self.enhance_start, self.refine_start, self.epochs
            ));
        }
        for (name, w) in [
            ("alpha_seq", self.alpha_seq),
            ("alpha_freq", self.alpha_freq),
            ("alpha_low", self.alpha_low),
            ("channel_consistency", self.channel_consistency),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.dim == 0 || self.max_len == 0 || self.heads == 0 || self.num_blocks == 0 {
            return fail("dim, max_len, heads and num_blocks must be positive".into());
        }
        if (2 * self.dim) % self.heads != 0 {
            return fail(format!("heads {} must divide 2·dim = {}", self.heads, 2 * self.dim));
        }
        if self.batch_size == 0 || self.train_negatives == 0 || self.eval_negatives == 0 {
            return fail("batch_size, train_negatives and eval_negatives must be positive".into());
        }
        if self.subseq_len == 0 || self.neighbors == 0 || self.candidates == 0 {
            return fail("subseq_len, neighbors and candidates must be positive".into());
        }
        if self.k_user == 0 || self.k_item == 0 {
            return fail("k_user and k_item must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return fail("lr must be positive and ema_decay in [0,1)".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return fail("ks must list positive cutoffs".into());
        }
        if self.theta.is_some_and(|t| !(t > 0.0)) || self.gamma.is_some_and(|g| !(g > 0.0)) {
            return fail("theta and gamma must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            num_items,
            dim: self.dim,
            max_len: self.max_len,
            heads: self.heads,
            num_blocks: self.num_blocks,
            layer_norm: self.layer_norm,
            calendar_weekday: self.calendar_weekday,
        }
    }

    /// `key (default: value)` lines for `--help`.
    pub fn help_table() -> String {
        let Value::Object(map) = serde_json::to_value(Self::default()).expect("config serializes") else {
            unreachable!()
        };
        let mut out = String::from("Config keys (set in --config as JSON or key=value):\n");
        for (k, v) in map {
            out.push_str(&format!("  {k:<22} default: {v}\n"));
        }
        out
    }
}

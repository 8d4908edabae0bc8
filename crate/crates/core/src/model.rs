//! Embeddings, time channels and the mixture-attention sequence encoder.
//!
//! The encoder input is `X = (item ∥ time) + position`, width `2d`. Each head
//! blends two scaled-dot-product attention maps — one computed from the item
//! half of `X`, one from the time half — with per-head convex weights, then
//! applies them to a shared value projection. Uniform users are routed through
//! the interval channel, non-uniform users through the calendar channel.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ufrec_tensor::{read_checkpoint, write_checkpoint, Graph, ParameterStore, Tensor, Var};

use crate::config::ForceChannel;
use crate::data::Padded;
use crate::error::{Error, Result};
use crate::seed;
use crate::time::{interval_bucket, Calendar, DAY_SLOTS, MONTH_SLOTS, NUM_BUCKETS, WEEKDAY_SLOTS, YEAR_SLOTS};

pub const ITEM_EMB: &str = "item_emb";
pub const BUCKET_EMB: &str = "intv.bucket_emb";
pub const CALENDAR_TABLES: [&str; 4] = ["ctx.year_emb", "ctx.month_emb", "ctx.day_emb", "ctx.weekday_emb"];
pub const CALENDAR_W: &str = "ctx.agg_w";
pub const CALENDAR_B: &str = "ctx.agg_b";
pub const GEN_W: &str = "seq.gen_w";
pub const GEN_B: &str = "seq.gen_b";
pub const TRANSFER_W: &str = "item.transfer_w";
pub const TRANSFER_B: &str = "item.transfer_b";
pub const FROZEN_W: &str = "item.transfer_frozen_w";
pub const FROZEN_B: &str = "item.transfer_frozen_b";

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Interval,
    Context,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Interval, Channel::Context];

    pub fn tag(self) -> &'static str {
        match self {
            Channel::Interval => "intv",
            Channel::Context => "ctx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: usize,
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub layer_norm: bool,
    pub calendar_weekday: bool,
}

impl ModelConfig {
    pub fn key_width(&self) -> usize {
        2 * self.dim / self.heads
    }

    fn calendar_fields(&self) -> usize {
        if self.calendar_weekday {
            4
        } else {
            3
        }
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 || self.max_len == 0 || self.heads == 0 || self.num_blocks == 0 || self.num_items == 0 {
            return Err(Error::Config(format!("degenerate model shape {self:?}")));
        }
        if (2 * self.dim) % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide {}", self.heads, 2 * self.dim)));
        }
        Ok(())
    }
}

fn enc_name(channel: Channel, rest: &str) -> String {
    format!("enc.{}.{rest}", channel.tag())
}

fn block_name(channel: Channel, block: usize, rest: &str) -> String {
    format!("enc.{}.b{block}.{rest}", channel.tag())
}

fn head_name(channel: Channel, block: usize, head: usize, rest: &str) -> String {
    format!("enc.{}.b{block}.h{head}.{rest}", channel.tag())
}

/// Fresh parameters: uniform in ±1/√d for tables and projections, zero biases
/// and mixture logits. Row 0 of the item table is the frozen padding row.
pub fn init_store(cfg: &ModelConfig, seed_value: u64) -> Result<ParameterStore> {
    cfg.check()?;
    let mut rng = seed::rng(seed_value, &[seed::stream::INIT]);
    let d = cfg.dim;
    let w = 2 * d;
    let dv = cfg.key_width();
    let bound = 1.0 / (d as f64).sqrt();
    let mut s = ParameterStore::new();
    let uni = |s: &mut ParameterStore, name: &str, shape: [usize; 2], rng: &mut rand_chacha::ChaCha8Rng| {
        s.insert(name, Tensor::uniform(shape.to_vec(), bound, rng), true).map(|_| ())
    };

    uni(&mut s, ITEM_EMB, [cfg.num_items + 1, d], &mut rng)?;
    let item = s.id(ITEM_EMB)?;
    s.freeze_row(item, 0)?;
    uni(&mut s, BUCKET_EMB, [NUM_BUCKETS, d], &mut rng)?;
    let sizes = [YEAR_SLOTS, MONTH_SLOTS, DAY_SLOTS, WEEKDAY_SLOTS];
    for (name, rows) in CALENDAR_TABLES.iter().zip(sizes).take(cfg.calendar_fields()) {
        uni(&mut s, name, [rows, d], &mut rng)?;
    }
    uni(&mut s, CALENDAR_W, [cfg.calendar_fields() * d, d], &mut rng)?;
    s.insert(CALENDAR_B, Tensor::zeros(vec![1, d]), true)?;

    for ch in Channel::BOTH {
        uni(&mut s, &enc_name(ch, "pos"), [cfg.max_len, w], &mut rng)?;
        for b in 0..cfg.num_blocks {
            for j in 0..cfg.heads {
                for part in ["q_item", "k_item", "q_time", "k_time"] {
                    uni(&mut s, &head_name(ch, b, j, part), [d, dv], &mut rng)?;
                }
            }
            uni(&mut s, &block_name(ch, b, "v"), [w, w], &mut rng)?;
            s.insert(&block_name(ch, b, "mix"), Tensor::zeros(vec![cfg.heads, 2]), true)?;
            uni(&mut s, &block_name(ch, b, "out"), [w, w], &mut rng)?;
            uni(&mut s, &block_name(ch, b, "ffn_w1"), [w, w], &mut rng)?;
            s.insert(&block_name(ch, b, "ffn_b1"), Tensor::zeros(vec![1, w]), true)?;
            uni(&mut s, &block_name(ch, b, "ffn_w2"), [w, w], &mut rng)?;
            s.insert(&block_name(ch, b, "ffn_b2"), Tensor::zeros(vec![1, w]), true)?;
        }
    }

    uni(&mut s, GEN_W, [w, w], &mut rng)?;
    s.insert(GEN_B, Tensor::zeros(vec![1, w]), true)?;
    uni(&mut s, TRANSFER_W, [w, d], &mut rng)?;
    s.insert(TRANSFER_B, Tensor::zeros(vec![1, d]), true)?;
    Ok(s)
}

/// Per-slot time inputs of one channel. `keep[i] = 0` zeroes row `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeInput {
    Interval { buckets: Vec<usize>, keep: Vec<f64> },
    Context { slots: Vec<[usize; 4]>, keep: Vec<f64> },
}

impl TimeInput {
    /// Interval rows hold the bucket of the gap to the previous interaction;
    /// the first valid slot and padding stay zero.
    pub fn interval(padded: &Padded) -> Self {
        let n = padded.len();
        let mut buckets = vec![0; n];
        let mut keep = vec![0.0; n];
        for i in 1..n {
            if padded.mask[i] && padded.mask[i - 1] {
                buckets[i] = interval_bucket(padded.timestamps[i] - padded.timestamps[i - 1]);
                keep[i] = 1.0;
            }
        }
        Self::Interval { buckets, keep }
    }

    pub fn context(padded: &Padded) -> Self {
        let slots = padded
            .timestamps
            .iter()
            .zip(&padded.mask)
            .map(|(&t, &m)| if m { Calendar::from_timestamp(t).slots() } else { [0; 4] })
            .collect();
        let keep = padded.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self::Context { slots, keep }
    }

    pub fn for_channel(channel: Channel, padded: &Padded) -> Self {
        match channel {
            Channel::Interval => Self::interval(padded),
            Channel::Context => Self::context(padded),
        }
    }

    /// Time feature of a prediction made at `target` after an interaction at `last`.
    pub fn next(channel: Channel, last: &[i64], target: &[i64]) -> Self {
        let keep = vec![1.0; target.len()];
        match channel {
            Channel::Interval => Self::Interval {
                buckets: last.iter().zip(target).map(|(&l, &t)| interval_bucket(t - l)).collect(),
                keep,
            },
            Channel::Context => Self::Context {
                slots: target.iter().map(|&t| Calendar::from_timestamp(t).slots()).collect(),
                keep,
            },
        }
    }
}

/// A padded sequence ready for one channel of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub items: Vec<usize>,
    pub mask: Vec<bool>,
    pub time: TimeInput,
}

impl SeqInput {
    pub fn new(padded: &Padded, channel: Channel) -> Self {
        Self {
            items: padded.items.clone(),
            mask: padded.mask.clone(),
            time: TimeInput::for_channel(channel, padded),
        }
    }
}

/// Time embedding rows (`rows × d`) of either channel.
pub fn time_rows(g: &mut Graph, cfg: &ModelConfig, time: &TimeInput) -> Result<Var> {
    let out = match time {
        TimeInput::Interval { buckets, keep } => {
            let table = g.param_by_name(BUCKET_EMB)?;
            let rows = g.gather_rows(table, buckets)?;
            g.scale_rows(rows, keep)?
        }
        TimeInput::Context { slots, keep } => {
            let mut parts = Vec::with_capacity(4);
            for (f, name) in CALENDAR_TABLES.iter().enumerate().take(cfg.calendar_fields()) {
                let table = g.param_by_name(name)?;
                let ids: Vec<usize> = slots.iter().map(|s| s[f]).collect();
                parts.push(g.gather_rows(table, &ids)?);
            }
            let cat = g.concat_cols(&parts)?;
            let w = g.param_by_name(CALENDAR_W)?;
            let b = g.param_by_name(CALENDAR_B)?;
            let proj = g.matmul(cat, w)?;
            let proj = g.add_row(proj, b)?;
            g.scale_rows(proj, keep)?
        }
    };
    Ok(out)
}

/// Causal attention mask over valid slots; rows of padded slots are empty.
pub fn attention_mask(mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = mask[i] && mask[j];
        }
    }
    out
}

fn block(g: &mut Graph, cfg: &ModelConfig, ch: Channel, b: usize, x: Var, att_mask: &[bool], keep: &[f64]) -> Result<Var> {
    let d = cfg.dim;
    let dv = cfg.key_width();
    let inv_sqrt = 1.0 / (dv as f64).sqrt();
    let x_item = g.slice_cols(x, 0, d)?;
    let x_time = g.slice_cols(x, d, 2 * d)?;
    let wv = g.param_by_name(&block_name(ch, b, "v"))?;
    let values = g.matmul(x, wv)?;
    let logits = g.param_by_name(&block_name(ch, b, "mix"))?;
    let mix = g.softmax(logits, None)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let mut blended = None;
        for (k, (half, q, kk)) in [(x_item, "q_item", "k_item"), (x_time, "q_time", "k_time")]
            .into_iter()
            .enumerate()
        {
            let wq = g.param_by_name(&head_name(ch, b, j, q))?;
            let wk = g.param_by_name(&head_name(ch, b, j, kk))?;
            let qh = g.matmul(half, wq)?;
            let kh = g.matmul(half, wk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt);
            let att = g.softmax(scores, Some(att_mask))?;
            let weighted = g.scale_by_elem(att, mix, j * 2 + k)?;
            blended = Some(match blended {
                None => weighted,
                Some(prev) => g.add(prev, weighted)?,
            });
        }
        let vj = g.slice_cols(values, j * dv, (j + 1) * dv)?;
        heads.push(g.matmul(blended.expect("two channels"), vj)?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = g.param_by_name(&block_name(ch, b, "out"))?;
    let sal = g.matmul(cat, wo)?;
    let mut s = g.add(x, sal)?;
    if cfg.layer_norm {
        s = g.layer_norm(s, LN_EPS)?;
    }
    let s = g.scale_rows(s, keep)?;

    let w1 = g.param_by_name(&block_name(ch, b, "ffn_w1"))?;
    let b1 = g.param_by_name(&block_name(ch, b, "ffn_b1"))?;
    let w2 = g.param_by_name(&block_name(ch, b, "ffn_w2"))?;
    let b2 = g.param_by_name(&block_name(ch, b, "ffn_b2"))?;
    let hdn = g.matmul(s, w1)?;
    let hdn = g.add_row(hdn, b1)?;
    let hdn = g.relu(hdn);
    let f = g.matmul(hdn, w2)?;
    let f = g.add_row(f, b2)?;
    let mut out = g.add(s, f)?;
    if cfg.layer_norm {
        out = g.layer_norm(out, LN_EPS)?;
    }
    Ok(g.scale_rows(out, keep)?)
}

/// Encodes one padded sequence through `channel`; returns `N × 2d`.
pub fn encode(g: &mut Graph, cfg: &ModelConfig, channel: Channel, input: &SeqInput) -> Result<Var> {
    let n = cfg.max_len;
    if input.items.len() != n || input.mask.len() != n {
        return Err(Error::InvalidInput(format!(
            "sequence of length {} for max_len {n}",
            input.items.len()
        )));
    }
    let table = g.param_by_name(ITEM_EMB)?;
    let h = g.gather_rows(table, &input.items)?;
    let t = time_rows(g, cfg, &input.time)?;
    let x = g.concat_cols(&[h, t])?;
    let pos = g.param_by_name(&enc_name(channel, "pos"))?;
    let x = g.add(x, pos)?;
    let keep: Vec<f64> = input.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut x = g.scale_rows(x, &keep)?;
    let att_mask = attention_mask(&input.mask);
    for b in 0..cfg.num_blocks {
        x = block(g, cfg, channel, b, x, &att_mask, &keep)?;
    }
    Ok(x)
}

/// `relu(x W + b)` with the sequence generator's parameters.
pub fn generator(g: &mut Graph, x: Var) -> Result<Var> {
    let w = g.param_by_name(GEN_W)?;
    let b = g.param_by_name(GEN_B)?;
    let y = g.matmul(x, w)?;
    let y = g.add_row(y, b)?;
    Ok(g.relu(y))
}

/// Affine transfer map `2d → d`, either the trainable one or its frozen copy.
pub fn transfer(g: &mut Graph, x: Var, frozen: bool) -> Result<Var> {
    let (wn, bn) = if frozen { (FROZEN_W, FROZEN_B) } else { (TRANSFER_W, TRANSFER_B) };
    let w = g.param_by_name(wn)?;
    let b = g.param_by_name(bn)?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// `score(i) = q · [m_i ∥ t]` for every candidate.
pub fn dot_scores(item_table: &Tensor, q_last: &[f64], t_next: &[f64], candidates: &[usize]) -> Vec<f64> {
    let d = t_next.len();
    let time_part: f64 = q_last[d..].iter().zip(t_next).map(|(a, b)| a * b).sum();
    candidates
        .iter()
        .map(|&c| {
            let m = item_table.row_slice(c);
            q_last[..d].iter().zip(m).map(|(a, b)| a * b).sum::<f64>() + time_part
        })
        .collect()
}

/// Which channel serves which user at inference.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Routing {
    pub uniform_users: BTreeSet<usize>,
    /// Single-channel models use the interval channel for everyone.
    pub time_multi: bool,
    pub force: ForceChannel,
    /// Users known to the partition; anyone else is routed as non-uniform.
    pub known_users: usize,
}

impl Routing {
    pub fn channel_for(&self, user: usize) -> Channel {
        if let Some(c) = self.force.channel() {
            return c;
        }
        if !self.time_multi {
            return Channel::Interval;
        }
        if self.uniform_users.contains(&user) {
            Channel::Interval
        } else {
            if user >= self.known_users {
                log::warn!("user {user} has no uniformity label; using the context channel");
            }
            Channel::Context
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    model: ModelConfig,
    routing: Routing,
    #[serde(default)]
    info: serde_json::Value,
}

/// Trained parameters plus everything inference needs.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub routing: Routing,
}

/// Last-position encoding of a user's context and the time row of the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub channel: Channel,
    /// `N × 2d`.
    pub sequence: Tensor,
    pub next_time: Vec<f64>,
}

impl Encoded {
    pub fn last(&self) -> &[f64] {
        let n = self.sequence.shape()[0];
        self.sequence.row_slice(n - 1)
    }
}

impl Model {
    /// Forward pass of the channel routed for `user`, on interactions before `target_time`.
    pub fn encode_user(&self, user: usize, items: &[usize], times: &[i64], target_time: i64) -> Result<Encoded> {
        self.encode_with(self.routing.channel_for(user), items, times, target_time)
    }

    pub fn encode_with(&self, channel: Channel, items: &[usize], times: &[i64], target_time: i64) -> Result<Encoded> {
        if items.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty history".into()));
        }
        let padded = crate::data::pad_truncate(items, times, self.config.max_len);
        let mut g = Graph::new(&self.store);
        let q = encode(&mut g, &self.config, channel, &SeqInput::new(&padded, channel))?;
        let last_time = *times.last().expect("non-empty");
        let next = TimeInput::next(channel, &[last_time], &[target_time]);
        let t = time_rows(&mut g, &self.config, &next)?;
        Ok(Encoded {
            channel,
            sequence: g.value(q).clone(),
            next_time: g.value(t).data().to_vec(),
        })
    }

    pub fn score(&self, encoded: &Encoded, candidates: &[usize]) -> Result<Vec<f64>> {
        if let Some(&bad) = candidates.iter().find(|&&c| c == 0 || c > self.config.num_items) {
            return Err(Error::InvalidInput(format!("candidate item {bad} out of range")));
        }
        Ok(dot_scores(self.store.by_name(ITEM_EMB)?, encoded.last(), &encoded.next_time, candidates))
    }

    pub fn save(&self, path: &Path, seed_value: u64, info: serde_json::Value) -> Result<()> {
        let header = ModelHeader {
            model: self.config.clone(),
            routing: self.routing.clone(),
            info,
        };
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, &self.store, seed_value, serde_json::to_value(header)?)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (store, header) = read_checkpoint(&mut bytes.as_slice())?;
        let h: ModelHeader = serde_json::from_value(header.extra)?;
        h.model.check()?;
        Ok((
            Self {
                config: h.model,
                store,
                routing: h.routing,
            },
            h.info,
        ))
    }
}

//! Synthetic interaction logs with planted structure: a share of users act at
//! near-constant intervals and follow item successor chains closely, the rest
//! act in bursts and wander; item popularity is Zipf-distributed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawInteraction;
use crate::error::{Error, Result};
use crate::seed;

const DAY: f64 = 86_400.0;
/// 2020-01-01T00:00:00Z.
const EPOCH_START: i64 = 1_577_836_800;

/// How each item's successor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Successor {
    /// One cycle through every item: a fully learnable chain.
    Cycle,
    /// Drawn by popularity, so chains funnel into frequent items.
    Popular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub uniform_fraction: f64,
    pub zipf_exponent: f64,
    /// Probability of stepping to the successor instead of a popularity draw.
    pub uniform_follow: f64,
    pub non_uniform_follow: f64,
    /// Relative jitter around the per-user interval for uniform users.
    pub jitter: f64,
    /// Pareto tail index of non-uniform gaps.
    pub tail_index: f64,
    pub successor: Successor,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 400,
            items: 300,
            min_len: 15,
            max_len: 40,
            uniform_fraction: 0.6,
            zipf_exponent: 1.0,
            uniform_follow: 0.85,
            non_uniform_follow: 0.3,
            jitter: 0.1,
            tail_index: 1.1,
            successor: Successor::Popular,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Small, fully chained corpus a model should be able to memorise.
    pub fn overfit(seed: u64) -> Self {
        Self {
            users: 50,
            items: 100,
            min_len: 20,
            max_len: 30,
            uniform_follow: 1.0,
            non_uniform_follow: 1.0,
            successor: Successor::Cycle,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.users == 0 || self.items < 2 {
            return Err(Error::Config("synthetic corpus needs users and at least two items".into()));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sequence lengths must satisfy 3 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if !prob(self.uniform_fraction) || !prob(self.uniform_follow) || !prob(self.non_uniform_follow) {
            return Err(Error::Config("synthetic fractions and probabilities must lie in [0, 1]".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) || !(self.tail_index > 0.0) || !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("invalid jitter, tail index or Zipf exponent".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub interactions: Vec<RawInteraction>,
    /// Planted label per generated user, indexed by user number.
    pub uniform: Vec<bool>,
    /// Successor of item `k` at index `k` (item numbers start at 1; slot 0 unused).
    pub successors: Vec<usize>,
}

pub fn user_name(u: usize) -> String {
    format!("u{u}")
}

pub fn item_name(i: usize) -> String {
    format!("i{i}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[seed::stream::SYNTH]);
    let n = cfg.items;
    // Popularity rank is shuffled so item numbers carry no signal.
    let mut ranked: Vec<usize> = (1..=n).collect();
    ranked.shuffle(&mut rng);
    let mut weights = vec![0.0; n + 1];
    for (r, &item) in ranked.iter().enumerate() {
        weights[item] = 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent);
    }
    let popularity = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;

    let mut successors = vec![0; n + 1];
    match cfg.successor {
        Successor::Cycle => {
            let mut order: Vec<usize> = (1..=n).collect();
            order.shuffle(&mut rng);
            for k in 0..n {
                successors[order[k]] = order[(k + 1) % n];
            }
        }
        Successor::Popular => {
            for (item, slot) in successors.iter_mut().enumerate().skip(1) {
                *slot = loop {
                    let s = popularity.sample(&mut rng);
                    if s != item {
                        break s;
                    }
                };
            }
        }
    }

    let uniform_users = (cfg.uniform_fraction * cfg.users as f64).round() as usize;
    let mut uniform: Vec<bool> = (0..cfg.users).map(|u| u < uniform_users).collect();
    uniform.shuffle(&mut rng);

    let mut interactions = Vec::new();
    for (u, &is_uniform) in uniform.iter().enumerate() {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let follow = if is_uniform { cfg.uniform_follow } else { cfg.non_uniform_follow };
        let base = DAY * rng.gen_range(0.5..2.0);
        let mut t = EPOCH_START + rng.gen_range(0..365 * 86_400);
        let mut item = popularity.sample(&mut rng);
        for _ in 0..len {
            interactions.push(RawInteraction::new(user_name(u), item_name(item), t));
            let gap = if is_uniform {
                base * (1.0 + cfg.jitter * rng.gen_range(-1.0..=1.0))
            } else {
                // Pareto with scale base/20: mostly short bursts, occasional long breaks.
                let x: f64 = rng.gen_range(f64::EPSILON..1.0);
                (base / 20.0) * x.powf(-1.0 / cfg.tail_index)
            };
            t += gap.min(DAY * 3650.0).round() as i64;
            item = if rng.gen_bool(follow) {
                successors[item]
            } else {
                popularity.sample(&mut rng)
            };
        }
    }
    Ok(SynthCorpus {
        interactions,
        uniform,
        successors,
    })
}

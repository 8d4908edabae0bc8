//! Multi-task training: next-item loss on both time channels plus the
//! sequence- and item-enhancement losses under their curriculum schedules.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use ufrec_tensor::{Adam, Gradients, Graph, Var};

use crate::config::{Config, FrozenTarget, RecPositions};
use crate::data::{pad_truncate, Padded, SplitDataset, Target};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::item_enhancer::{
    self, build_candidate_sets, capture_snapshot, ema_update, item_losses, sample_neighbors, stats_from_split, ItemTask,
    ScoreParams,
};
use crate::model::{self, encode, init_store, time_rows, Channel, Model, Routing, SeqInput, TimeInput, ITEM_EMB};
use crate::partition::Partition;
use crate::schedule::{item_weight, lowfreq_weight, sequence_weight};
use crate::seed;
use crate::sequence_enhancer::{alignment_loss, generate_subsequence};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,loss_rec,loss_seq,loss_freq,loss_low,val_ndcg10,elapsed_s";

/// A user's training sequence as encoder input plus next-item targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub uniform: bool,
    pub variance: f64,
    pub input: Padded,
    /// Next item per slot (0 at padding).
    pub targets: Vec<usize>,
    pub target_times: Vec<i64>,
    pub history: HashSet<usize>,
}

impl Example {
    fn valid_len(&self) -> usize {
        self.input.valid_count()
    }
}

/// Builds one example per user whose training prefix has at least two items.
pub fn build_examples(data: &SplitDataset, labels: &Partition, max_len: usize) -> Vec<Example> {
    data.users
        .iter()
        .filter(|u| u.train.len() >= 2)
        .map(|u| {
            let l = u.train.len();
            let input = pad_truncate(&u.train[..l - 1], &u.train_times[..l - 1], max_len);
            let next = pad_truncate(&u.train[1..], &u.train_times[1..], max_len);
            let label = labels.users.get(u.user);
            Example {
                user: u.user,
                uniform: label.is_some_and(|l| l.uniform),
                variance: label.map_or(0.0, |l| l.variance),
                targets: next.items,
                target_times: next.timestamps,
                input,
                history: u.train.iter().copied().collect(),
            }
        })
        .collect()
}

/// Sequence-enhancement inputs for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqEnhancePlan {
    pub derived: Padded,
    pub retained: Vec<usize>,
    pub weight: f64,
}

/// Everything random about one sequence's loss, resolved up front.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqPlan {
    pub example: usize,
    pub positions: Vec<usize>,
    /// `positions.len() × (1 + negatives)`, the positive first in each row.
    pub candidates: Vec<usize>,
    pub per_row: usize,
    pub enhance: Option<SeqEnhancePlan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeqValues {
    pub rec: f64,
    pub seq: Option<f64>,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemValues {
    pub freq: Option<f64>,
    pub low: Option<f64>,
}

/// Static training inputs shared across epochs.
pub struct TrainSetup<'a> {
    pub data: &'a SplitDataset,
    pub labels: &'a Partition,
    pub cfg: &'a Config,
    pub examples: Vec<Example>,
    pub candidate_sets: Vec<Vec<(usize, f64)>>,
    pub score_params: ScoreParams,
}

impl<'a> TrainSetup<'a> {
    pub fn new(data: &'a SplitDataset, labels: &'a Partition, cfg: &'a Config) -> Result<Self> {
        cfg.validate()?;
        if data.users.is_empty() {
            return Err(Error::InvalidInput("no users to train on".into()));
        }
        let stats = stats_from_split(data);
        let score_params = ScoreParams::resolve(&stats, cfg.theta, cfg.gamma, cfg.pop_sim);
        let candidate_sets = build_candidate_sets(&stats, &score_params, cfg.candidates);
        Ok(Self {
            data,
            labels,
            cfg,
            examples: build_examples(data, labels, cfg.max_len),
            candidate_sets,
            score_params,
        })
    }

    /// Channels trained with the next-item loss.
    pub fn rec_channels(&self) -> Vec<Channel> {
        match self.cfg.force_channel.channel() {
            Some(c) => vec![c],
            None if !self.cfg.time_multi => vec![Channel::Interval],
            None => Channel::BOTH.to_vec(),
        }
    }

    pub fn routing(&self) -> Routing {
        Routing {
            uniform_users: self
                .labels
                .users
                .users
                .iter()
                .filter(|l| l.uniform)
                .map(|l| l.user)
                .collect(),
            time_multi: self.cfg.time_multi,
            force: self.cfg.force_channel,
            known_users: self.labels.users.users.iter().map(|l| l.user + 1).max().unwrap_or(0),
        }
    }

    pub fn fresh_model(&self) -> Result<Model> {
        let config = self.cfg.model_config(self.data.num_items);
        Ok(Model {
            store: init_store(&config, self.cfg.seed)?,
            config,
            routing: self.routing(),
        })
    }

    fn draw_negatives<R: Rng + ?Sized>(&self, ex: &Example, positive: usize, rng: &mut R, out: &mut Vec<usize>) -> Result<()> {
        let n_items = self.data.num_items;
        let strict = n_items > ex.history.len();
        if n_items < 2 {
            return Err(Error::InvalidInput("need at least two items to draw negatives".into()));
        }
        for _ in 0..self.cfg.train_negatives {
            loop {
                let c = rng.gen_range(1..=n_items);
                if c != positive && !(strict && ex.history.contains(&c)) {
                    out.push(c);
                    break;
                }
            }
        }
        Ok(())
    }

    /// Resolves negatives and the derived subsequence for one example.
    pub fn plan_sequence<R: Rng + ?Sized>(&self, index: usize, epoch: usize, rng: &mut R) -> Result<SeqPlan> {
        let ex = &self.examples[index];
        let n = self.cfg.max_len;
        let positions: Vec<usize> = match self.cfg.rec_positions {
            RecPositions::All => (0..n).filter(|&i| ex.input.mask[i]).collect(),
            RecPositions::Last => vec![n - 1],
        };
        let per_row = 1 + self.cfg.train_negatives;
        let mut candidates = Vec::with_capacity(positions.len() * per_row);
        for &p in &positions {
            candidates.push(ex.targets[p]);
            self.draw_negatives(ex, ex.targets[p], rng, &mut candidates)?;
        }
        let enhance = if self.cfg.seq_enh && ex.uniform && epoch >= self.cfg.enhance_start {
            let start = n - ex.valid_len();
            let pair = generate_subsequence(
                &ex.input.items[start..],
                &ex.input.timestamps[start..],
                |i| self.labels.items.is_frequent(i),
                self.cfg.subseq_len,
                rng,
            )?;
            let users = &self.labels.users;
            Some(SeqEnhancePlan {
                derived: pad_truncate(&pair.items, &pair.timestamps, n),
                retained: pair.retained,
                weight: sequence_weight(epoch, self.cfg.enhance_start, self.cfg.epochs, ex.variance, users.v_max, users.v_min),
            })
        } else {
            None
        };
        Ok(SeqPlan {
            example: index,
            positions,
            candidates,
            per_row,
            enhance,
        })
    }

    /// Item-enhancement tasks for the distinct input items of a batch.
    pub fn plan_items<R: Rng + ?Sized>(&self, batch: &[usize], epoch: usize, snapshot: bool, rng: &mut R) -> Vec<ItemTask> {
        let cfg = self.cfg;
        if !cfg.item_enh || epoch < cfg.enhance_start {
            return Vec::new();
        }
        let refine = snapshot && epoch >= cfg.refine_start;
        let items: BTreeSet<usize> = batch
            .iter()
            .flat_map(|&i| {
                let ex = &self.examples[i];
                ex.input.items.iter().zip(&ex.input.mask).filter(|(_, m)| **m).map(|(i, _)| *i)
            })
            .collect();
        let freq = &self.labels.items;
        let eta = lowfreq_weight(epoch, cfg.refine_start, cfg.epochs);
        let mut tasks = Vec::new();
        for item in items {
            let frequent = freq.is_frequent(item);
            if !frequent && !refine {
                continue;
            }
            let Some(neighbors) = sample_neighbors(&self.candidate_sets[item], cfg.neighbors, rng) else {
                continue;
            };
            let weight = if frequent {
                let count = freq.get(item).map_or(0, |l| l.count) as f64;
                item_weight(epoch, cfg.enhance_start, cfg.epochs, count, freq.f_min as f64, freq.f_max as f64)
            } else {
                eta
            };
            tasks.push(ItemTask {
                item,
                neighbors,
                weight,
                frequent,
            });
        }
        tasks
    }

    /// Builds `λ_r + α_s·λ_s + β·consistency` for one sequence.
    pub fn sequence_objective(&self, g: &mut Graph, plan: &SeqPlan) -> Result<(Var, SeqValues)> {
        let cfg = self.cfg;
        let mcfg = cfg.model_config(self.data.num_items);
        let ex = &self.examples[plan.example];
        let last_times: Vec<i64> = plan.positions.iter().map(|&p| ex.input.timestamps[p]).collect();
        let next_times: Vec<i64> = plan.positions.iter().map(|&p| ex.target_times[p]).collect();
        let zeros = vec![0usize; plan.positions.len()];
        let channels = self.rec_channels();

        let mut encoded: Vec<(Channel, Var)> = Vec::new();
        let mut rec: Option<Var> = None;
        for &ch in &channels {
            let q = encode(g, &mcfg, ch, &SeqInput::new(&ex.input, ch))?;
            encoded.push((ch, q));
            let rows = g.gather_rows(q, &plan.positions)?;
            let t = time_rows(g, &mcfg, &TimeInput::next(ch, &last_times, &next_times))?;
            let table = g.param_by_name(ITEM_EMB)?;
            let logits = g.candidate_logits(rows, table, t, &plan.candidates, plan.per_row)?;
            let ce = g.cross_entropy(logits, &zeros)?;
            rec = Some(match rec {
                None => ce,
                Some(prev) => g.add(prev, ce)?,
            });
        }
        let rec = g.scale(rec.expect("at least one channel"), 1.0 / channels.len() as f64);
        let mut values = SeqValues {
            rec: g.value(rec).item()?,
            ..SeqValues::default()
        };
        let mut total = rec;

        let find = |encoded: &[(Channel, Var)], ch| encoded.iter().find(|(c, _)| *c == ch).map(|(_, v)| *v);
        if let Some(se) = &plan.enhance {
            let original = match find(&encoded, Channel::Interval) {
                Some(v) => v,
                None => encode(g, &mcfg, Channel::Interval, &SeqInput::new(&ex.input, Channel::Interval))?,
            };
            let derived = encode(g, &mcfg, Channel::Context, &SeqInput::new(&se.derived, Channel::Context))?;
            let l = alignment_loss(g, original, derived, ex.valid_len(), &se.retained, se.weight, cfg.se_reduction)?;
            values.seq = Some(g.value(l).item()?);
            let scaled = g.scale(l, cfg.alpha_seq);
            total = g.add(total, scaled)?;
        }
        if cfg.channel_consistency > 0.0 {
            if let (Some(a), Some(b)) = (find(&encoded, Channel::Interval), find(&encoded, Channel::Context)) {
                let n = cfg.max_len - 1;
                let la = g.gather_rows(a, &[n])?;
                let lb = g.gather_rows(b, &[n])?;
                let diff = g.sub(la, lb)?;
                let sq = g.sum_sq(diff);
                values.consistency = Some(g.value(sq).item()?);
                let scaled = g.scale(sq, cfg.channel_consistency);
                total = g.add(total, scaled)?;
            }
        }
        Ok((total, values))
    }

    /// Builds `α_f·λ_f + α_l·λ_l` for a batch's item tasks.
    pub fn item_objective(&self, g: &mut Graph, tasks: &[ItemTask]) -> Result<Option<(Var, ItemValues)>> {
        if tasks.is_empty() {
            return Ok(None);
        }
        let terms = item_losses(g, tasks)?;
        let mut values = ItemValues::default();
        let mut total: Option<Var> = None;
        for (term, alpha, slot) in [
            (terms.frequent, self.cfg.alpha_freq, &mut values.freq),
            (terms.less_frequent, self.cfg.alpha_low, &mut values.low),
        ] {
            if let Some(v) = term {
                *slot = Some(g.value(v).item()?);
                let s = g.scale(v, alpha);
                total = Some(match total {
                    None => s,
                    Some(prev) => g.add(prev, s)?,
                });
            }
        }
        Ok(total.map(|t| (t, values)))
    }

    /// The whole batch objective on a single tape (used for gradient checks).
    pub fn batch_objective(&self, g: &mut Graph, plans: &[SeqPlan], tasks: &[ItemTask]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for p in plans {
            let (v, _) = self.sequence_objective(g, p)?;
            let v = g.scale(v, 1.0 / plans.len() as f64);
            total = Some(match total {
                None => v,
                Some(prev) => g.add(prev, v)?,
            });
        }
        if let Some((v, _)) = self.item_objective(g, tasks)? {
            total = Some(match total {
                None => v,
                Some(prev) => g.add(prev, v)?,
            });
        }
        total.ok_or_else(|| Error::InvalidInput("empty batch".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub seq: f64,
    pub freq: f64,
    pub low: f64,
    pub val_ndcg10: f64,
    pub elapsed_s: f64,
}

impl EpochLog {
    /// Every column except wall-clock time.
    pub fn deterministic_fields(&self) -> [u64; 6] {
        [
            self.epoch as u64,
            self.rec.to_bits(),
            self.seq.to_bits(),
            self.freq.to_bits(),
            self.low.to_bits(),
            self.val_ndcg10.to_bits(),
        ]
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.epoch, r.rec, r.seq, r.freq, r.low, r.val_ndcg10, r.elapsed_s
        );
    }
    out
}

fn check_finite(value: f64, epoch: usize, batch: usize, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            term,
            value,
        })
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Snapshots at the start of epoch `refine_start` and advances one epoch.
pub fn train_epoch(setup: &TrainSetup, model: &mut Model, epoch: usize, adam: &Adam) -> Result<EpochLog> {
    let cfg = setup.cfg;
    if cfg.item_enh && epoch == cfg.refine_start && !model.store.contains(model::FROZEN_W) {
        capture_snapshot(&mut model.store)?;
    }
    let snapshot = model.store.contains(model::FROZEN_W);
    let mut rng = seed::rng(cfg.seed, &[seed::stream::EPOCH, epoch as u64]);
    let mut order: Vec<usize> = (0..setup.examples.len()).collect();
    order.shuffle(&mut rng);
    let (mut rec, mut seq, mut freq, mut low) = (Running::default(), Running::default(), Running::default(), Running::default());
    let chunk = (rayon::current_num_threads() * 2).max(1);

    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let plans = batch
            .iter()
            .map(|&i| setup.plan_sequence(i, epoch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tasks = setup.plan_items(batch, epoch, snapshot, &mut rng);
        model.store.zero_grad();
        let scale = 1.0 / plans.len() as f64;
        for group in plans.chunks(chunk) {
            let store = &model.store;
            let results: Vec<Result<(Gradients, SeqValues)>> = group
                .par_iter()
                .map(|p| {
                    let mut g = Graph::new(store);
                    let (loss, values) = setup.sequence_objective(&mut g, p)?;
                    Ok((g.backward(loss)?, values))
                })
                .collect();
            for r in results {
                let (grads, values) = r?;
                rec.add(check_finite(values.rec, epoch, b, "recommendation")?);
                if let Some(v) = values.seq {
                    seq.add(check_finite(v, epoch, b, "sequence")?);
                }
                if let Some(v) = values.consistency {
                    check_finite(v, epoch, b, "consistency")?;
                }
                model.store.accumulate_scaled(&grads, scale);
            }
        }
        let item = {
            let mut g = Graph::new(&model.store);
            match setup.item_objective(&mut g, &tasks)? {
                Some((loss, values)) => Some((g.backward(loss)?, values)),
                None => None,
            }
        };
        if let Some((grads, values)) = item {
            if let Some(v) = values.freq {
                freq.add(check_finite(v, epoch, b, "frequent-item")?);
            }
            if let Some(v) = values.low {
                low.add(check_finite(v, epoch, b, "less-frequent-item")?);
            }
            model.store.accumulate(&grads);
        }
        adam.step(&mut model.store);
    }
    if cfg.frozen_target == FrozenTarget::Ema && snapshot {
        ema_update(&mut model.store, cfg.ema_decay)?;
    }
    Ok(EpochLog {
        epoch,
        rec: rec.mean(),
        seq: seq.mean(),
        freq: freq.mean(),
        low: low.mean(),
        val_ndcg10: 0.0,
        elapsed_s: 0.0,
    })
}

pub fn validation_ndcg10(setup: &TrainSetup, model: &Model) -> Result<f64> {
    let opts = EvalOptions::sampled(&[10], setup.cfg.eval_negatives, setup.cfg.eval_seed, Target::Valid);
    let report = evaluate(model, setup.data, setup.labels, &opts)?;
    Ok(report.get("overall", "NDCG", 10).unwrap_or(0.0))
}

/// Trains with early stopping on validation NDCG@10. `observe` sees the
/// model after every epoch.
pub fn fit_with<F>(setup: &TrainSetup, mut observe: F) -> Result<FitOutcome>
where
    F: FnMut(&EpochLog, &Model),
{
    let cfg = setup.cfg;
    let mut model = setup.fresh_model()?;
    let adam = Adam::new(cfg.lr);
    let start = Instant::now();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut row = train_epoch(setup, &mut model, epoch, &adam)?;
        row.val_ndcg10 = validation_ndcg10(setup, &model)?;
        row.elapsed_s = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: rec {:.4} seq {:.4} freq {:.4} low {:.4} val ndcg@10 {:.4}",
            row.rec,
            row.seq,
            row.freq,
            row.low,
            row.val_ndcg10
        );
        observe(&row, &model);
        let improved = best.as_ref().map_or(true, |b| row.val_ndcg10 > b.2);
        log.push(row);
        if improved {
            best = Some((model.clone(), epoch, log.last().expect("pushed").val_ndcg10));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best, best_epoch, best_val) = match best {
        Some(b) => b,
        None => (model, 0, 0.0),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val,
        epochs_run: log.len(),
        log,
    })
}

pub fn fit(setup: &TrainSetup) -> Result<FitOutcome> {
    fit_with(setup, |_, _| {})
}

impl FitOutcome {
    pub fn save(&self, dir: &Path, cfg: &Config) -> Result<()> {
        let info = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_val_ndcg10": self.best_val,
            "epochs_run": self.epochs_run,
            "config": cfg,
        });
        self.best.save(&dir.join(CHECKPOINT_FILE), cfg.seed, info)?;
        let path = dir.join(LOG_FILE);
        fs::write(&path, log_csv(&self.log)).map_err(|e| Error::io(&path, e))
    }
}

pub fn write_neighbors(setup: &TrainSetup, dir: &Path) -> Result<()> {
    item_enhancer::write_candidate_sets(&dir.join(item_enhancer::NEIGHBORS_FILE), &setup.candidate_sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_leave_one_out, SplitOrder, UserSequence};
    use crate::partition::PartitionMode;

    fn toy_data() -> SplitDataset {
        let seqs: Vec<UserSequence> = (0..8)
            .map(|u| {
                let len = 6 + u % 3;
                UserSequence {
                    user: u,
                    items: (0..len).map(|k| 1 + (u * 3 + k * (1 + u % 2)) % 12).collect(),
                    timestamps: (0..len as i64).map(|k| k * 86_400 * (1 + (u as i64 % 3) * k)).collect(),
                }
            })
            .collect();
        split_leave_one_out(&seqs, 12, SplitOrder::ValidLast)
    }

    fn toy_config() -> Config {
        Config {
            dim: 4,
            max_len: 5,
            batch_size: 4,
            epochs: 6,
            enhance_start: 1,
            refine_start: 2,
            train_negatives: 5,
            eval_negatives: 5,
            patience: 10,
            ..Config::default()
        }
    }

    #[test]
    fn examples_shift_targets_by_one() {
        let data = toy_data();
        let labels = Partition::from_split(&data, 0.5, 0.5, PartitionMode::Ratio).unwrap();
        let ex = build_examples(&data, &labels, 5);
        let u = &data.users[0];
        let e = &ex[0];
        let l = u.train.len();
        assert_eq!(e.input.items[4], u.train[l - 2]);
        assert_eq!(e.targets[4], u.train[l - 1]);
        assert_eq!(e.target_times[4], u.train_times[l - 1]);
    }

    #[test]
    fn gating_before_enhance_start() {
        let data = toy_data();
        let labels = Partition::from_split(&data, 0.5, 0.5, PartitionMode::Ratio).unwrap();
        let cfg = toy_config();
        let setup = TrainSetup::new(&data, &labels, &cfg).unwrap();
        let mut rng = seed::rng(1, &[]);
        for i in 0..setup.examples.len() {
            let p = setup.plan_sequence(i, 0, &mut rng).unwrap();
            assert!(p.enhance.is_none());
            assert!(p.candidates.chunks(p.per_row).all(|row| !row[1..].contains(&row[0])));
        }
        assert!(setup.plan_items(&[0, 1, 2], 0, false, &mut rng).is_empty());
        let tasks = setup.plan_items(&[0, 1, 2], 1, false, &mut rng);
        assert!(tasks.iter().all(|t| t.frequent));
    }

    #[test]
    fn loss_falls_on_a_repeated_batch() {
        let data = toy_data();
        let labels = Partition::from_split(&data, 0.5, 0.5, PartitionMode::Ratio).unwrap();
        let cfg = toy_config();
        let setup = TrainSetup::new(&data, &labels, &cfg).unwrap();
        let mut model = setup.fresh_model().unwrap();
        capture_snapshot(&mut model.store).unwrap();
        let mut rng = seed::rng(3, &[]);
        let batch: Vec<usize> = (0..setup.examples.len()).collect();
        let plans: Vec<SeqPlan> = batch.iter().map(|&i| setup.plan_sequence(i, 3, &mut rng).unwrap()).collect();
        let tasks = setup.plan_items(&batch, 3, true, &mut rng);
        let adam = Adam::new(0.01);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let grads = {
                let mut g = Graph::new(&model.store);
                let l = setup.batch_objective(&mut g, &plans, &tasks).unwrap();
                losses.push(g.value(l).item().unwrap());
                g.backward(l).unwrap()
            };
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
        }
        assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn fit_is_deterministic_and_respects_patience() {
        let data = toy_data();
        let labels = Partition::from_split(&data, 0.5, 0.5, PartitionMode::Ratio).unwrap();
        let cfg = Config {
            patience: 2,
            ..toy_config()
        };
        let setup = TrainSetup::new(&data, &labels, &cfg).unwrap();
        let a = fit(&setup).unwrap();
        let b = fit(&setup).unwrap();
        assert!(a.best.store.bit_identical(&b.best.store));
        let fa: Vec<_> = a.log.iter().map(EpochLog::deterministic_fields).collect();
        let fb: Vec<_> = b.log.iter().map(EpochLog::deterministic_fields).collect();
        assert_eq!(fa, fb);
        assert!(a.epochs_run <= cfg.epochs);
        assert!(a.epochs_run >= a.best_epoch + 1);
        if a.epochs_run < cfg.epochs {
            assert_eq!(a.epochs_run, a.best_epoch + 1 + cfg.patience);
        }
    }
}

//! Command-line front end. Every command writes its artifacts plus a
//! `manifest.json` into `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{pairs_layer, Config, ForceChannel};
use crate::data::{
    build_sequences, k_core_filter, load_interactions, split_leave_one_out, write_interactions, IdMap, SplitDataset, Target,
    ITEMS_FILE, USERS_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    case_dump, evaluate, sensitivity_csv, study_sweep, sweep_csv, time_sensitivity, EvalOptions, MetricReport,
};
use crate::model::Model;
use crate::partition::{Partition, PARTITION_FILE};
use crate::synth::{self, SynthConfig};
use crate::trainer::{fit, write_neighbors, TrainSetup};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "UFREC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ufrec", version, about = "Uniformity- and frequency-aware sequential recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// k-core filter a raw `user<TAB>item<TAB>timestamp` log and split it.
    Prepare(PrepareArgs),
    /// Label sequences (uniform / non-uniform) and items (frequent / less frequent).
    Partition(Common),
    /// Train a model; writes the checkpoint, training log, partition and neighbor sets.
    Train(Common),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Sweep the partition ratios and report per-subset metrics.
    Study(StudyArgs),
    /// Compare interval-only against context-only time modeling per subset.
    Sensitivity(SensitivityArgs),
    /// Dump a user's final sequence encoding and target score.
    Case(CaseArgs),
    /// Write a synthetic interaction log with planted structure.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Prepared dataset directory (raw TSV file for `prepare`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Config file: JSON object or key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub uniform_ratio: Option<f64>,
    #[arg(long)]
    pub frequent_ratio: Option<f64>,
    /// Components to disable, e.g. `b,c` (a time channels, b sequence, c item, d pop/sim).
    #[arg(long)]
    pub ablate: Option<String>,
    /// Evaluation mode: sampled or full.
    #[arg(long)]
    pub mode: Option<String>,
    /// Metric cutoffs, e.g. `10,20`.
    #[arg(long)]
    pub k: Option<String>,
    /// Any other config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub k_user: Option<usize>,
    #[arg(long)]
    pub k_item: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Existing partition.json; recomputed from the data when omitted.
    #[arg(long)]
    pub partition: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model scored in every cell unless `retrain_per_cell` is set.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "0.3,0.4,0.5,0.6,0.7,0.8")]
    pub seq_grid: String,
    #[arg(long, default_value = "0.4,0.5,0.6,0.7,0.8,0.9")]
    pub item_grid: String,
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Interval-only checkpoint; trained here when omitted.
    #[arg(long)]
    pub interval: Option<PathBuf>,
    /// Context-only checkpoint; trained here when omitted.
    #[arg(long)]
    pub context: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CaseArgs {
    #[command(flatten)]
    pub common: Common,
    /// `[variant=]path`; repeat for several ablation variants.
    #[arg(long, required = true)]
    pub checkpoint: Vec<String>,
    /// Raw user id as in the input log.
    #[arg(long)]
    pub user: String,
    /// Raw item id to score; defaults to the user's test item.
    #[arg(long)]
    pub item: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `default` or `overfit`.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const SYNTH_FILE: &str = "interactions.tsv";
pub const PLANTED_FILE: &str = "planted.json";

/// Exit status for an error: 1 for bad input or missing artifacts, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::MissingArtifact(_)
        | Error::InvalidInput(_)
        | Error::UnknownUser(_)
        | Error::Parse { .. }
        | Error::UniverseTooSmall { .. } => 1,
        _ => 2,
    }
}

pub fn command() -> clap::Command {
    let table = Config::help_table();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let table = table.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(table));
    }
    cmd
}

/// Parses arguments and runs; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if a pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    let started = Instant::now();
    let (name, out, cfg, inputs) = match command {
        Command::Prepare(a) => ("prepare", &a.common.out, prepare(a)?, vec![require_data(&a.common)?]),
        Command::Partition(c) => ("partition", &c.out, partition(c)?, data_inputs(c)?),
        Command::Train(c) => ("train", &c.out, train(c)?, data_inputs(c)?),
        Command::Evaluate(a) => {
            let mut inputs = data_inputs(&a.common)?;
            inputs.push(a.checkpoint.clone());
            inputs.extend(a.partition.clone());
            ("evaluate", &a.common.out, evaluate_cmd(a)?, inputs)
        }
        Command::Study(a) => {
            let mut inputs = data_inputs(&a.common)?;
            inputs.extend(a.checkpoint.clone());
            ("study", &a.common.out, study(a)?, inputs)
        }
        Command::Sensitivity(a) => {
            let mut inputs = data_inputs(&a.common)?;
            inputs.extend(a.interval.clone());
            inputs.extend(a.context.clone());
            ("sensitivity", &a.common.out, sensitivity(a)?, inputs)
        }
        Command::Case(a) => {
            let mut inputs = data_inputs(&a.common)?;
            inputs.extend(a.checkpoint.iter().map(|c| variant_path(c).1));
            ("case", &a.common.out, case(a)?, inputs)
        }
        Command::Synth(a) => {
            let cfg = synth_cmd(a)?;
            let snapshot = serde_json::to_value(&cfg)?;
            return write_manifest(&a.out, "synth", snapshot, json!({ "seed": cfg.seed }), &[], started);
        }
    };
    let mut all_inputs = inputs;
    if let Some(c) = common_of(command).and_then(|c| c.config.clone()) {
        all_inputs.push(c);
    }
    let seeds = json!({ "seed": cfg.seed, "eval_seed": cfg.eval_seed });
    write_manifest(out, name, serde_json::to_value(&cfg)?, seeds, &all_inputs, started)
}

fn common_of(command: &Command) -> Option<&Common> {
    Some(match command {
        Command::Prepare(a) => &a.common,
        Command::Partition(c) | Command::Train(c) => c,
        Command::Evaluate(a) => &a.common,
        Command::Study(a) => &a.common,
        Command::Sensitivity(a) => &a.common,
        Command::Case(a) => &a.common,
        Command::Synth(_) => return None,
    })
}

/// Defaults < config file < flags.
pub fn resolve_config(c: &Common, extra: &[(&str, String)]) -> Result<Config> {
    let mut layers: Vec<Map<String, Value>> = Vec::new();
    if let Some(path) = &c.config {
        layers.push(Config::from_file(path)?);
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("seed", c.seed.map(|v| v.to_string()));
    flag("uniform_ratio", c.uniform_ratio.map(|v| v.to_string()));
    flag("frequent_ratio", c.frequent_ratio.map(|v| v.to_string()));
    flag("eval_mode", c.mode.clone());
    flag("ks", c.k.clone());
    for (k, v) in extra {
        pairs.push((k.to_string(), v.clone()));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    layers.push(pairs_layer(&pairs));
    let mut cfg = Config::layered(&layers)?;
    if let Some(letters) = &c.ablate {
        cfg.ablate(letters)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn require_data(c: &Common) -> Result<PathBuf> {
    c.data.clone().ok_or_else(|| Error::Config("--data is required".into()))
}

fn data_inputs(c: &Common) -> Result<Vec<PathBuf>> {
    let dir = require_data(c)?;
    Ok([crate::data::META_FILE, crate::data::SPLITS_FILE, USERS_FILE, ITEMS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect())
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(c: &Common) -> Result<SplitDataset> {
    SplitDataset::load(&require_data(c)?)
}

fn labels_for(data: &SplitDataset, cfg: &Config) -> Result<Partition> {
    Partition::from_split(data, cfg.uniform_ratio, cfg.frequent_ratio, cfg.partition_mode)
}

fn eval_options(cfg: &Config) -> EvalOptions {
    EvalOptions {
        mode: cfg.eval_mode,
        ks: cfg.ks.clone(),
        negatives: cfg.eval_negatives,
        seed: cfg.eval_seed,
        target: Target::Test,
    }
}

fn prepare(a: &PrepareArgs) -> Result<Config> {
    let mut extra = Vec::new();
    if let Some(k) = a.k_user {
        extra.push(("k_user", k.to_string()));
    }
    if let Some(k) = a.k_item {
        extra.push(("k_item", k.to_string()));
    }
    let cfg = resolve_config(&a.common, &extra)?;
    let raw_path = require_data(&a.common)?;
    if !raw_path.is_file() {
        return Err(Error::MissingArtifact(raw_path));
    }
    let raw = load_interactions(&raw_path)?;
    let kept = k_core_filter(&raw, cfg.k_user, cfg.k_item);
    log::info!("k-core ({}, {}): {} of {} interactions kept", cfg.k_user, cfg.k_item, kept.len(), raw.len());
    if kept.is_empty() {
        return Err(Error::InvalidInput("no interactions survive the k-core filter".into()));
    }
    let seqs = build_sequences(&kept)?;
    let split = split_leave_one_out(&seqs.sequences, seqs.num_items(), cfg.split_order);
    ensure_out(&a.common.out)?;
    split.save(&a.common.out, &seqs.users, &seqs.items)?;
    Ok(cfg)
}

fn partition(c: &Common) -> Result<Config> {
    let cfg = resolve_config(c, &[])?;
    let data = load_data(c)?;
    let labels = labels_for(&data, &cfg)?;
    ensure_out(&c.out)?;
    labels.save(&c.out.join(PARTITION_FILE))?;
    log::info!(
        "{} of {} sequences uniform, {} of {} items frequent",
        labels.users.num_uniform(),
        labels.users.users.len(),
        labels.items.num_frequent(),
        labels.items.items.len()
    );
    Ok(cfg)
}

fn train_model(data: &SplitDataset, labels: &Partition, cfg: &Config, out: Option<&Path>) -> Result<Model> {
    let setup = TrainSetup::new(data, labels, cfg)?;
    let outcome = fit(&setup)?;
    if let Some(dir) = out {
        labels.save(&dir.join(PARTITION_FILE))?;
        write_neighbors(&setup, dir)?;
        outcome.save(dir, cfg)?;
    }
    log::info!("best epoch {} (val NDCG@10 {:.4})", outcome.best_epoch, outcome.best_val);
    Ok(outcome.best)
}

fn train(c: &Common) -> Result<Config> {
    let cfg = resolve_config(c, &[])?;
    let data = load_data(c)?;
    let labels = labels_for(&data, &cfg)?;
    ensure_out(&c.out)?;
    write_file(&c.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    train_model(&data, &labels, &cfg, Some(&c.out))?;
    Ok(cfg)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Config> {
    let cfg = resolve_config(&a.common, &[])?;
    let data = load_data(&a.common)?;
    let (model, _) = Model::load(&a.checkpoint)?;
    check_compatible(&model, &data)?;
    let labels = match &a.partition {
        Some(p) => Partition::load(p)?,
        None => labels_for(&data, &cfg)?,
    };
    let report = evaluate(&model, &data, &labels, &eval_options(&cfg))?;
    ensure_out(&a.common.out)?;
    report.save(&a.common.out)?;
    log_report(&report);
    Ok(cfg)
}

fn check_compatible(model: &Model, data: &SplitDataset) -> Result<()> {
    if model.config.num_items != data.num_items {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {} items but the dataset has {}",
            model.config.num_items, data.num_items
        )));
    }
    Ok(())
}

fn log_report(report: &MetricReport) {
    for (scope, s) in &report.scopes {
        let cols: Vec<String> = s.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!("{scope:<14} n={:<6} {}", s.count, cols.join(" "));
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad grid value `{s}`"))))
        .collect()
}

fn study(a: &StudyArgs) -> Result<Config> {
    let cfg = resolve_config(&a.common, &[])?;
    let data = load_data(&a.common)?;
    let seq_grid = parse_grid(&a.seq_grid)?;
    let item_grid = parse_grid(&a.item_grid)?;
    let shared = if cfg.retrain_per_cell {
        None
    } else {
        Some(match &a.checkpoint {
            Some(p) => {
                let (m, _) = Model::load(p)?;
                check_compatible(&m, &data)?;
                m
            }
            None => train_model(&data, &labels_for(&data, &cfg)?, &cfg, None)?,
        })
    };
    let rows = study_sweep(
        &data,
        &seq_grid,
        &item_grid,
        (cfg.uniform_ratio, cfg.frequent_ratio),
        cfg.partition_mode,
        &eval_options(&cfg),
        |ur, fr| match &shared {
            Some(m) => Ok(m.clone()),
            None => {
                let cell = Config {
                    uniform_ratio: ur,
                    frequent_ratio: fr,
                    ..cfg.clone()
                };
                train_model(&data, &labels_for(&data, &cell)?, &cell, None)
            }
        },
    )?;
    ensure_out(&a.common.out)?;
    write_file(&a.common.out.join("sweep.csv"), &sweep_csv(&rows))?;
    write_file(&a.common.out.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
    Ok(cfg)
}

fn sensitivity(a: &SensitivityArgs) -> Result<Config> {
    let cfg = resolve_config(&a.common, &[])?;
    let data = load_data(&a.common)?;
    let labels = labels_for(&data, &cfg)?;
    let variant = |path: &Option<PathBuf>, force: ForceChannel| -> Result<Model> {
        match path {
            Some(p) => {
                let (m, _) = Model::load(p)?;
                check_compatible(&m, &data)?;
                Ok(m)
            }
            None => {
                let v = Config {
                    force_channel: force,
                    ..cfg.clone()
                };
                train_model(&data, &labels, &v, None)
            }
        }
    };
    let opts = eval_options(&cfg);
    let interval = evaluate(&variant(&a.interval, ForceChannel::Interval)?, &data, &labels, &opts)?;
    let context = evaluate(&variant(&a.context, ForceChannel::Context)?, &data, &labels, &opts)?;
    let rows = time_sensitivity(&interval, &context);
    ensure_out(&a.common.out)?;
    write_file(&a.common.out.join("sensitivity.csv"), &sensitivity_csv(&rows))?;
    write_file(
        &a.common.out.join("sensitivity.json"),
        &serde_json::to_string_pretty(&json!({ "interval": interval, "context": context, "rows": rows }))?,
    )?;
    Ok(cfg)
}

/// Splits `[variant=]path`; the variant defaults to `full`.
pub fn variant_path(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((v, p)) if !v.is_empty() && !v.contains(['/', '\\']) => (v.to_string(), PathBuf::from(p)),
        _ => ("full".to_string(), PathBuf::from(arg)),
    }
}

fn case(a: &CaseArgs) -> Result<Config> {
    let cfg = resolve_config(&a.common, &[])?;
    let dir = require_data(&a.common)?;
    let data = SplitDataset::load(&dir)?;
    let users_path = dir.join(USERS_FILE);
    if !users_path.exists() {
        return Err(Error::MissingArtifact(users_path));
    }
    let users = IdMap::read_tsv(&users_path, 0)?;
    let user = users.to_dense(&a.user).ok_or_else(|| Error::UnknownUser(a.user.clone()))?;
    let item = match &a.item {
        Some(raw) => {
            let items_path = dir.join(ITEMS_FILE);
            if !items_path.exists() {
                return Err(Error::MissingArtifact(items_path));
            }
            let items = IdMap::read_tsv(&items_path, 1)?;
            Some(items.to_dense(raw).ok_or_else(|| Error::InvalidInput(format!("unknown item {raw}")))?)
        }
        None => None,
    };
    ensure_out(&a.common.out)?;
    for arg in &a.checkpoint {
        let (variant, path) = variant_path(arg);
        let (model, _) = Model::load(&path)?;
        check_compatible(&model, &data)?;
        let side = case_dump(&model, &data, user, item, &variant, &a.common.out)?;
        log::info!("{variant}: user {} item {} score {:.6}", a.user, side.target_item, side.score);
    }
    Ok(cfg)
}

fn synth_cmd(a: &SynthArgs) -> Result<SynthConfig> {
    let base = match a.preset.as_str() {
        "default" => SynthConfig::default(),
        "overfit" => SynthConfig::overfit(SynthConfig::default().seed),
        other => return Err(Error::Config(format!("unknown preset `{other}` (expected default or overfit)"))),
    };
    let cfg = SynthConfig {
        users: a.users.unwrap_or(base.users),
        items: a.items.unwrap_or(base.items),
        seed: a.seed.unwrap_or(base.seed),
        ..base
    };
    let corpus = synth::generate(&cfg)?;
    ensure_out(&a.out)?;
    write_interactions(&a.out.join(SYNTH_FILE), &corpus.interactions)?;
    let planted: BTreeMap<String, bool> = corpus
        .uniform
        .iter()
        .enumerate()
        .map(|(u, &f)| (synth::user_name(u), f))
        .collect();
    write_file(&a.out.join(PLANTED_FILE), &serde_json::to_string_pretty(&json!({ "uniform": planted }))?)?;
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    config: Value,
    seeds: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    elapsed_s: f64,
}

fn write_manifest(out: &Path, command: &str, config: Value, seeds: Value, inputs: &[PathBuf], started: Instant) -> Result<()> {
    let mut input_digests = BTreeMap::new();
    for p in inputs {
        input_digests.insert(p.display().to_string(), digest_file(p)?);
    }
    let mut outputs = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().expect("file").to_string_lossy().into_owned();
        outputs.insert(name, digest_file(&p)?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seeds,
        inputs: input_digests,
        outputs,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    write_file(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)
}

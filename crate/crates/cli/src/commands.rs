//! Subcommands of the `p2c` binary.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context};
use axum::http::HeaderValue;
use clap::{Args, Parser, Subcommand};
use p2c_core::dataio::{load_dataset, make_synthetic, save_dataset, split, Dataset, Split, SyntheticSpec};
use p2c_core::metrics::EvalReport;
use p2c_core::model::{featurize, ModelState, SparseFeatures};
use p2c_core::prefsources::{
    agreement_report, build_extractive, check_pairs_against, class_quotas, load_pairs, plan_subjective_round,
    query_generative, run_simulated_round, sample_same_label_partners, save_pairs, HttpCompletion, LlmClientConfig,
    NoisyOracleWorker, PreferencePair, SubjectiveRoundState, Worker, DEFAULT_ROUND_SCHEDULE,
};
use p2c_core::rng::SeedStream;
use p2c_core::trainer::{evaluate_split, train, HistoryRecord, Method, TrainConfig, TrainOutcome};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::service::{router, RoundService, RoundSpec, ServiceError, SharedService, SystemClock};

/// A problem with how the command was invoked (bad flag combination,
/// unreadable config file) rather than with the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit status for a failed command: 1 usage, 2 data validation, 3 runtime.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<p2c_core::Error>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::Core(inner) => core_code(inner),
                ServiceError::BadRequest(_) => 1,
                ServiceError::InvalidRound(_) | ServiceError::Log { .. } => 2,
                _ => 3,
            };
        }
    }
    3
}

fn core_code(e: &p2c_core::Error) -> u8 {
    match e {
        p2c_core::Error::Config(_) => 1,
        p2c_core::Error::Validation(_) | p2c_core::Error::Json(_) => 2,
        _ => 3,
    }
}

#[derive(Debug, Parser)]
#[command(name = "p2c", version, about = "Train text classifiers with auxiliary pairwise preference learning")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with simulated annotator votes.
    Synth(SynthArgs),
    /// Build preference pairs from vote counts or an LLM.
    #[command(subcommand)]
    BuildPrefs(PrefSource),
    /// Train a classifier and write checkpoint, history and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    Eval(EvalArgs),
    /// Run subjective-preference rounds: train, plan, collect, repeat.
    Rounds(RoundsArgs),
    /// Serve one annotation round over HTTP.
    Serve(ServeArgs),
    /// Agreement statistics between preference files.
    Report(ReportArgs),
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::BuildPrefs(PrefSource::Extractive(a)) => extractive(a),
        Command::BuildPrefs(PrefSource::Generative(a)) => generative(a),
        Command::Train(a) => train_command(a),
        Command::Eval(a) => eval(a),
        Command::Rounds(a) => rounds(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    }
}

/// Reads a JSON object and lays it over the serialized defaults, so config
/// files may name only the fields they change.
fn load_config<T: Serialize + DeserializeOwned>(path: Option<&Path>, defaults: T) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(defaults) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let overrides: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not JSON: {e}", path.display())))?;
    let Value::Object(overrides) = overrides else {
        return Err(usage(format!("config {} must be a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(defaults)?;
    let target = merged.as_object_mut().expect("configs serialize to objects");
    for (k, v) in overrides {
        if !target.contains_key(&k) {
            return Err(usage(format!("config {}: unknown field `{k}`", path.display())));
        }
        target.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown split `{s}` (expected train, val or test)"))
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split([',', ':'])
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad fraction `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [a, b, c] = parts[..] else { return Err("expected three fractions, e.g. 8:1:1".into()) };
    let total = a + b + c;
    if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || [a, b, c].iter().any(|v| *v < 0.0) {
        return Err("fractions must be non-negative with a positive sum".into());
    }
    Ok((a / total, b / total, c / total))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Rows of the training split, or every row when `all` is set or the data
/// carries no split tags.
fn training_rows(ds: &Dataset, all: bool) -> Dataset {
    if all || ds.examples.iter().all(|e| e.split.is_none()) {
        ds.clone()
    } else {
        ds.subset(Split::Train)
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator fields (num_classes, noise, n_vote, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub examples_per_class: Option<usize>,
    /// Mean annotator error rate.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_vote: Option<u32>,
    /// Train/val/test fractions.
    #[arg(long, default_value = "8:1:1", value_parser = parse_fractions)]
    pub split: (f64, f64, f64),
    /// Leave examples untagged.
    #[arg(long)]
    pub no_split: bool,
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut spec = load_config(a.config.as_deref(), SyntheticSpec::default())?;
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.num_classes = a.classes.unwrap_or(spec.num_classes);
    spec.examples_per_class = a.examples_per_class.unwrap_or(spec.examples_per_class);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.n_vote = a.n_vote.unwrap_or(spec.n_vote);
    let mut ds = make_synthetic(&spec)?;
    if !a.no_split {
        ds = split(&ds, a.split, spec.seed)?;
    }
    save_dataset(&ds, &a.out)?;
    info!(examples = ds.len(), out = %a.out.display(), "wrote synthetic dataset");
    Ok(())
}

// ---------------------------------------------------------------- build-prefs

#[derive(Debug, Subcommand)]
pub enum PrefSource {
    /// Label same-class pairs by comparing annotator vote counts.
    Extractive(ExtractiveArgs),
    /// Ask a completion endpoint which of two same-class sentences is stronger.
    Generative(GenerativeArgs),
}

#[derive(Debug, Args)]
pub struct ExtractiveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs_per_example: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pair examples from every split, not just train.
    #[arg(long)]
    pub all_splits: bool,
}

fn extractive(a: ExtractiveArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data)?;
    let rows = training_rows(&ds, a.all_splits);
    let pairs = build_extractive(&rows, a.pairs_per_example, a.seed)?;
    save_pairs(&pairs, &a.out)?;
    info!(pairs = pairs.len(), out = %a.out.display(), "wrote extractive preferences");
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerativeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with client fields (endpoint, model, max_retries, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Directory caching responses by (model, prompt).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Comparisons drawn per example.
    #[arg(long, default_value_t = 1)]
    pub partners: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub all_splits: bool,
}

fn generative(a: GenerativeArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref(), LlmClientConfig::default())?;
    if let Some(e) = a.endpoint {
        cfg.endpoint = e;
    }
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if a.cache_dir.is_some() {
        cfg.cache_dir = a.cache_dir;
    }
    let ds = load_dataset(&a.data)?;
    let rows = training_rows(&ds, a.all_splits);
    let mut rng = SeedStream::new(a.seed).substream(SeedStream::PAIRING);
    let comparisons: Vec<(String, String)> = sample_same_label_partners(&rows, a.partners, &mut rng)
        .into_iter()
        .map(|(x1, x0)| (rows.examples[x0].id.clone(), rows.examples[x1].id.clone()))
        .collect();
    let client = HttpCompletion::new(&cfg);
    let outcome = query_generative(&rows, &comparisons, &cfg, &client)?;
    for (id0, id1, err) in &outcome.failed {
        warn!(id0, id1, error = %err, "comparison failed after retries");
    }
    save_pairs(&outcome.pairs, &a.out)?;
    eprintln!(
        "{}",
        json!({
            "pairs": outcome.pairs.len(),
            "failed": outcome.failed.len(),
            "unparsed": outcome.unparsed,
            "network_calls": outcome.network_calls,
            "cache_hits": outcome.cache_hits,
        })
    );
    if outcome.pairs.is_empty() && !outcome.failed.is_empty() {
        bail!("every comparison failed; see the log for the last error of each");
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset (JSONL). Untagged data is split 8:1:1 with the run seed.
    #[arg(long)]
    pub data: PathBuf,
    /// Preference pairs (JSONL), required for p2c.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// JSON file with training fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Output directory for model.json, history.jsonl and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn resolve_train_config(
    config: Option<&Path>,
    method: Option<Method>,
    seed: Option<u64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = load_config(config, TrainConfig::default())?;
    cfg.method = method.unwrap_or(cfg.method);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a dataset, splitting it 8:1:1 when it carries no split tags.
fn load_tagged(path: &Path, seed: u64) -> anyhow::Result<Dataset> {
    let ds = load_dataset(path)?;
    if !ds.is_empty() && ds.examples.iter().all(|e| e.split.is_none()) {
        info!("data has no split tags; splitting 8:1:1");
        return Ok(split(&ds, (0.8, 0.1, 0.1), seed)?);
    }
    Ok(ds)
}

fn train_command(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(a.config.as_deref(), a.method, a.seed, a.epochs, a.learning_rate)?;
    let ds = load_tagged(&a.data, cfg.seed)?;
    let pairs = match &a.pairs {
        Some(p) => {
            let pairs = load_pairs(p)?;
            check_pairs_against(&pairs, &ds)?;
            Some(pairs)
        }
        None if cfg.method == Method::P2c => return Err(usage("method p2c needs --pairs")),
        None => None,
    };
    let outcome = train(&ds, pairs.as_deref(), &cfg)?;
    let summary = write_training_outputs(&a.out, &ds, &outcome)?;
    print_json(&summary)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub method: Method,
    pub best_val_accuracy: Option<f64>,
    pub best_step: usize,
    pub temperature: f64,
    pub selection: Vec<p2c_core::trainer::SelectionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
    pub config: TrainConfig,
}

fn write_history(path: &Path, history: &[HistoryRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for h in history {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_outputs(out: &Path, ds: &Dataset, outcome: &TrainOutcome) -> anyhow::Result<TrainSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.model.save(out.join("model.json"))?;
    write_history(&out.join("history.jsonl"), &outcome.history)?;
    let has_test = ds.examples.iter().any(|e| e.split == Some(Split::Test));
    let test = has_test
        .then(|| evaluate_split(&outcome.model, ds, Some(Split::Test), outcome.config.ece_bins))
        .transpose()?;
    let summary = TrainSummary {
        method: outcome.config.method,
        best_val_accuracy: outcome.best_val_accuracy,
        best_step: outcome.best_step,
        temperature: outcome.model.temperature,
        selection: outcome.selection.clone(),
        test,
        config: outcome.config.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    info!(out = %out.display(), "wrote checkpoint, history and summary");
    Ok(summary)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to one split; default is every row in the file.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Also write the reliability diagram as CSV.
    #[arg(long)]
    pub reliability: Option<PathBuf>,
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let model = ModelState::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if ds.num_classes != model.num_classes() {
        return Err(p2c_core::Error::Validation(format!(
            "data has {} classes but the checkpoint predicts {}",
            ds.num_classes,
            model.num_classes()
        ))
        .into());
    }
    let report = evaluate_split(&model, &ds, a.split, a.bins)?;
    if let Some(path) = &a.reliability {
        fs::write(path, report.reliability_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&report)
}

// ---------------------------------------------------------------- serve

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Round definition (JSON); optional when resuming from --log.
    #[arg(long)]
    pub round: Option<PathBuf>,
    /// Append-only event log; replayed on start.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Only this origin may call the API from a browser (default: any).
    #[arg(long)]
    pub ui_origin: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub lease_minutes: u64,
    /// Stop once every pair is finalized.
    #[arg(long)]
    pub exit_when_complete: bool,
}

fn origin_header(origin: Option<&str>) -> anyhow::Result<Option<HeaderValue>> {
    origin.map(|o| HeaderValue::from_str(o).map_err(|_| usage(format!("invalid origin `{o}`")))).transpose()
}

fn open_service(log: &Path, spec: Option<RoundSpec>, lease_minutes: u64) -> anyhow::Result<SharedService> {
    if lease_minutes == 0 {
        return Err(usage("--lease-minutes must be positive"));
    }
    let service = RoundService::open(log, spec, Arc::new(SystemClock))?
        .with_lease_duration(Duration::from_secs(lease_minutes * 60));
    Ok(Arc::new(Mutex::new(service)))
}

fn is_complete(service: &SharedService) -> bool {
    service.lock().map(|s| s.state().is_complete()).unwrap_or(true)
}

/// Serves `service` until it completes (when `until_complete`) or Ctrl-C.
fn serve_blocking(
    service: SharedService,
    addr: SocketAddr,
    origin: Option<HeaderValue>,
    until_complete: bool,
) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        info!(addr = %listener.local_addr()?, "annotation service listening");
        let watched = service.clone();
        let shutdown = async move {
            let complete = async {
                loop {
                    tokio::time::sleep(Duration::from_millis(500)).await;
                    if until_complete && is_complete(&watched) {
                        break;
                    }
                }
            };
            tokio::select! {
                _ = complete => info!("round complete; shutting down"),
                _ = tokio::signal::ctrl_c() => info!("interrupted; labels so far are in the event log"),
            }
        };
        axum::serve(listener, router(service, origin)).with_graceful_shutdown(shutdown).await?;
        anyhow::Ok(())
    })
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let spec = a.round.as_ref().map(RoundSpec::load).transpose()?;
    let origin = origin_header(a.ui_origin.as_deref())?;
    let service = open_service(&a.log, spec, a.lease_minutes)?;
    serve_blocking(service, a.addr, origin, a.exit_when_complete)
}

// ---------------------------------------------------------------- rounds

#[derive(Debug, Args)]
pub struct RoundsArgs {
    /// Dataset (JSONL); rounds draw pairs from its train split.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (JSON) used between rounds and for the final model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Working directory; completed rounds found here are not repeated.
    #[arg(long)]
    pub out: PathBuf,
    /// Pairs per round.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ROUND_SCHEDULE)]
    pub schedule: Vec<usize>,
    /// Candidate partners drawn per example when planning a round.
    #[arg(long, default_value_t = 4)]
    pub candidates_per_example: usize,
    /// Answer with this many simulated workers instead of serving HTTP.
    #[arg(long)]
    pub simulate: Option<usize>,
    /// Chance a simulated worker answers at random.
    #[arg(long, default_value_t = 0.1)]
    pub worker_flip: f64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub ui_origin: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub lease_minutes: u64,
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

fn rounds(a: RoundsArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_train_config(a.config.as_deref(), Some(Method::P2c), a.seed, None, None)?;
    cfg.method = Method::P2c;
    let ds = load_tagged(&a.data, cfg.seed)?;
    let train_rows = ds.subset(Split::Train);
    if let Some(n) = a.simulate {
        if n < 3 {
            return Err(usage("--simulate needs at least 3 workers"));
        }
        if !(0.0..=1.0).contains(&a.worker_flip) {
            return Err(usage("--worker-flip must lie in [0, 1]"));
        }
    }
    let origin = origin_header(a.ui_origin.as_deref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let streams = SeedStream::new(cfg.seed);
    let features: Vec<SparseFeatures> =
        train_rows.examples.iter().map(|e| featurize(&e.text, &cfg.features)).collect();

    let mut collected: Vec<PreferencePair> = Vec::new();
    let mut used: HashSet<(String, String)> = HashSet::new();
    for (r, &size) in a.schedule.iter().enumerate() {
        let done_path = a.out.join(format!("pairs-round-{r}.jsonl"));
        if done_path.exists() {
            let pairs = load_pairs(&done_path)?;
            info!(round = r, pairs = pairs.len(), "round already collected; reusing");
            used.extend(pairs.iter().map(|p| unordered(&p.id0, &p.id1)));
            collected.extend(pairs);
            continue;
        }
        let model = if collected.is_empty() {
            None
        } else {
            info!(round = r, pairs = collected.len(), "training the planning model");
            Some(train(&ds, Some(&collected), &cfg)?.model)
        };
        let mut rng = streams.indexed("rounds", r);
        let pool: Vec<(usize, usize)> = sample_same_label_partners(&train_rows, a.candidates_per_example, &mut rng)
            .into_iter()
            .filter(|&(x1, x0)| {
                let key = unordered(&train_rows.examples[x1].id, &train_rows.examples[x0].id);
                !used.contains(&key)
            })
            .collect();
        let planned = plan_subjective_round(model.as_ref(), &train_rows, &features, &pool, size, &mut rng)?;
        let mut comparisons = Vec::with_capacity(planned.len());
        for (x1, x0) in planned {
            let (id0, id1) = (&train_rows.examples[x0].id, &train_rows.examples[x1].id);
            if used.insert(unordered(id0, id1)) {
                comparisons.push((id0.clone(), id1.clone()));
            }
        }
        let spec = RoundSpec::from_comparisons(r, &train_rows, &comparisons, class_quotas(size, ds.num_classes))?;
        spec.save(a.out.join(format!("round-{r}.json")))?;
        info!(round = r, pairs = spec.pairs.len(), "round planned");

        let finalized = match a.simulate {
            Some(n) => {
                let mut state = SubjectiveRoundState::new(r, comparisons, spec.quotas.clone());
                let mut workers: Vec<Box<dyn Worker>> = (0..n)
                    .map(|w| {
                        let rng = streams.indexed("workers", r * 1000 + w);
                        Box::new(NoisyOracleWorker::new(format!("sim-{w}"), a.worker_flip, rng)) as Box<dyn Worker>
                    })
                    .collect();
                run_simulated_round(&mut state, &train_rows, &mut workers)?;
                state.finalized_pairs()
            }
            None => {
                let log = a.out.join(format!("round-{r}.events.jsonl"));
                let service = open_service(&log, Some(spec), a.lease_minutes)?;
                if !is_complete(&service) {
                    serve_blocking(service.clone(), a.addr, origin.clone(), true)?;
                }
                let service = service.lock().map_err(|_| anyhow::anyhow!("round state poisoned"))?;
                if !service.state().is_complete() {
                    bail!("round {r} stopped before completion; rerun to resume from {}", log.display());
                }
                service.export()
            }
        };
        save_pairs(&finalized, &done_path)?;
        collected.extend(finalized);
    }

    save_pairs(&collected, a.out.join("pairs.jsonl"))?;
    if collected.is_empty() {
        bail!("no preference pairs were collected");
    }
    let outcome = train(&ds, Some(&collected), &cfg)?;
    let summary = write_training_outputs(&a.out, &ds, &outcome)?;
    print_json(&summary)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Two or more preference files to compare pairwise.
    #[arg(long = "pairs", num_args = 1.., required = true)]
    pub pairs: Vec<PathBuf>,
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    if a.pairs.len() < 2 {
        return Err(usage("report needs at least two --pairs files"));
    }
    let sets: Vec<Vec<PreferencePair>> = a.pairs.iter().map(load_pairs).collect::<Result<_, _>>()?;
    let sources: Vec<Value> = a
        .pairs
        .iter()
        .zip(&sets)
        .map(|(path, set)| {
            let ties = set.iter().filter(|p| (p.pref - 0.5).abs() < 1e-12).count();
            json!({ "path": path, "pairs": set.len(), "no_preference": ties })
        })
        .collect();
    let mut comparisons = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            comparisons.push(json!({
                "a": a.pairs[i],
                "b": a.pairs[j],
                "agreement": agreement_report(&sets[i], &sets[j]),
            }));
        }
    }
    print_json(&json!({ "sources": sources, "comparisons": comparisons }))
}

//! Training loops for P2C and the comparison baselines, with Adam.

use std::collections::HashMap;

use rand::seq::{index, IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::baselines::{
    agreement_weight, filter_mask, graph_cskd, graph_margin_hinge, graph_max_entropy, graph_multi_annotator,
    graph_soft, graph_vanilla, graph_weighted, label_smoothing_target, AnnotationRecord, CSKD_TEMPERATURE,
    LABEL_SMOOTHING_GRID, MAX_ENTROPY_GRID,
};
use crate::dataio::{Dataset, Example, Split};
use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::losses::{
    build_p2c_graph, diversity_loss, predict_pairs, read_breakdown, ConsistencyConfig, ConsistencyVariant,
    LossBreakdown, LossWeights, Orientation, PairBatch, PairExample, TaskBatch,
};
use crate::metrics::{evaluate, fit_temperature, EvalReport};
use crate::model::{featurize, BoundModel, FeatureConfig, ModelConfig, ModelState, SparseFeatures};
use crate::prefsources::PreferencePair;
use crate::rng::{SeedStream, StreamRng};
use crate::sampling::{score_pairs, select, Candidate, CandidatePool, Strategy};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Vanilla,
    Soft,
    Margin,
    Filter,
    Weight,
    MultiAnnotator,
    Cskd,
    LabelSmooth,
    MaxEntropy,
    P2c,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Vanilla,
        Method::Soft,
        Method::Margin,
        Method::Filter,
        Method::Weight,
        Method::MultiAnnotator,
        Method::Cskd,
        Method::LabelSmooth,
        Method::MaxEntropy,
        Method::P2c,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Soft => "soft",
            Method::Margin => "margin",
            Method::Filter => "filter",
            Method::Weight => "weight",
            Method::MultiAnnotator => "multi_annotator",
            Method::Cskd => "cskd",
            Method::LabelSmooth => "label_smooth",
            Method::MaxEntropy => "max_entropy",
            Method::P2c => "p2c",
        }
    }

    /// Whether the method reads annotation vote counts.
    pub fn needs_votes(self) -> bool {
        matches!(self, Method::Soft | Method::Margin | Method::Filter | Method::Weight | Method::MultiAnnotator)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_div: f64,
    pub lambda_cons: f64,
    /// Tied values of `lambda_div = lambda_cons` tried for P2C, picked by
    /// validation accuracy. Empty means use the two fields as given.
    pub lambda_grid: Vec<f64>,
    /// Number of preference heads `T`.
    pub pref_heads: usize,
    pub sampling: Strategy,
    /// Candidate pool size as a multiple of the pair batch.
    pub pool_factor: usize,
    pub consistency: ConsistencyVariant,
    pub orientation: Orientation,
    /// Label-smoothing strength; `None` searches the standard grid.
    pub label_smoothing: Option<f64>,
    /// Max-entropy weight; `None` searches the standard grid.
    pub max_entropy: Option<f64>,
    pub seed: u64,
    /// Validate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub ece_bins: usize,
    pub features: FeatureConfig,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub pref_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Vanilla,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda_div: 1.0,
            lambda_cons: 1.0,
            lambda_grid: vec![1.0, 0.1],
            pref_heads: 3,
            sampling: Strategy::Inconsistency,
            pool_factor: 4,
            consistency: ConsistencyVariant::Margin,
            orientation: Orientation::Intuitive,
            label_smoothing: None,
            max_entropy: None,
            seed: 0,
            eval_every: 0,
            ece_bins: 10,
            features: FeatureConfig::default(),
            emb_dim: 64,
            hidden_dim: 64,
            pref_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pool_factor == 0 || self.ece_bins == 0 {
            return Err(Error::config("epochs, batch_size, pool_factor and ece_bins must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        let lambdas = [self.lambda_div, self.lambda_cons].into_iter().chain(self.lambda_grid.iter().copied());
        for v in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config("lambda values must be non-negative"));
            }
        }
        if let Some(t) = self.label_smoothing {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::config("label_smoothing must lie in [0, 1)"));
            }
        }
        if let Some(l) = self.max_entropy {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("max_entropy must be non-negative"));
            }
        }
        self.features.validate()
    }

    /// Pairs per step: half the task batch, at least one.
    pub fn pair_batch(&self) -> usize {
        (self.batch_size / 2).max(1)
    }

    fn model_config(&self, num_classes: usize, pref_heads: usize, task_heads: usize) -> ModelConfig {
        ModelConfig {
            features: self.features.clone(),
            emb_dim: self.emb_dim,
            hidden_dim: self.hidden_dim,
            num_classes,
            pref_heads,
            pref_hidden: self.pref_hidden,
            task_heads,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient (unused
/// in the graph) are left untouched, moments included.
pub fn adam_step(params: &mut [Tensor], grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::validation("optimizer state does not match the parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (id, grad) in grads.iter() {
        let Some(grad) = grad else { continue };
        let i = id.0;
        if grad.shape() != params[i].shape() {
            return Err(Error::validation(format!("gradient shape mismatch for parameter {i}")));
        }
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Validation accuracy of one hyperparameter candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub name: String,
    pub value: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters with the fitted temperature.
    pub model: ModelState,
    pub history: Vec<HistoryRecord>,
    pub best_val_accuracy: Option<f64>,
    pub best_step: usize,
    /// The configuration that produced `model` (grid choices filled in).
    pub config: TrainConfig,
    pub selection: Vec<SelectionRecord>,
}

/// Features and labels of a dataset, split into training and validation rows.
pub struct Prepared<'d> {
    pub dataset: &'d Dataset,
    pub features: Vec<SparseFeatures>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub records: Option<Vec<AnnotationRecord>>,
    id_index: HashMap<&'d str, usize>,
}

impl<'d> Prepared<'d> {
    /// Untagged examples count as training data.
    pub fn new(dataset: &'d Dataset, features: &FeatureConfig) -> Result<Self> {
        features.validate()?;
        let feats = dataset.examples.iter().map(|e| featurize(&e.text, features)).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, e) in dataset.examples.iter().enumerate() {
            match e.split {
                Some(Split::Val) => val.push(i),
                Some(Split::Test) => {}
                Some(Split::Train) | None => train.push(i),
            }
        }
        if train.is_empty() {
            return Err(Error::validation("dataset has no training examples"));
        }
        let records: Option<Vec<AnnotationRecord>> = dataset.examples.iter().map(Example::record).collect();
        Ok(Self { dataset, features: feats, train, val, records, id_index: dataset.index_by_id() })
    }

    fn label(&self, i: usize) -> usize {
        self.dataset.examples[i].label
    }

    fn records(&self) -> Result<&[AnnotationRecord]> {
        self.records.as_deref().ok_or_else(|| Error::validation("this method needs vote counts on every example"))
    }

    fn val_accuracy(&self, model: &ModelState) -> Result<f64> {
        let logits = predict_logits_batched(model, &self.features, &self.val)?;
        let correct = logits.iter().zip(&self.val).filter(|(z, &i)| argmax(z) == self.label(i)).count();
        Ok(correct as f64 / self.val.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Model logits for the given rows of `features`, in chunks.
pub fn predict_logits_batched(model: &ModelState, features: &[SparseFeatures], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let f: Vec<&SparseFeatures> = chunk.iter().map(|&i| &features[i]).collect();
        out.extend(model.predict_logits(&f)?);
    }
    Ok(out)
}

/// Full report on one split, using the model's stored temperature.
pub fn evaluate_split(model: &ModelState, dataset: &Dataset, split: Option<Split>, bins: usize) -> Result<EvalReport> {
    let rows: Vec<usize> = (0..dataset.len()).filter(|&i| split.is_none() || dataset.examples[i].split == split).collect();
    let feats: Vec<SparseFeatures> = rows
        .iter()
        .map(|&i| featurize(&dataset.examples[i].text, &model.config.features))
        .collect();
    let all: Vec<usize> = (0..rows.len()).collect();
    let logits = predict_logits_batched(model, &feats, &all)?;
    let labels: Vec<usize> = rows.iter().map(|&i| dataset.examples[i].label).collect();
    let records: Option<Vec<AnnotationRecord>> = rows.iter().map(|&i| dataset.examples[i].record()).collect();
    Ok(evaluate(&logits, &labels, records.as_deref(), dataset.num_classes, model.temperature, bins))
}

/// Mean pairwise KL between the preference heads' two-outcome predictions,
/// averaged over pairs.
pub fn head_diversity(model: &ModelState, batch: &PairBatch<'_>) -> Result<f64> {
    if model.pref_heads() < 2 || batch.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_pairs(model, batch)?;
    let total: f64 = preds
        .head_probs
        .iter()
        .map(|h| {
            let dists: Vec<[f64; 2]> = h.iter().map(|&p| [p, 1.0 - p]).collect();
            -diversity_loss(&dists)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Nodes produced by one training step's objective.
struct StepGraph {
    total: NodeId,
    p2c: Option<crate::losses::P2cNodes>,
}

/// The shared epoch/step loop. `build` adds the step objective to a fresh
/// graph given the current model and the task mini-batch.
fn run_loop(
    prep: &Prepared<'_>,
    cfg: &TrainConfig,
    mut model: ModelState,
    mut build: impl FnMut(&mut Graph, &BoundModel, &ModelState, &[usize]) -> Result<StepGraph>,
) -> Result<TrainOutcome> {
    let seeds = SeedStream::new(cfg.seed);
    let mut batch_rng = seeds.substream(SeedStream::BATCHING);
    let mut opt = OptimizerState::new(model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut order = prep.train.clone();
    let mut step = 0usize;
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let nodes = build(&mut g, &bound, &model, chunk)?;
            let ev = g.forward(model.params())?;
            let loss = match &nodes.p2c {
                Some(n) => read_breakdown(&ev, n),
                None => {
                    let v = ev.value(nodes.total).item();
                    LossBreakdown { total: v, task: v, ..Default::default() }
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}: {loss:?}; try a smaller learning rate or lambda"
                )));
            }
            let grads = ev.backward(nodes.total)?;
            drop(ev);
            adam_step(model.params_mut(), &grads, &mut opt, cfg.learning_rate)?;
            step += 1;

            let last_in_epoch = b + 1 == steps_per_epoch;
            let due = if cfg.eval_every == 0 { last_in_epoch } else { step.is_multiple_of(cfg.eval_every) };
            let val_accuracy = if due && !prep.val.is_empty() {
                let acc = prep.val_accuracy(&model)?;
                if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
                    best = Some((acc, step, model.params().to_vec()));
                }
                Some(acc)
            } else {
                None
            };
            history.push(HistoryRecord { epoch, step, loss, val_accuracy });
        }
        debug!(epoch, step, "epoch finished");
    }

    let (best_val_accuracy, best_step) = match best {
        Some((acc, s, params)) => {
            model.params_mut().clone_from_slice(&params);
            (Some(acc), s)
        }
        None => (None, step),
    };
    if !prep.val.is_empty() {
        let logits = predict_logits_batched(&model, &prep.features, &prep.val)?;
        let labels: Vec<usize> = prep.val.iter().map(|&i| prep.label(i)).collect();
        model.temperature = fit_temperature(&logits, &labels);
    }
    Ok(TrainOutcome {
        model,
        history,
        best_val_accuracy,
        best_step,
        config: cfg.clone(),
        selection: Vec::new(),
    })
}

/// Trains one of the baseline objectives.
pub fn train_baseline(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let prep = Prepared::new(dataset, &config.features)?;
    train_baseline_prepared(&prep, config)
}

fn train_baseline_prepared(prep: &Prepared<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let k = prep.dataset.num_classes;
    let method = cfg.method;
    if method == Method::P2c {
        return Err(Error::config("p2c is trained with train_p2c_extractive or train_p2c_fixed_pairs"));
    }
    let records = if method.needs_votes() { Some(prep.records()?) } else { None };
    let task_heads = if method == Method::MultiAnnotator {
        let recs = records.expect("votes checked");
        let n = recs[prep.train[0]].n_vote();
        if prep.train.iter().any(|&i| recs[i].n_vote() != n) {
            return Err(Error::validation("multi-annotator training needs the same vote count on every example"));
        }
        n as usize
    } else {
        1
    };
    let model = ModelState::init(cfg.model_config(k, 0, task_heads), cfg.seed)?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &prep.train {
        by_class[prep.label(i)].push(i);
    }
    let mut cskd_rng: StreamRng = SeedStream::new(cfg.seed).substream("cskd");
    let smoothing = cfg.label_smoothing.unwrap_or(LABEL_SMOOTHING_GRID[1]);
    let entropy = cfg.max_entropy.unwrap_or(MAX_ENTROPY_GRID[0]);

    run_loop(prep, cfg, model, |g, bound, _, rows| {
        let feats: Vec<&SparseFeatures> = rows.iter().map(|&i| &prep.features[i]).collect();
        let labels: Vec<usize> = rows.iter().map(|&i| prep.label(i)).collect();
        let rec = |i: usize| &records.expect("votes checked")[i];
        let total = match method {
            Method::Cskd => {
                let partners: Vec<usize> = rows
                    .iter()
                    .map(|&i| *by_class[prep.label(i)].choose(&mut cskd_rng).expect("own class is non-empty"))
                    .collect();
                let mut all = feats.clone();
                all.extend(partners.iter().map(|&j| &prep.features[j]));
                let rep = bound.encode(g, &all)?;
                let n = rows.len();
                let rx = g.index_select(rep, (0..n).collect())?;
                let rh = g.index_select(rep, (n..2 * n).collect())?;
                let lx = bound.logits(g, rx, 0)?;
                let lh = bound.logits(g, rh, 0)?;
                graph_cskd(g, lx, lh, &labels, CSKD_TEMPERATURE)?
            }
            Method::MultiAnnotator => {
                let rep = bound.encode(g, &feats)?;
                let heads: Vec<NodeId> =
                    (0..task_heads).map(|h| bound.logits(g, rep, h)).collect::<Result<_, _>>()?;
                let slots: Vec<Vec<usize>> = rows.iter().map(|&i| rec(i).annotator_slots()).collect();
                let per_head: Vec<Vec<usize>> = (0..task_heads).map(|h| slots.iter().map(|s| s[h]).collect()).collect();
                graph_multi_annotator(g, &heads, &per_head)?
            }
            _ => {
                let rep = bound.encode(g, &feats)?;
                let logits = bound.logits(g, rep, 0)?;
                match method {
                    Method::Vanilla => graph_vanilla(g, logits, &labels)?,
                    Method::Soft => {
                        let q: Vec<Vec<f64>> = rows.iter().map(|&i| rec(i).soft_label()).collect();
                        graph_soft(g, logits, &q)?
                    }
                    Method::Margin => {
                        let q: Vec<Vec<f64>> = rows.iter().map(|&i| rec(i).soft_label()).collect();
                        graph_margin_hinge(g, logits, &q)?
                    }
                    Method::Filter => {
                        let w: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(filter_mask(rec(i))))).collect();
                        graph_weighted(g, logits, &labels, &w)?
                    }
                    Method::Weight => {
                        let w: Vec<f64> = rows.iter().map(|&i| agreement_weight(rec(i))).collect();
                        graph_weighted(g, logits, &labels, &w)?
                    }
                    Method::LabelSmooth => {
                        let q: Vec<Vec<f64>> = labels.iter().map(|&y| label_smoothing_target(y, smoothing, k)).collect();
                        graph_soft(g, logits, &q)?
                    }
                    Method::MaxEntropy => graph_max_entropy(g, logits, &labels, entropy)?,
                    _ => unreachable!("handled above"),
                }
            }
        };
        Ok(StepGraph { total, p2c: None })
    })
}

/// A preference pair resolved to dataset rows.
struct ResolvedPair {
    x1: usize,
    x0: usize,
    y_task: usize,
    pref: f64,
    margins: Option<Vec<f64>>,
}

fn resolve_pairs(prep: &Prepared<'_>, pairs: &[PreferencePair]) -> Result<Vec<ResolvedPair>> {
    let in_train: Vec<bool> = {
        let mut v = vec![false; prep.dataset.len()];
        for &i in &prep.train {
            v[i] = true;
        }
        v
    };
    let mut out = Vec::with_capacity(pairs.len());
    let mut outside = 0usize;
    for p in pairs {
        p.validate()?;
        let (Some(&i0), Some(&i1)) = (prep.id_index.get(p.id0.as_str()), prep.id_index.get(p.id1.as_str())) else {
            return Err(Error::validation(format!("pair ({}, {}) names an unknown example", p.id0, p.id1)));
        };
        let y = prep.label(i1);
        if prep.label(i0) != y {
            return Err(Error::validation(format!("pair ({}, {}) crosses labels", p.id0, p.id1)));
        }
        if !(in_train[i0] && in_train[i1]) {
            outside += 1;
            continue;
        }
        out.push(ResolvedPair { x1: i1, x0: i0, y_task: y, pref: p.pref, margins: p.margins.clone() });
    }
    if outside > 0 {
        warn!(skipped = outside, "ignoring preference pairs that touch non-training examples");
    }
    if out.is_empty() {
        return Err(Error::validation("no usable preference pairs in the training split"));
    }
    Ok(out)
}

fn pair_batch<'a>(prep: &'a Prepared<'_>, pairs: &[ResolvedPair], keys: &[usize]) -> PairBatch<'a> {
    PairBatch::new(
        keys.iter()
            .map(|&k| {
                let p = &pairs[k];
                PairExample {
                    x0: &prep.features[p.x0],
                    x1: &prep.features[p.x1],
                    y_task: p.y_task,
                    y_pref: p.pref,
                    margins: p.margins.clone(),
                }
            })
            .collect(),
    )
}

#[derive(Clone, Copy, PartialEq)]
enum PairMode {
    /// Score a fresh candidate pool every step.
    Sampled,
    /// Draw uniformly from the fixed set.
    Fixed,
}

fn train_p2c_prepared(
    prep: &Prepared<'_>,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    mode: PairMode,
) -> Result<TrainOutcome> {
    let resolved = resolve_pairs(prep, pairs)?;
    let k = prep.dataset.num_classes;
    let cons = ConsistencyConfig {
        variant: if mode == PairMode::Fixed { ConsistencyVariant::Plain } else { cfg.consistency },
        orientation: cfg.orientation,
    };
    if cons.variant == ConsistencyVariant::Margin && resolved.iter().any(|p| p.margins.is_none()) {
        return Err(Error::config("margin consistency needs margins on every pair"));
    }
    let weights = LossWeights { lambda_div: cfg.lambda_div, lambda_cons: cfg.lambda_cons, heads: cfg.pref_heads };
    let model = ModelState::init(cfg.model_config(k, cfg.pref_heads, 1), cfg.seed)?;
    let mut pair_rng = SeedStream::new(cfg.seed).substream(SeedStream::PAIRING);
    let bp = cfg.pair_batch();
    let strategy = if cfg.pref_heads < 2 && cfg.sampling == Strategy::Disagreement {
        warn!("disagreement sampling needs two or more heads; falling back to random");
        Strategy::Random
    } else {
        cfg.sampling
    };

    run_loop(prep, cfg, model, |g, bound, current, rows| {
        let keys: Vec<usize> = match mode {
            PairMode::Fixed => index::sample(&mut pair_rng, resolved.len(), bp.min(resolved.len())).into_vec(),
            PairMode::Sampled => {
                let pool_size = (cfg.pool_factor * bp).min(resolved.len());
                let mut cand = index::sample(&mut pair_rng, resolved.len(), pool_size).into_vec();
                cand.sort_unstable();
                let scores = if strategy == Strategy::Random {
                    vec![0.0; cand.len()]
                } else {
                    score_pairs(current, &pair_batch(prep, &resolved, &cand), strategy, cfg.orientation)?
                };
                let pool = CandidatePool {
                    strategy,
                    candidates: cand.iter().zip(scores).map(|(&key, score)| Candidate { key, score }).collect(),
                };
                select(&pool, bp, &mut pair_rng)?
            }
        };
        let batch = pair_batch(prep, &resolved, &keys);
        let task = TaskBatch {
            features: rows.iter().map(|&i| &prep.features[i]).collect(),
            labels: rows.iter().map(|&i| prep.label(i)).collect(),
        };
        let nodes = build_p2c_graph(g, bound, &batch, Some(&task), &weights, cons)?;
        Ok(StepGraph { total: nodes.total, p2c: Some(nodes) })
    })
}

/// P2C with pairs labeled from annotation records: every step scores a
/// fresh candidate pool with the configured sampling strategy and uses the
/// configured consistency variant (margins by default).
pub fn train_p2c_extractive(dataset: &Dataset, pairs: &[PreferencePair], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let prep = Prepared::new(dataset, &config.features)?;
    train_p2c_prepared(&prep, pairs, config, PairMode::Sampled)
}

/// P2C with a fixed pair set (subjective or generative labels): pair
/// batches are drawn uniformly and the plain consistency loss is used.
pub fn train_p2c_fixed_pairs(dataset: &Dataset, pairs: &[PreferencePair], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::validation("no preference pairs given"));
    }
    let prep = Prepared::new(dataset, &config.features)?;
    train_p2c_prepared(&prep, pairs, config, PairMode::Fixed)
}

fn pick_best(
    prep: &Prepared<'_>,
    name: &str,
    candidates: Vec<(f64, TrainConfig)>,
    mut run: impl FnMut(&TrainConfig) -> Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    let mut best: Option<TrainOutcome> = None;
    let mut selection = Vec::new();
    for (value, cfg) in candidates {
        let out = run(&cfg)?;
        let acc = out.best_val_accuracy.unwrap_or(f64::NEG_INFINITY);
        info!(name, value, val_accuracy = acc, "hyperparameter candidate");
        selection.push(SelectionRecord { name: name.into(), value, val_accuracy: acc });
        if best.as_ref().is_none_or(|b| acc > b.best_val_accuracy.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(out);
        }
        if prep.val.is_empty() {
            break;
        }
    }
    let mut best = best.ok_or_else(|| Error::config(format!("empty {name} grid")))?;
    best.selection = selection;
    Ok(best)
}

/// Trains `config.method`, searching its hyperparameter grid on the
/// validation split where one applies. P2C uses the sampled-pool loop when
/// every pair carries margins and the fixed-set loop otherwise.
pub fn train(dataset: &Dataset, pairs: Option<&[PreferencePair]>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let prep = Prepared::new(dataset, &config.features)?;
    match config.method {
        Method::P2c => {
            let pairs = pairs.filter(|p| !p.is_empty()).ok_or_else(|| Error::config("p2c needs preference pairs"))?;
            let mode = if pairs.iter().all(|p| p.margins.is_some()) { PairMode::Sampled } else { PairMode::Fixed };
            let grid = if config.lambda_grid.is_empty() {
                vec![(config.lambda_cons, config.clone())]
            } else {
                config
                    .lambda_grid
                    .iter()
                    .map(|&l| (l, TrainConfig { lambda_div: l, lambda_cons: l, ..config.clone() }))
                    .collect()
            };
            pick_best(&prep, "lambda", grid, |c| train_p2c_prepared(&prep, pairs, c, mode))
        }
        Method::LabelSmooth if config.label_smoothing.is_none() => {
            let grid = LABEL_SMOOTHING_GRID
                .iter()
                .map(|&t| (t, TrainConfig { label_smoothing: Some(t), ..config.clone() }))
                .collect();
            pick_best(&prep, "label_smoothing", grid, |c| train_baseline_prepared(&prep, c))
        }
        Method::MaxEntropy if config.max_entropy.is_none() => {
            let grid = MAX_ENTROPY_GRID
                .iter()
                .map(|&l| (l, TrainConfig { max_entropy: Some(l), ..config.clone() }))
                .collect();
            pick_best(&prep, "max_entropy", grid, |c| train_baseline_prepared(&prep, c))
        }
        _ => train_baseline_prepared(&prep, config),
    }
}

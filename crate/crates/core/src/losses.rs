//! The preference-augmented training objective.
//!
//! `L = L_task + sum_t L_pref(t) + lambda_div * L_div + lambda_cons * L_cons`
//!
//! Scalar reference functions come first; [`build_p2c_graph`] assembles the
//! differentiable version for a mini-batch and [`p2c_loss`] evaluates it.

use serde::{Deserialize, Serialize};

use crate::baselines::{clamp_prob, graph_vanilla};
use crate::diffcore::{softmax, DiffError, Graph, NodeId, Tensor};
use crate::model::{BoundModel, ModelState, SparseFeatures};
use crate::{Error, Result};

/// `P[x1 > x0] = exp(h1) / (exp(h0) + exp(h1))`, evaluated as a logistic
/// of `h1 - h0`.
pub fn bradley_terry(h1: f64, h0: f64) -> f64 {
    logistic(h1 - h0)
}

fn logistic(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of the predicted `P[x1 > x0]` against `y_pref`.
pub fn preference_bce(p: f64, y_pref: f64) -> f64 {
    let p = clamp_prob(p);
    -(y_pref * p.ln() + (1.0 - y_pref) * (1.0 - p).ln())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`preference_bce`] of the Bradley-Terry probability, computed from the
/// score difference without forming `p`. Swapping the pair (and `y_pref`
/// with `1 - y_pref`) gives a bit-identical value.
pub fn preference_loss_from_scores(h1: f64, h0: f64, y_pref: f64) -> f64 {
    let d = h1 - h0;
    y_pref * softplus(-d) + (1.0 - y_pref) * softplus(d)
}

fn kl2(p: [f64; 2], q: [f64; 2]) -> f64 {
    p.iter()
        .zip(&q)
        .map(|(&a, &b)| if a > 0.0 { a * (clamp_prob(a).ln() - clamp_prob(b).ln()) } else { 0.0 })
        .sum()
}

/// Negative mean pairwise KL between the heads' two-outcome predictive
/// distributions `[P[x1 > x0], P[x0 > x1]]`, averaged over the anchor head.
pub fn diversity_loss(head_probs: &[[f64; 2]]) -> f64 {
    let t = head_probs.len();
    if t < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..t {
        let mut s = 0.0;
        for j in 0..t {
            if j != i {
                s += kl2(head_probs[i], head_probs[j]);
            }
        }
        total += -s / (t as f64 - 1.0);
    }
    total / t as f64
}

/// Direction of the confidence-ordering hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// The preferred sample should have the higher task confidence.
    #[default]
    Intuitive,
    /// Sign as printed in the original formulation (penalizes the preferred
    /// sample having the higher confidence).
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyVariant {
    /// Per-class hinge with margins from soft-label differences.
    #[default]
    Margin,
    /// Hinge on the task-label confidence only.
    Plain,
}

/// `y * max(0, p0 - p1) + (1 - y) * max(0, p1 - p0)` (intuitive orientation).
pub fn consistency_plain(p1_y: f64, p0_y: f64, y_pref: f64, orientation: Orientation) -> f64 {
    let (behind, ahead) = ((p0_y - p1_y).max(0.0), (p1_y - p0_y).max(0.0));
    match orientation {
        Orientation::Intuitive => y_pref * behind + (1.0 - y_pref) * ahead,
        Orientation::Literal => y_pref * ahead + (1.0 - y_pref) * behind,
    }
}

/// Mean over classes of the margin hinge with `delta_y = p1_y - p0_y`:
/// `max(0, m_y - delta_y)` for `m_y > 0`, `max(0, delta_y - m_y)` for
/// `m_y < 0`, nothing for `m_y = 0`. The literal orientation uses
/// `delta_y = p0_y - p1_y`.
pub fn consistency_margin(p1: &[f64], p0: &[f64], margins: &[f64], orientation: Orientation) -> Result<f64> {
    if margins.len() != p1.len() || p0.len() != p1.len() {
        return Err(Error::validation(format!(
            "margin vector has {} entries for {} classes",
            margins.len(),
            p1.len()
        )));
    }
    let k = p1.len() as f64;
    let total: f64 = p1
        .iter()
        .zip(p0)
        .zip(margins)
        .map(|((&a, &b), &m)| {
            let delta = match orientation {
                Orientation::Intuitive => a - b,
                Orientation::Literal => b - a,
            };
            if m > 0.0 {
                (m - delta).max(0.0)
            } else if m < 0.0 {
                (delta - m).max(0.0)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_div: f64,
    pub lambda_cons: f64,
    /// Preference head count `T`.
    pub heads: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_div: 1.0, lambda_cons: 1.0, heads: 3 }
    }
}

/// One labelled pair, borrowing features from the caller.
#[derive(Clone, Debug)]
pub struct PairExample<'a> {
    pub x0: &'a SparseFeatures,
    pub x1: &'a SparseFeatures,
    pub y_task: usize,
    pub y_pref: f64,
    pub margins: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct PairBatch<'a> {
    pub pairs: Vec<PairExample<'a>>,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: Vec<PairExample<'a>>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_margins(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.margins.is_some())
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for p in &self.pairs {
            if !(0.0..=1.0).contains(&p.y_pref) {
                return Err(Error::validation(format!("y_pref {} outside [0, 1]", p.y_pref)));
            }
            if p.y_task >= num_classes {
                return Err(Error::validation(format!("y_task {} out of range", p.y_task)));
            }
            if let Some(m) = &p.margins {
                if m.len() != num_classes {
                    return Err(Error::validation(format!(
                        "margin vector has {} entries for {num_classes} classes",
                        m.len()
                    )));
                }
                if m.iter().any(|v| !(-1.0..=1.0).contains(v)) || m.iter().sum::<f64>().abs() > 1e-9 {
                    return Err(Error::validation("margins must lie in [-1, 1] and sum to 0"));
                }
            }
        }
        Ok(())
    }
}

/// Instance-wise task batch trained alongside the pairs.
#[derive(Clone, Debug)]
pub struct TaskBatch<'a> {
    pub features: Vec<&'a SparseFeatures>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub variant: ConsistencyVariant,
    pub orientation: Orientation,
}

/// Nodes of each objective term; `None` when the term is disabled.
#[derive(Clone, Debug)]
pub struct P2cNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub pref: Vec<NodeId>,
    pub div: Option<NodeId>,
    pub cons: Option<NodeId>,
}

/// Values of each objective term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    /// `sum_t L_pref(t)`.
    pub pref: f64,
    pub pref_per_head: Vec<f64>,
    pub div: f64,
    pub cons: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.task, self.pref, self.div, self.cons].iter().all(|v| v.is_finite())
    }
}

fn add_opt(g: &mut Graph, acc: Option<NodeId>, x: NodeId) -> Result<NodeId, DiffError> {
    match acc {
        Some(a) => g.add(a, x),
        None => Ok(x),
    }
}

/// Task-label confidence `p_y` per row, shape `[n, 1]`.
fn pick_class(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId, DiffError> {
    let [n, k] = g.shape(probs);
    let mut mask = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = 1.0;
    }
    let m = g.constant(Tensor::matrix(n, k, mask)?)?;
    let ones = g.constant(Tensor::filled(&[k, 1], 1.0))?;
    let masked = g.mul(probs, m)?;
    g.matmul(masked, ones)
}

/// Consistency term for the pair rows; `p1`, `p0` are `[n, K]` softmax nodes.
pub fn graph_consistency(
    g: &mut Graph,
    p1: NodeId,
    p0: NodeId,
    batch: &PairBatch<'_>,
    cfg: ConsistencyConfig,
) -> Result<NodeId, DiffError> {
    let [n, k] = g.shape(p1);
    match cfg.variant {
        ConsistencyVariant::Plain => {
            let labels: Vec<usize> = batch.pairs.iter().map(|p| p.y_task).collect();
            let a = pick_class(g, p1, &labels)?;
            let b = pick_class(g, p0, &labels)?;
            let behind = g.sub(b, a)?;
            let behind = g.relu(behind);
            let ahead = g.sub(a, b)?;
            let ahead = g.relu(ahead);
            let y: Vec<f64> = batch.pairs.iter().map(|p| p.y_pref).collect();
            let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let yc = g.constant(Tensor::column(&y))?;
            let nyc = g.constant(Tensor::column(&not_y))?;
            let (first, second) = match cfg.orientation {
                Orientation::Intuitive => (behind, ahead),
                Orientation::Literal => (ahead, behind),
            };
            let t1 = g.mul(yc, first)?;
            let t2 = g.mul(nyc, second)?;
            let s = g.add(t1, t2)?;
            Ok(g.mean(s))
        }
        ConsistencyVariant::Margin => {
            let mut m = Vec::with_capacity(n * k);
            for p in &batch.pairs {
                let mv = p.margins.as_ref().ok_or_else(|| {
                    DiffError::Shape("margin consistency requires margins on every pair".into())
                })?;
                if mv.len() != k {
                    return Err(DiffError::Shape(format!("{} margins for {k} classes", mv.len())));
                }
                m.extend_from_slice(mv);
            }
            let pos: Vec<f64> = m.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            let neg: Vec<f64> = m.iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect();
            let mc = g.constant(Tensor::matrix(n, k, m)?)?;
            let pc = g.constant(Tensor::matrix(n, k, pos)?)?;
            let nc = g.constant(Tensor::matrix(n, k, neg)?)?;
            let delta = match cfg.orientation {
                Orientation::Intuitive => g.sub(p1, p0)?,
                Orientation::Literal => g.sub(p0, p1)?,
            };
            let short = g.sub(mc, delta)?;
            let short = g.relu(short);
            let over = g.sub(delta, mc)?;
            let over = g.relu(over);
            let a = g.mul(pc, short)?;
            let b = g.mul(nc, over)?;
            let s = g.add(a, b)?;
            Ok(g.mean(s))
        }
    }
}

/// Two-outcome log-probabilities `[ln P[x1 > x0], ln P[x0 > x1]]` of head
/// `t`, shape `[n, 2]`.
fn head_log_probs(
    g: &mut Graph,
    model: &BoundModel,
    rep1: NodeId,
    rep0: NodeId,
    labels: &[usize],
    head: usize,
) -> Result<NodeId, DiffError> {
    let h1 = model.preference_score(g, rep1, labels, head)?;
    let h0 = model.preference_score(g, rep0, labels, head)?;
    let both = g.concat_cols(h1, h0)?;
    Ok(g.log_softmax(both))
}

/// Builds the full objective for one step.
///
/// When `task` is `None` the task term is the cross-entropy of both pair
/// members against `y_task`; otherwise it is computed on the task batch
/// only and the pairs contribute the preference, diversity and consistency
/// terms.
pub fn build_p2c_graph(
    g: &mut Graph,
    model: &BoundModel,
    batch: &PairBatch<'_>,
    task: Option<&TaskBatch<'_>>,
    weights: &LossWeights,
    cons: ConsistencyConfig,
) -> Result<P2cNodes, DiffError> {
    let n = batch.len();
    let task_len = task.map_or(0, |t| t.features.len());
    if model.pref_heads() < weights.heads {
        return Err(DiffError::Shape(format!(
            "model has {} preference heads, objective asks for {}",
            model.pref_heads(),
            weights.heads
        )));
    }
    let mut feats: Vec<&SparseFeatures> = Vec::with_capacity(task_len + 2 * n);
    if let Some(t) = task {
        feats.extend(t.features.iter().copied());
    }
    feats.extend(batch.pairs.iter().map(|p| p.x1));
    feats.extend(batch.pairs.iter().map(|p| p.x0));
    if feats.is_empty() {
        return Err(DiffError::Shape("empty batch".into()));
    }
    let rep = model.encode(g, &feats)?;

    let task_node = match task {
        Some(t) if task_len > 0 => {
            let r = g.index_select(rep, (0..task_len).collect())?;
            let logits = model.logits(g, r, 0)?;
            graph_vanilla(g, logits, &t.labels)?
        }
        _ => {
            if n == 0 {
                return Err(DiffError::Shape("no task rows".into()));
            }
            let r = g.index_select(rep, (task_len..task_len + 2 * n).collect())?;
            let logits = model.logits(g, r, 0)?;
            let labels: Vec<usize> = batch.pairs.iter().chain(&batch.pairs).map(|p| p.y_task).collect();
            graph_vanilla(g, logits, &labels)?
        }
    };
    let mut total = task_node;
    let mut pref_nodes = Vec::new();
    let mut div = None;
    let mut cons_node = None;

    if n > 0 {
        let rep1 = g.index_select(rep, (task_len..task_len + n).collect())?;
        let rep0 = g.index_select(rep, (task_len + n..task_len + 2 * n).collect())?;
        let labels: Vec<usize> = batch.pairs.iter().map(|p| p.y_task).collect();

        let mut log_probs = Vec::with_capacity(weights.heads);
        let targets: Vec<f64> = batch.pairs.iter().flat_map(|p| [p.y_pref, 1.0 - p.y_pref]).collect();
        for t in 0..weights.heads {
            let lp = head_log_probs(g, model, rep1, rep0, &labels, t)?;
            let tc = g.constant(Tensor::matrix(n, 2, targets.clone())?)?;
            let prod = g.mul(lp, tc)?;
            let s = g.sum(prod);
            let bce = g.scale(s, -1.0 / n as f64);
            total = g.add(total, bce)?;
            pref_nodes.push(bce);
            log_probs.push(lp);
        }

        if weights.heads >= 2 {
            let probs: Vec<NodeId> = log_probs.iter().map(|&lp| g.exp(lp)).collect();
            let mut acc = None;
            for i in 0..weights.heads {
                for j in 0..weights.heads {
                    if i == j {
                        continue;
                    }
                    let d = g.sub(log_probs[i], log_probs[j])?;
                    let kl = g.mul(probs[i], d)?;
                    let s = g.sum(kl);
                    acc = Some(add_opt(g, acc, s)?);
                }
            }
            let t = weights.heads as f64;
            let acc = acc.expect("at least two heads");
            let d = g.scale(acc, -1.0 / (t * (t - 1.0) * n as f64));
            let weighted = g.scale(d, weights.lambda_div);
            total = g.add(total, weighted)?;
            div = Some(d);
        }

        let r1 = g.index_select(rep, (task_len..task_len + n).collect())?;
        let r0 = g.index_select(rep, (task_len + n..task_len + 2 * n).collect())?;
        let l1 = model.logits(g, r1, 0)?;
        let l0 = model.logits(g, r0, 0)?;
        let p1 = g.softmax(l1);
        let p0 = g.softmax(l0);
        let c = graph_consistency(g, p1, p0, batch, cons)?;
        let weighted = g.scale(c, weights.lambda_cons);
        total = g.add(total, weighted)?;
        cons_node = Some(c);
    }

    Ok(P2cNodes { total, task: task_node, pref: pref_nodes, div, cons: cons_node })
}

pub(crate) fn read_breakdown(ev: &crate::diffcore::Evaluation<'_>, nodes: &P2cNodes) -> LossBreakdown {
    let pref_per_head: Vec<f64> = nodes.pref.iter().map(|&p| ev.value(p).item()).collect();
    LossBreakdown {
        total: ev.value(nodes.total).item(),
        task: ev.value(nodes.task).item(),
        pref: pref_per_head.iter().sum(),
        pref_per_head,
        div: nodes.div.map_or(0.0, |d| ev.value(d).item()),
        cons: nodes.cons.map_or(0.0, |c| ev.value(c).item()),
    }
}

/// Evaluates the objective (no gradient) and reports each term.
pub fn p2c_loss(
    model: &ModelState,
    batch: &PairBatch<'_>,
    task: Option<&TaskBatch<'_>>,
    weights: &LossWeights,
    cons: ConsistencyConfig,
) -> Result<LossBreakdown> {
    batch.validate(model.num_classes())?;
    if model.pref_heads() < weights.heads {
        return Err(Error::config(format!(
            "model has {} preference heads, weights ask for {}",
            model.pref_heads(),
            weights.heads
        )));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let nodes = build_p2c_graph(&mut g, &bound, batch, task, weights, cons)?;
    let ev = g.forward(model.params())?;
    Ok(read_breakdown(&ev, &nodes))
}

/// Model outputs for a set of pairs, computed without gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairPredictions {
    /// Class probabilities of `x1`, per pair.
    pub p1: Vec<Vec<f64>>,
    pub p0: Vec<Vec<f64>>,
    /// `P_t[x1 > x0]` per pair, per head.
    pub head_probs: Vec<Vec<f64>>,
}

pub fn predict_pairs(model: &ModelState, batch: &PairBatch<'_>) -> Result<PairPredictions> {
    let n = batch.len();
    if n == 0 {
        return Ok(PairPredictions::default());
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let feats: Vec<&SparseFeatures> =
        batch.pairs.iter().map(|p| p.x1).chain(batch.pairs.iter().map(|p| p.x0)).collect();
    let rep = bound.encode(&mut g, &feats)?;
    let logits = bound.logits(&mut g, rep, 0)?;
    let labels: Vec<usize> = batch.pairs.iter().chain(&batch.pairs).map(|p| p.y_task).collect();
    let scores: Vec<NodeId> = (0..model.pref_heads())
        .map(|t| bound.preference_score(&mut g, rep, &labels, t))
        .collect::<Result<_, _>>()?;
    let ev = g.forward(model.params())?;
    let lv = ev.value(logits);
    let probs: Vec<Vec<f64>> = (0..2 * n).map(|i| softmax(lv.row_slice(i))).collect();
    let head_probs = (0..n)
        .map(|i| {
            scores
                .iter()
                .map(|&s| {
                    let v = ev.value(s);
                    bradley_terry(v.get(i, 0), v.get(n + i, 0))
                })
                .collect()
        })
        .collect();
    let (p1, p0) = probs.split_at(n);
    Ok(PairPredictions { p1: p1.to_vec(), p0: p0.to_vec(), head_probs })
}

//! Comparison objectives that learn from task labels and annotation records.
//!
//! Every objective exists twice: as a scalar function of probability
//! vectors (the reference definition) and as a graph builder returning the
//! batch mean, which is what the trainer differentiates.

use serde::{Deserialize, Serialize};

use crate::diffcore::{log_softmax, softmax, DiffError, Graph, NodeId, Tensor};
use crate::{Error, Result};

pub(crate) const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Per-class vote counts of one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationRecord {
    counts: Vec<u32>,
}

impl AnnotationRecord {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n_vote(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// `argmax_y n_y`, lowest class index on ties.
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for (y, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = y;
            }
        }
        best
    }

    /// Votes for the majority class, `n_{y_task}`.
    pub fn majority_votes(&self) -> u32 {
        self.counts.get(self.majority()).copied().unwrap_or(0)
    }

    /// `q_y = n_y / n_vote`.
    pub fn soft_label(&self) -> Vec<f64> {
        let n = self.n_vote() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Agreement threshold `ceil(n_vote / 2)`; records whose majority
    /// count does not exceed it are the low-agreement ones (3 of 5).
    pub fn ambiguity_threshold(&self) -> u32 {
        self.n_vote().div_ceil(2)
    }

    /// Annotator slots expanded in class-index order: counts `[3, 2]`
    /// become `[0, 0, 0, 1, 1]`.
    pub fn annotator_slots(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(y, &c)| std::iter::repeat_n(y, c as usize))
            .collect()
    }
}

pub fn onehot(y: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[y] = 1.0;
    v
}

/// `-ln p_y`.
pub fn vanilla_loss(p: &[f64], y: usize) -> f64 {
    -(clamp_prob(p[y]).ln())
}

/// `sum_y -q_y ln p_y`.
pub fn soft_label_loss(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pv, &qv)| -(qv * clamp_prob(pv).ln())).sum()
}

/// `sum_y max(0, q_y - p_y)`.
pub fn margin_hinge_loss(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pv, &qv)| (qv - pv).max(0.0)).sum()
}

/// Whether an example survives the low-agreement filter: `n_{y_task} > ceil(n_vote/2)`.
pub fn filter_mask(record: &AnnotationRecord) -> bool {
    record.majority_votes() > record.ambiguity_threshold()
}

pub fn filtered_loss(p: &[f64], y: usize, record: &AnnotationRecord) -> f64 {
    if filter_mask(record) {
        vanilla_loss(p, y)
    } else {
        0.0
    }
}

/// `n_{y_task} / n_vote`.
pub fn agreement_weight(record: &AnnotationRecord) -> f64 {
    record.majority_votes() as f64 / record.n_vote() as f64
}

pub fn weighted_loss(p: &[f64], y: usize, record: &AnnotationRecord) -> f64 {
    agreement_weight(record) * vanilla_loss(p, y)
}

/// Mean cross-entropy of head `t` against annotator slot `t`.
pub fn multi_annotator_loss(head_probs: &[Vec<f64>], record: &AnnotationRecord) -> Result<f64> {
    let slots = record.annotator_slots();
    if slots.len() != head_probs.len() {
        return Err(Error::validation(format!(
            "record has {} votes but the model has {} annotator heads",
            slots.len(),
            head_probs.len()
        )));
    }
    Ok(head_probs.iter().zip(&slots).map(|(p, &y)| vanilla_loss(p, y)).sum::<f64>()
        / slots.len() as f64)
}

/// Ensemble prediction: mean of the head distributions.
pub fn multi_annotator_predict(head_probs: &[Vec<f64>]) -> Vec<f64> {
    let k = head_probs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for p in head_probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / head_probs.len() as f64;
        }
    }
    mean
}

/// Temperature used by the class-wise self-distillation baseline.
pub const CSKD_TEMPERATURE: f64 = 4.0;

/// Cross-entropy between tempered predictions, with the same-class sample
/// `x_hat` as a fixed target: `-sum softmax(z_hat/tau) * log softmax(z/tau)`.
pub fn cskd_consistency(logits_x: &[f64], logits_xhat: &[f64], tau: f64) -> f64 {
    let zs: Vec<f64> = logits_x.iter().map(|z| z / tau).collect();
    let zh: Vec<f64> = logits_xhat.iter().map(|z| z / tau).collect();
    let target = softmax(&zh);
    log_softmax(&zs).iter().zip(&target).map(|(lp, t)| -(t * lp)).sum()
}

pub fn cskd_loss(logits_x: &[f64], logits_xhat: &[f64], y: usize, tau: f64) -> f64 {
    vanilla_loss(&softmax(logits_x), y) + cskd_consistency(logits_x, logits_xhat, tau)
}

/// Label-smoothing candidates selected on validation accuracy.
pub const LABEL_SMOOTHING_GRID: [f64; 3] = [0.05, 0.1, 0.15];

/// `1 - tau` on the task label, `tau / (K - 1)` elsewhere.
pub fn label_smoothing_target(y: usize, tau: f64, k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| if c == y { 1.0 - tau } else { tau / (k as f64 - 1.0) })
        .collect()
}

/// Entropy-regularization candidates selected on validation accuracy.
pub const MAX_ENTROPY_GRID: [f64; 3] = [0.1, 0.5, 1.0];

/// `-ln p_y + lambda * sum_y p_y ln p_y`.
pub fn max_entropy_loss(p: &[f64], y: usize, lambda: f64) -> f64 {
    let neg_entropy: f64 = p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum();
    vanilla_loss(p, y) + lambda * neg_entropy
}

// Graph builders. All return the mean over the batch rows.

/// `-(1/n) sum_i sum_y targets_iy * log_softmax(logits)_iy`; row weights
/// are folded into `targets`.
pub fn graph_target_ce(g: &mut Graph, logits: NodeId, targets: Vec<f64>) -> Result<NodeId, DiffError> {
    let [n, k] = g.shape(logits);
    let t = g.constant(Tensor::matrix(n, k, targets)?)?;
    let lp = g.log_softmax(logits);
    let prod = g.mul(lp, t)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

fn onehot_rows(labels: &[usize], k: usize, weights: Option<&[f64]>) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        t[i * k + y] = weights.map_or(1.0, |w| w[i]);
    }
    t
}

pub fn graph_vanilla(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, DiffError> {
    let k = g.shape(logits)[1];
    graph_target_ce(g, logits, onehot_rows(labels, k, None))
}

/// Per-example weighted cross-entropy (weighting and filtering baselines).
pub fn graph_weighted(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    weights: &[f64],
) -> Result<NodeId, DiffError> {
    let k = g.shape(logits)[1];
    graph_target_ce(g, logits, onehot_rows(labels, k, Some(weights)))
}

/// Cross-entropy against soft targets (soft labels, label smoothing).
pub fn graph_soft(g: &mut Graph, logits: NodeId, targets: &[Vec<f64>]) -> Result<NodeId, DiffError> {
    graph_target_ce(g, logits, targets.concat())
}

pub fn graph_margin_hinge(g: &mut Graph, logits: NodeId, targets: &[Vec<f64>]) -> Result<NodeId, DiffError> {
    let [n, k] = g.shape(logits);
    let q = g.constant(Tensor::matrix(n, k, targets.concat())?)?;
    let p = g.softmax(logits);
    let d = g.sub(q, p)?;
    let h = g.relu(d);
    let s = g.sum(h);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `(1/H) sum_t CE(head_t, slot_t)` averaged over rows.
pub fn graph_multi_annotator(
    g: &mut Graph,
    head_logits: &[NodeId],
    slot_labels: &[Vec<usize>],
) -> Result<NodeId, DiffError> {
    let mut total: Option<NodeId> = None;
    for (&logits, labels) in head_logits.iter().zip(slot_labels) {
        let l = graph_vanilla(g, logits, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| DiffError::Shape("no annotator heads".into()))?;
    Ok(g.scale(total, 1.0 / head_logits.len() as f64))
}

/// CE on the task label plus tempered consistency to a same-class sample
/// whose side is detached.
pub fn graph_cskd(
    g: &mut Graph,
    logits_x: NodeId,
    logits_xhat: NodeId,
    labels: &[usize],
    tau: f64,
) -> Result<NodeId, DiffError> {
    let n = g.shape(logits_x)[0];
    let ce = graph_vanilla(g, logits_x, labels)?;
    let zt = g.scale(logits_x, 1.0 / tau);
    let lp = g.log_softmax(zt);
    let fixed = g.detach(logits_xhat);
    let zh = g.scale(fixed, 1.0 / tau);
    let target = g.softmax(zh);
    let prod = g.mul(lp, target)?;
    let s = g.sum(prod);
    let cons = g.scale(s, -1.0 / n as f64);
    g.add(ce, cons)
}

pub fn graph_max_entropy(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    lambda: f64,
) -> Result<NodeId, DiffError> {
    let n = g.shape(logits)[0];
    let ce = graph_vanilla(g, logits, labels)?;
    let lp = g.log_softmax(logits);
    let p = g.exp(lp);
    let plogp = g.mul(p, lp)?;
    let s = g.sum(plogp);
    let reg = g.scale(s, lambda / n as f64);
    g.add(ce, reg)
}

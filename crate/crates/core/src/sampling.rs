//! Choosing which preference pairs to train on at each step.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{consistency_margin, consistency_plain, predict_pairs, Orientation, PairBatch};
use crate::model::ModelState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    /// Variance of the preference heads' predictions.
    Disagreement,
    /// Current consistency loss of the pair.
    #[default]
    Inconsistency,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "disagreement" => Ok(Self::Disagreement),
            "inconsistency" => Ok(Self::Inconsistency),
            other => Err(Error::config(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

/// A scored candidate. `key` orders ties (lower first); callers use the
/// index of the pair in its canonical list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub key: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub strategy: Strategy,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Population variance of the per-head probabilities `P_t[x1 > x0]`.
pub fn score_disagreement(head_probs: &[f64]) -> f64 {
    if head_probs.is_empty() {
        return 0.0;
    }
    // pairwise form: exactly zero when all heads agree
    let n = head_probs.len() as f64;
    let mut total = 0.0;
    for (i, a) in head_probs.iter().enumerate() {
        for b in &head_probs[i + 1..] {
            total += (a - b).powi(2);
        }
    }
    total / (n * n)
}

/// The pair's consistency loss: margin form when margins are given,
/// otherwise the plain hinge on the task label.
pub fn score_inconsistency(
    p1: &[f64],
    p0: &[f64],
    y_task: usize,
    y_pref: f64,
    margins: Option<&[f64]>,
    orientation: Orientation,
) -> Result<f64> {
    match margins {
        Some(m) => consistency_margin(p1, p0, m, orientation),
        None => Ok(consistency_plain(p1[y_task], p0[y_task], y_pref, orientation)),
    }
}

/// Scores every pair of `batch` under `strategy` with the current model.
/// Random pools get zero scores.
pub fn score_pairs(
    model: &ModelState,
    batch: &PairBatch<'_>,
    strategy: Strategy,
    orientation: Orientation,
) -> Result<Vec<f64>> {
    if strategy == Strategy::Random {
        return Ok(vec![0.0; batch.len()]);
    }
    if strategy == Strategy::Disagreement && model.pref_heads() < 2 {
        return Err(Error::config("disagreement sampling needs at least two preference heads"));
    }
    let preds = predict_pairs(model, batch)?;
    let scores = match strategy {
        Strategy::Disagreement => preds.head_probs.iter().map(|h| score_disagreement(h)).collect(),
        _ => batch
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                score_inconsistency(&preds.p1[i], &preds.p0[i], p.y_task, p.y_pref, p.margins.as_deref(), orientation)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if scores.iter().any(|s: &f64| !s.is_finite()) {
        return Err(Error::Diverged("non-finite pair score".into()));
    }
    Ok(scores)
}

/// Picks `count` candidates: uniformly without replacement for the random
/// strategy, else the highest scores with ties broken by ascending key.
/// Returns keys; a pool smaller than `count` is returned whole.
pub fn select<R: Rng + ?Sized>(pool: &CandidatePool, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::validation("cannot select from an empty candidate pool"));
    }
    let count = count.min(pool.len());
    if pool.strategy == Strategy::Random {
        return Ok(index::sample(rng, pool.len(), count).into_iter().map(|i| pool.candidates[i].key).collect());
    }
    let mut order: Vec<&Candidate> = pool.candidates.iter().collect();
    order.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.key.cmp(&b.key))
    });
    Ok(order.into_iter().take(count).map(|c| c.key).collect())
}

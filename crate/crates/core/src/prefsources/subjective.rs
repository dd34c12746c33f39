use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{extractive_label, PreferencePair, Source};
use crate::dataio::{Dataset, Example};
use crate::losses::{PairBatch, PairExample};
use crate::model::{ModelState, SparseFeatures};
use crate::rng::StreamRng;
use crate::sampling::{score_pairs, select, Candidate, CandidatePool, Strategy};
use crate::losses::Orientation;
use crate::{Error, Result};

/// Pairs collected per round: a random warm-up round, then two rounds
/// chosen by head disagreement.
pub const DEFAULT_ROUND_SCHEDULE: [usize; 3] = [1000, 2000, 2000];

fn check_label(v: f64) -> Result<()> {
    if v == 0.0 || v == 0.5 || v == 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("worker label {v} is not one of 0, 0.5, 1")))
    }
}

/// Resolves worker labels for one pair. Two agreeing labels decide; two
/// disagreeing labels need a third (`Ok(None)`), which decides if it sides
/// with either; three distinct labels mean no consensus (0.5).
pub fn aggregate_worker_labels(labels: &[f64]) -> Result<Option<f64>> {
    for &v in labels {
        check_label(v)?;
    }
    match *labels {
        [a, b] if a == b => Ok(Some(a)),
        [_, _] => Ok(None),
        [a, b, _] if a == b => Ok(Some(a)),
        [a, b, c] if c == a || c == b => Ok(Some(c)),
        [_, _, _] => Ok(Some(0.5)),
        _ => Err(Error::validation(format!("expected 2 or 3 worker labels, got {}", labels.len()))),
    }
}

/// Per-class pair quotas: equal shares, remainder to the lowest classes.
pub fn class_quotas(round_size: usize, num_classes: usize) -> Vec<usize> {
    let base = round_size / num_classes.max(1);
    let extra = round_size % num_classes.max(1);
    (0..num_classes).map(|c| base + usize::from(c < extra)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairLabels {
    /// `(worker, label)` in arrival order.
    pub labels: Vec<(String, f64)>,
    pub final_pref: Option<f64>,
}

/// Label collection for one round of subjective comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveRoundState {
    pub round: usize,
    /// `(id0, id1)` comparisons issued this round.
    pub pairs: Vec<(String, String)>,
    pub labels: Vec<PairLabels>,
    pub quotas: Vec<usize>,
}

impl SubjectiveRoundState {
    pub fn new(round: usize, pairs: Vec<(String, String)>, quotas: Vec<usize>) -> Self {
        let labels = vec![PairLabels::default(); pairs.len()];
        Self { round, pairs, labels, quotas }
    }

    /// How many more labels pair `i` needs right now (0 once finalized).
    pub fn labels_needed(&self, i: usize) -> usize {
        let l = &self.labels[i];
        if l.final_pref.is_some() {
            0
        } else if l.labels.len() < 2 {
            2 - l.labels.len()
        } else {
            3 - l.labels.len()
        }
    }

    pub fn has_labeled(&self, i: usize, worker: &str) -> bool {
        self.labels[i].labels.iter().any(|(w, _)| w == worker)
    }

    /// Stores one label and returns the final preference once decided.
    pub fn record(&mut self, i: usize, worker: &str, label: f64) -> Result<Option<f64>> {
        check_label(label)?;
        if i >= self.pairs.len() {
            return Err(Error::validation(format!("unknown pair index {i}")));
        }
        if self.labels_needed(i) == 0 {
            return Err(Error::validation(format!("pair {i} is already finalized")));
        }
        if self.has_labeled(i, worker) {
            return Err(Error::validation(format!("worker `{worker}` already labeled pair {i}")));
        }
        let entry = &mut self.labels[i];
        entry.labels.push((worker.to_owned(), label));
        if entry.labels.len() >= 2 {
            let values: Vec<f64> = entry.labels.iter().map(|(_, v)| *v).collect();
            entry.final_pref = aggregate_worker_labels(&values)?;
        }
        Ok(entry.final_pref)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let finalized = self.labels.iter().filter(|l| l.final_pref.is_some()).count();
        let started = self.labels.iter().filter(|l| l.final_pref.is_none() && !l.labels.is_empty()).count();
        (self.pairs.len() - finalized - started, started, finalized)
    }

    pub fn is_complete(&self) -> bool {
        self.labels.iter().all(|l| l.final_pref.is_some())
    }

    pub fn finalized_pairs(&self) -> Vec<PreferencePair> {
        self.pairs
            .iter()
            .zip(&self.labels)
            .filter_map(|((id0, id1), l)| {
                l.final_pref.map(|pref| PreferencePair {
                    id0: id0.clone(),
                    id1: id1.clone(),
                    pref,
                    source: Source::Subjective,
                    margins: None,
                    meta: Some(json!({
                        "round": self.round,
                        "workers": l.labels.iter().map(|(w, _)| w).collect::<Vec<_>>(),
                        "labels": l.labels.iter().map(|(_, v)| v).collect::<Vec<_>>(),
                    })),
                })
            })
            .collect()
    }
}

/// A (possibly simulated) annotator answering "which of x0, x1 is stronger".
pub trait Worker {
    fn id(&self) -> &str;
    /// Probability-style answer: 0 for `x0`, 1 for `x1`, 0.5 for neither.
    fn label(&mut self, x0: &Example, x1: &Example) -> f64;
}

/// Replays a fixed answer list, then answers "no preference".
pub struct ScriptedWorker {
    id: String,
    answers: VecDeque<f64>,
}

impl ScriptedWorker {
    pub fn new(id: impl Into<String>, answers: impl IntoIterator<Item = f64>) -> Self {
        Self { id: id.into(), answers: answers.into_iter().collect() }
    }
}

impl Worker for ScriptedWorker {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&mut self, _: &Example, _: &Example) -> f64 {
        self.answers.pop_front().unwrap_or(0.5)
    }
}

/// Answers from the vote counts, replaced by a uniformly random answer with
/// probability `flip`.
pub struct NoisyOracleWorker {
    id: String,
    flip: f64,
    rng: StreamRng,
}

impl NoisyOracleWorker {
    pub fn new(id: impl Into<String>, flip: f64, rng: StreamRng) -> Self {
        Self { id: id.into(), flip, rng }
    }
}

impl Worker for NoisyOracleWorker {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&mut self, x0: &Example, x1: &Example) -> f64 {
        if self.rng.random::<f64>() < self.flip {
            return [0.0, 0.5, 1.0][self.rng.random_range(0..3)];
        }
        match (x1.record(), x0.record()) {
            (Some(r1), Some(r0)) => extractive_label(&r1, &r0).0,
            _ => 0.5,
        }
    }
}

/// Collects labels for every pair from rotating workers (pair `i` starts
/// with worker `i mod n`), so no worker labels a pair twice.
pub fn run_simulated_round(
    state: &mut SubjectiveRoundState,
    dataset: &Dataset,
    workers: &mut [Box<dyn Worker>],
) -> Result<()> {
    if workers.len() < 3 {
        return Err(Error::config("simulated rounds need at least three workers"));
    }
    let index = dataset.index_by_id();
    for i in 0..state.pairs.len() {
        let (id0, id1) = state.pairs[i].clone();
        let (Some(&a), Some(&b)) = (index.get(id0.as_str()), index.get(id1.as_str())) else {
            return Err(Error::validation(format!("pair ({id0}, {id1}) names an unknown example")));
        };
        let mut k = 0;
        while state.labels_needed(i) > 0 {
            let w = &mut workers[(i + k) % workers.len()];
            let v = w.label(&dataset.examples[a], &dataset.examples[b]);
            let id = w.id().to_owned();
            state.record(i, &id, v)?;
            k += 1;
        }
    }
    Ok(())
}

/// Chooses the next round's comparisons from `pool` (`(x1, x0)` dataset
/// indices sharing a label). Each class gets its quota; without a model the
/// choice is uniform, otherwise the pairs with the highest head disagreement.
pub fn plan_subjective_round<R: Rng + ?Sized>(
    model: Option<&ModelState>,
    dataset: &Dataset,
    features: &[SparseFeatures],
    pool: &[(usize, usize)],
    round_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let quotas = class_quotas(round_size, dataset.num_classes);
    let mut chosen = Vec::with_capacity(round_size);
    for (class, &quota) in quotas.iter().enumerate() {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| dataset.examples[pool[i].0].label == class).collect();
        if members.len() < quota {
            warn!(class, available = members.len(), quota, "candidate pool smaller than class quota");
        }
        if members.is_empty() || quota == 0 {
            continue;
        }
        let keys = match model {
            None => index::sample(rng, members.len(), quota.min(members.len())).into_iter().map(|j| members[j]).collect(),
            Some(m) => {
                let batch = PairBatch::new(
                    members
                        .iter()
                        .map(|&i| PairExample {
                            x1: &features[pool[i].0],
                            x0: &features[pool[i].1],
                            y_task: class,
                            y_pref: 0.5,
                            margins: None,
                        })
                        .collect(),
                );
                let scores = score_pairs(m, &batch, Strategy::Disagreement, Orientation::Intuitive)?;
                let cp = CandidatePool {
                    strategy: Strategy::Disagreement,
                    candidates: members.iter().zip(scores).map(|(&key, score)| Candidate { key, score }).collect(),
                };
                select(&cp, quota, rng)?
            }
        };
        chosen.extend(keys.into_iter().map(|k: usize| pool[k]));
    }
    Ok(chosen)
}

//! Evaluation: accuracy family, MCC, calibration and soft-label distance.

use serde::{Deserialize, Serialize};

use crate::baselines::AnnotationRecord;
use crate::diffcore::{log_softmax, softmax};
use crate::{Error, Result};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyFamily {
    pub accuracy: f64,
    /// Mean per-class recall.
    pub balanced_accuracy: f64,
    /// Minimum per-class recall.
    pub worst_group_accuracy: f64,
}

/// Classes absent from `labels` are skipped in the recall averages.
pub fn accuracy_family(preds: &[usize], labels: &[usize], num_classes: usize) -> AccuracyFamily {
    let n = labels.len();
    if n == 0 {
        return AccuracyFamily { accuracy: 0.0, balanced_accuracy: 0.0, worst_group_accuracy: 0.0 };
    }
    let mut hits = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    AccuracyFamily {
        accuracy: correct as f64 / n as f64,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        worst_group_accuracy: recalls.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Multiclass Matthews correlation from the confusion matrix; 0 when a
/// denominator factor vanishes.
pub fn mcc(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let s = labels.len() as f64;
    let mut pred_count = vec![0f64; num_classes];
    let mut true_count = vec![0f64; num_classes];
    let mut correct = 0f64;
    for (&p, &y) in preds.iter().zip(labels) {
        pred_count[p] += 1.0;
        true_count[y] += 1.0;
        if p == y {
            correct += 1.0;
        }
    }
    let pt: f64 = pred_count.iter().zip(&true_count).map(|(a, b)| a * b).sum();
    let pp: f64 = pred_count.iter().map(|a| a * a).sum();
    let tt: f64 = true_count.iter().map(|a| a * a).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den <= 0.0 {
        return 0.0;
    }
    (correct * s - pt) / den.sqrt()
}

/// Mean negative log-likelihood of `softmax(logits / temperature)`.
pub fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
            -log_softmax(&scaled)[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}

pub const TEMPERATURE_MIN: f64 = 0.05;
pub const TEMPERATURE_MAX: f64 = 10.0;
pub const TEMPERATURE_GRID_POINTS: usize = 400;

/// The log-spaced temperature grid on `[0.05, 10]`.
pub fn temperature_grid() -> Vec<f64> {
    let (lo, hi) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let steps = (TEMPERATURE_GRID_POINTS - 1) as f64;
    (0..TEMPERATURE_GRID_POINTS)
        .map(|i| {
            if i == 0 {
                TEMPERATURE_MIN
            } else if i == TEMPERATURE_GRID_POINTS - 1 {
                TEMPERATURE_MAX
            } else {
                (lo + (hi - lo) * i as f64 / steps).exp()
            }
        })
        .collect()
}

/// Grid minimizer of validation NLL; the first grid point wins ties.
pub fn fit_temperature(val_logits: &[Vec<f64>], val_labels: &[usize]) -> f64 {
    if val_labels.is_empty() {
        return 1.0;
    }
    let mut best = (f64::INFINITY, 1.0);
    for t in temperature_grid() {
        let nll = nll_at_temperature(val_logits, val_labels, t);
        if nll < best.0 {
            best = (nll, t);
        }
    }
    best.1
}

pub fn apply_temperature(logits: &[Vec<f64>], temperature: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|z| softmax(&z.iter().map(|v| v / temperature).collect::<Vec<_>>()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Expected calibration error over equal-width bins of the max probability.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Calibration {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf = vec![0f64; bins];
    let mut hit = vec![0f64; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let pred = argmax(p);
        let c = p[pred];
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            hit[b] += 1.0;
        }
    }
    let n = labels.len().max(1) as f64;
    let mut total = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            let (cf, acc) = if count[b] > 0 {
                (conf[b] / count[b] as f64, hit[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            total += count[b] as f64 / n * (acc - cf).abs();
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence: cf,
                accuracy: acc,
            }
        })
        .collect();
    Calibration { ece: total, bins: bins_out }
}

/// Mean over examples of `sum_y |p_y - q_y|`.
pub fn l1_to_soft_labels(probs: &[Vec<f64>], records: &[AnnotationRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(records)
        .map(|(p, r)| p.iter().zip(r.soft_label()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    total / records.len() as f64
}

/// `100 * (err_base - err_new) / err_base`.
pub fn relative_error_reduction(acc_base: f64, acc_new: f64) -> Result<f64> {
    let err_base = 1.0 - acc_base;
    if err_base <= 0.0 {
        return Err(Error::validation("baseline accuracy of 1 leaves no error to reduce"));
    }
    Ok(100.0 * (err_base - (1.0 - acc_new)) / err_base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Hard when the majority has at most `ceil(n_vote / 2)` votes (3 of 5).
pub fn difficulty(record: &AnnotationRecord) -> Difficulty {
    if record.majority_votes() <= record.ambiguity_threshold() {
        Difficulty::Hard
    } else {
        Difficulty::Easy
    }
}

/// Indices of easy and hard examples.
pub fn difficulty_split(records: &[AnnotationRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match difficulty(r) {
            Difficulty::Easy => easy.push(i),
            Difficulty::Hard => hard.push(i),
        }
    }
    (easy, hard)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub mcc: f64,
    /// ECE after temperature scaling.
    pub ece: f64,
    pub temperature: f64,
    pub reliability: Vec<ReliabilityBin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_to_soft_labels: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub easy_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_accuracy: Option<f64>,
}

impl EvalReport {
    /// Reliability bins as CSV rows `lower,upper,count,confidence,accuracy`.
    pub fn reliability_csv(&self) -> String {
        let mut s = String::from("lower,upper,count,confidence,accuracy\n");
        for b in &self.reliability {
            s.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, b.confidence, b.accuracy));
        }
        s
    }
}

/// Builds a report from raw logits. Accuracy metrics use the argmax
/// (identical under any temperature), ECE uses the tempered probabilities,
/// and the soft-label distance uses the model's own (untempered) softmax.
pub fn evaluate(
    logits: &[Vec<f64>],
    labels: &[usize],
    records: Option<&[AnnotationRecord]>,
    num_classes: usize,
    temperature: f64,
    bins: usize,
) -> EvalReport {
    let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let acc = accuracy_family(&preds, labels, num_classes);
    let probs = apply_temperature(logits, temperature);
    let cal = ece(&probs, labels, bins);
    let (l1, easy_acc, hard_acc) = match records {
        Some(recs) if recs.len() == labels.len() && !recs.is_empty() => {
            let (easy, hard) = difficulty_split(recs);
            let sub_acc = |idx: &[usize]| {
                (!idx.is_empty()).then(|| {
                    idx.iter().filter(|&&i| preds[i] == labels[i]).count() as f64 / idx.len() as f64
                })
            };
            let raw: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
            (Some(l1_to_soft_labels(&raw, recs)), sub_acc(&easy), sub_acc(&hard))
        }
        _ => (None, None, None),
    };
    EvalReport {
        examples: labels.len(),
        accuracy: acc.accuracy,
        balanced_accuracy: acc.balanced_accuracy,
        worst_group_accuracy: acc.worst_group_accuracy,
        mcc: mcc(&preds, labels, num_classes),
        ece: cal.ece,
        temperature,
        reliability: cal.bins,
        l1_to_soft_labels: l1,
        easy_accuracy: easy_acc,
        hard_accuracy: hard_acc,
    }
}

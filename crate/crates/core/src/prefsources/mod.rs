//! Preference-pair construction from annotation records, an LLM, or
//! crowd workers, plus the JSONL pair format.

mod extractive;
mod generative;
mod subjective;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataio::Dataset;
use crate::{Error, Result};

pub use extractive::{build_extractive, extractive_label};
pub use generative::{
    parse_response, query_generative, render_prompt, Completion, GenerativeOutcome, HttpCompletion, LlmClientConfig,
    ParsedResponse, ResponseCache,
};
pub use subjective::{
    aggregate_worker_labels, class_quotas, plan_subjective_round, run_simulated_round, NoisyOracleWorker, PairLabels,
    ScriptedWorker, SubjectiveRoundState, Worker, DEFAULT_ROUND_SCHEDULE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Extractive,
    Generative,
    Subjective,
}

/// One labeled comparison: `pref` is the probability that `id1` is
/// preferred over `id0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id0: String,
    pub id1: String,
    pub pref: f64,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.id0 == self.id1 {
            return Err(Error::validation(format!("pair compares `{}` with itself", self.id0)));
        }
        if !(0.0..=1.0).contains(&self.pref) {
            return Err(Error::validation(format!("preference {} outside [0, 1]", self.pref)));
        }
        if self.margins.is_some() != (self.source == Source::Extractive) {
            return Err(Error::validation("margins must be present exactly for extractive pairs"));
        }
        Ok(())
    }

    /// The same comparison with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id0: self.id1.clone(),
            id1: self.id0.clone(),
            pref: 1.0 - self.pref,
            source: self.source,
            margins: self.margins.as_ref().map(|m| m.iter().map(|v| -v).collect()),
            meta: self.meta.clone(),
        }
    }
}

pub fn read_pairs(reader: impl Read) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("preference line {}: {e}", i + 1)))?;
        pair.validate().map_err(|e| Error::validation(format!("preference line {}: {e}", i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs(pairs: &[PreferencePair], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    read_pairs(File::open(path)?)
}

pub fn save_pairs(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    write_pairs(pairs, File::create(path)?)
}

/// Checks that every pair refers to known ids sharing a label.
pub fn check_pairs_against(pairs: &[PreferencePair], dataset: &Dataset) -> Result<()> {
    let index = dataset.index_by_id();
    for p in pairs {
        let (Some(&a), Some(&b)) = (index.get(p.id0.as_str()), index.get(p.id1.as_str())) else {
            return Err(Error::validation(format!("pair ({}, {}) names an unknown example", p.id0, p.id1)));
        };
        if dataset.examples[a].label != dataset.examples[b].label {
            return Err(Error::validation(format!("pair ({}, {}) crosses labels", p.id0, p.id1)));
        }
        if let Some(m) = &p.margins {
            if m.len() != dataset.num_classes {
                return Err(Error::validation(format!("pair ({}, {}) has {} margins", p.id0, p.id1, m.len())));
            }
        }
    }
    Ok(())
}

/// For each example (in dataset order) draws `per_example` partners
/// uniformly, with replacement, from the other examples sharing its label.
/// Returns `(x1, x0)` index pairs; singleton classes are skipped.
pub fn sample_same_label_partners<R: Rng + ?Sized>(
    dataset: &Dataset,
    per_example: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, ex) in dataset.examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() == 1 {
            warn!(class = c, "class has a single example; no preference partner available");
        }
    }
    let mut out = Vec::with_capacity(dataset.len() * per_example);
    for (i, ex) in dataset.examples.iter().enumerate() {
        let members = &by_class[ex.label];
        if members.len() < 2 {
            continue;
        }
        for _ in 0..per_example {
            let j = loop {
                let &j = members.choose(rng).expect("class is non-empty");
                if j != i {
                    break j;
                }
            };
            out.push((i, j));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Comparisons present in both sources (matched in either order).
    pub shared: usize,
    /// Fraction of shared pairs with identical preference.
    pub agreement: f64,
    /// Shared pairs where one source says "no preference" and the other does not.
    pub one_sided_ties: usize,
    /// Shared pairs with opposite strict preferences.
    pub reversed: usize,
}

/// Compares two preference sets over the comparisons they share.
pub fn agreement_report(a: &[PreferencePair], b: &[PreferencePair]) -> AgreementReport {
    let lookup: HashMap<(&str, &str), f64> = b.iter().map(|p| ((p.id0.as_str(), p.id1.as_str()), p.pref)).collect();
    let (mut shared, mut same, mut one_sided, mut reversed) = (0, 0, 0, 0);
    for p in a {
        let other = lookup
            .get(&(p.id0.as_str(), p.id1.as_str()))
            .copied()
            .or_else(|| lookup.get(&(p.id1.as_str(), p.id0.as_str())).map(|v| 1.0 - v));
        let Some(q) = other else { continue };
        shared += 1;
        let tie = |v: f64| (v - 0.5).abs() < 1e-12;
        if (p.pref - q).abs() < 1e-12 {
            same += 1;
        } else if tie(p.pref) != tie(q) {
            one_sided += 1;
        } else if (p.pref - 0.5) * (q - 0.5) < 0.0 {
            reversed += 1;
        }
    }
    AgreementReport {
        shared,
        agreement: if shared == 0 { 0.0 } else { same as f64 / shared as f64 },
        one_sided_ties: one_sided,
        reversed,
    }
}

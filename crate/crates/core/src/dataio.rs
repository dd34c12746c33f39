//! Dataset files, stratified splits and synthetic data.
//!
//! Datasets are line-delimited JSON. An optional first line carries the
//! header `{"num_classes": K, "label_names": [...]}`; every other line is an
//! example `{"id", "text", "label", "votes"?, "split"?}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::AnnotationRecord;
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Example {
    pub fn record(&self) -> Option<AnnotationRecord> {
        self.votes.as_ref().map(|v| AnnotationRecord::new(v.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    label_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let mut ds = Self { num_classes, label_names: default_label_names(num_classes), examples };
        ds.examples.sort_by(|a, b| a.id.cmp(&b.id));
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_name(&self, class: usize) -> &str {
        self.label_names.get(class).map(String::as_str).unwrap_or("")
    }

    /// Checks id uniqueness, label range and `label = argmax(votes)`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::validation(format!("duplicate id '{}'", ex.id)));
            }
            if ex.label >= self.num_classes {
                return Err(Error::validation(format!(
                    "example '{}': label {} out of range for {} classes",
                    ex.id, ex.label, self.num_classes
                )));
            }
            if let Some(votes) = &ex.votes {
                if votes.len() != self.num_classes {
                    return Err(Error::validation(format!(
                        "example '{}': {} vote counts for {} classes",
                        ex.id,
                        votes.len(),
                        self.num_classes
                    )));
                }
                let rec = AnnotationRecord::new(votes.clone());
                if rec.n_vote() == 0 {
                    return Err(Error::validation(format!("example '{}': no votes", ex.id)));
                }
                if rec.majority() != ex.label {
                    return Err(Error::validation(format!(
                        "example '{}': label {} disagrees with vote majority {}",
                        ex.id,
                        ex.label,
                        rec.majority()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut header: Option<Header> = None;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| {
                Error::validation(format!("line {}: malformed JSON: {e}", lineno + 1))
            })?;
            if examples.is_empty() && header.is_none() && value.get("num_classes").is_some() {
                header = Some(serde_json::from_value(value).map_err(|e| {
                    Error::validation(format!("line {}: bad header: {e}", lineno + 1))
                })?);
                continue;
            }
            let ex: Example = serde_json::from_value(value).map_err(|e| {
                Error::validation(format!("line {}: bad example record: {e}", lineno + 1))
            })?;
            examples.push(ex);
        }
        let num_classes = match &header {
            Some(h) => h.num_classes,
            None => examples
                .iter()
                .map(|e| (e.label + 1).max(e.votes.as_ref().map_or(0, Vec::len)))
                .max()
                .unwrap_or(0),
        };
        let mut ds = Dataset::new(num_classes, examples)?;
        if let Some(h) = header {
            if !h.label_names.is_empty() {
                if h.label_names.len() != num_classes {
                    return Err(Error::validation("label_names length differs from num_classes"));
                }
                ds.label_names = h.label_names;
            }
        }
        Ok(ds)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header =
            Header { num_classes: self.num_classes, label_names: self.label_names.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(File::create(path)?)
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect()
    }

    /// Examples tagged with `split`, as a new dataset.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
            examples: self.examples.iter().filter(|e| e.split == Some(split)).cloned().collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Annotation records for every example, failing if any is missing.
    pub fn records(&self) -> Result<Vec<AnnotationRecord>> {
        self.examples
            .iter()
            .map(|e| {
                e.record().ok_or_else(|| {
                    Error::validation(format!("example '{}' has no annotation record", e.id))
                })
            })
            .collect()
    }
}

fn default_label_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class {c}")).collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Dataset::from_reader(file)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.save(path)
}

/// Stratified split into train/val/test, tagging every example.
///
/// Per class, the train and val counts are `floor(fraction * n)` with the
/// leftover assigned to test, after which any class still short of its
/// rounded target receives examples in train, val, test order.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f) || !f.is_finite()) {
        return Err(Error::config("split fractions must lie in [0, 1]"));
    }
    let total = ft + fv + fs;
    if total <= 0.0 {
        return Err(Error::config("split fractions sum to zero"));
    }
    let (ft, fv) = (ft / total, fv / total);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    let mut rng = SeedStream::new(seed).substream(SeedStream::SPLIT);
    let mut out = dataset.clone();
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((ft * n as f64) + 1e-9).round() as usize;
        let n_val = (((ft + fv) * n as f64 + 1e-9).round() as usize).saturating_sub(n_train);
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            let tag = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.examples[i].split = Some(tag);
        }
    }
    Ok(out)
}

/// Parameters of the synthetic bag-of-tokens generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    /// Size of the shared class-neutral vocabulary.
    pub vocab_size: usize,
    /// Class-specific signal words per class.
    pub signal_words: usize,
    pub tokens_per_example: usize,
    /// Probability that a token position carries a class-signal word.
    pub signal_prob: f64,
    /// Class-neutral "hedge" words whose frequency tracks an example's
    /// ambiguity.
    pub hedge_words: usize,
    /// Share of the per-example error rate with which a signal word names
    /// the wrong class.
    pub signal_flip: f64,
    /// Mean annotator error rate.
    pub noise: f64,
    pub n_vote: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            examples_per_class: 1250,
            vocab_size: 400,
            signal_words: 12,
            tokens_per_example: 16,
            signal_prob: 0.35,
            hedge_words: 8,
            signal_flip: 1.0,
            noise: 0.3,
            n_vote: 5,
            seed: 0,
        }
    }
}

const VOTE_RETRY_BUDGET: usize = 1000;

/// Generates a dataset with simulated annotation records.
///
/// Each example draws its own annotator error rate `rho` uniformly from
/// `[0, 2 * noise]` (capped at 1), so ambiguous texts and split votes go
/// together. A token position holds a class-signal word with probability
/// `signal_prob`; that word names another class with probability
/// `signal_flip * rho`. Otherwise the position holds a hedge word with
/// probability `rho` (when `hedge_words > 0`) and a neutral word else.
/// Votes are `n_vote` draws (true class w.p. `1 - rho`, else a uniform
/// other class), resampled until the true class is the majority under the
/// lowest-index tie rule.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if [spec.signal_prob, spec.noise, spec.signal_flip].iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("synthetic probabilities must lie in [0, 1]"));
    }
    if spec.n_vote == 0 || spec.vocab_size == 0 || spec.signal_words == 0 {
        return Err(Error::config("n_vote, vocab_size and signal_words must be positive"));
    }
    let k = spec.num_classes;
    let mut rng = SeedStream::new(spec.seed).substream(SeedStream::SYNTHETIC);
    let mut examples = Vec::with_capacity(k * spec.examples_per_class);
    let other = |rng: &mut crate::rng::StreamRng, c: usize| -> usize {
        let o = rng.random_range(0..k - 1);
        if o >= c {
            o + 1
        } else {
            o
        }
    };
    for n in 0..spec.examples_per_class {
        for c in 0..k {
            let rho: f64 = (rng.random::<f64>() * 2.0 * spec.noise).min(1.0);
            let mut tokens = Vec::with_capacity(spec.tokens_per_example);
            for _ in 0..spec.tokens_per_example {
                if rng.random::<f64>() < spec.signal_prob {
                    let flip = rng.random::<f64>() < spec.signal_flip * rho;
                    let cls = if flip { other(&mut rng, c) } else { c };
                    tokens.push(format!("c{cls}s{}", rng.random_range(0..spec.signal_words)));
                } else if spec.hedge_words > 0 && rng.random::<f64>() < rho {
                    tokens.push(format!("h{}", rng.random_range(0..spec.hedge_words)));
                } else {
                    tokens.push(format!("w{}", rng.random_range(0..spec.vocab_size)));
                }
            }
            let mut votes = None;
            for _ in 0..VOTE_RETRY_BUDGET {
                let mut counts = vec![0u32; k];
                for _ in 0..spec.n_vote {
                    let v = if rng.random::<f64>() < rho { other(&mut rng, c) } else { c };
                    counts[v] += 1;
                }
                if AnnotationRecord::new(counts.clone()).majority() == c {
                    votes = Some(counts);
                    break;
                }
            }
            let votes = votes.ok_or_else(|| {
                Error::config(format!(
                    "annotator noise {} too high: no majority for the true label after {} draws",
                    spec.noise, VOTE_RETRY_BUDGET
                ))
            })?;
            examples.push(Example {
                id: format!("syn{:06}", n * k + c),
                text: tokens.join(" "),
                label: c,
                votes: Some(votes),
                split: None,
            });
        }
    }
    Dataset::new(k, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, label: usize, votes: Option<Vec<u32>>) -> Example {
        Example { id: id.into(), text: format!("text {id}"), label, votes, split: None }
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let ds = Dataset::from_reader("{\"num_classes\":3}\n".as_bytes()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn accepts_consistent_record() {
        let line = r#"{"id":"a","text":"t","label":0,"votes":[4,1]}"#;
        let ds = Dataset::from_reader(line.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn rejects_label_vote_mismatch() {
        let line = r#"{"id":"a","text":"t","label":1,"votes":[4,1]}"#;
        assert!(matches!(Dataset::from_reader(line.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = "{\"num_classes\":2}\n{\"id\":\"a\",\"text\":\"t\",\"label\":0}\n{oops\n";
        match Dataset::from_reader(text.as_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let r = Dataset::new(2, vec![ex("a", 0, None), ex("a", 1, None)]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn round_trip_is_identity() {
        let mut ds = Dataset::new(
            2,
            vec![ex("b", 1, Some(vec![1, 4])), ex("a", 0, Some(vec![3, 2])), ex("c", 0, None)],
        )
        .unwrap();
        ds.examples[0].split = Some(Split::Val);
        let mut buf = Vec::new();
        ds.to_writer(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut buf2 = Vec::new();
        back.to_writer(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    fn balanced(n_per_class: usize) -> Dataset {
        let mut v = Vec::new();
        for i in 0..n_per_class {
            v.push(ex(&format!("p{i:03}"), 0, None));
            v.push(ex(&format!("q{i:03}"), 1, None));
        }
        Dataset::new(2, v).unwrap()
    }

    #[test]
    fn split_all_train() {
        let s = split(&balanced(10), (1.0, 0.0, 0.0), 1).unwrap();
        assert!(s.examples.iter().all(|e| e.split == Some(Split::Train)));
    }

    #[test]
    fn split_is_stratified() {
        let s = split(&balanced(50), (0.8, 0.1, 0.1), 3).unwrap();
        for (tag, want) in [(Split::Train, 40), (Split::Val, 5), (Split::Test, 5)] {
            let sub = s.subset(tag);
            for c in 0..2 {
                assert_eq!(sub.examples.iter().filter(|e| e.label == c).count(), want);
            }
        }
        assert!(s.examples.iter().all(|e| e.split.is_some()));
        assert_eq!(s, split(&balanced(50), (0.8, 0.1, 0.1), 3).unwrap());
    }

    #[test]
    fn noiseless_synthetic_is_unanimous() {
        let spec = SyntheticSpec { noise: 0.0, examples_per_class: 20, ..Default::default() };
        let ds = make_synthetic(&spec).unwrap();
        for e in &ds.examples {
            let v = e.votes.as_ref().unwrap();
            assert_eq!(v[e.label], 5);
        }
    }

    #[test]
    fn noisy_synthetic_keeps_majority() {
        let spec = SyntheticSpec { noise: 0.3, examples_per_class: 200, ..Default::default() };
        let ds = make_synthetic(&spec).unwrap();
        let mut split_votes = 0;
        for e in &ds.examples {
            let rec = e.record().unwrap();
            assert_eq!(rec.n_vote(), 5);
            assert_eq!(rec.majority(), e.label);
            if rec.counts()[e.label] < 5 {
                split_votes += 1;
            }
        }
        assert!(split_votes > 0);
        assert_eq!(ds, make_synthetic(&spec).unwrap());
    }

    #[test]
    fn infeasible_noise_is_rejected() {
        let spec = SyntheticSpec { noise: 1.0, examples_per_class: 50, ..Default::default() };
        assert!(matches!(make_synthetic(&spec), Err(Error::Config(_))));
    }
}

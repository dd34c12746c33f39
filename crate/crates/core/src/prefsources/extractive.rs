use serde_json::json;

use super::{sample_same_label_partners, PreferencePair, Source};
use crate::baselines::AnnotationRecord;
use crate::dataio::Dataset;
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Preference and per-class margins implied by two annotation records that
/// share a majority label: `x1` is preferred when more annotators chose the
/// shared label for it; margins are soft-label differences `q(x1) - q(x0)`.
pub fn extractive_label(r1: &AnnotationRecord, r0: &AnnotationRecord) -> (f64, Vec<f64>) {
    let y = r1.majority();
    let (n1, n0) = (r1.counts()[y], r0.counts()[y]);
    let pref = match n1.cmp(&n0) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => 0.5,
    };
    let margins = r1.soft_label().iter().zip(r0.soft_label()).map(|(a, b)| a - b).collect();
    (pref, margins)
}

/// Pairs every example with `pairs_per_example` same-label partners and
/// labels each pair from the vote counts. Output order follows the dataset.
pub fn build_extractive(dataset: &Dataset, pairs_per_example: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    let records = dataset.records()?;
    if records.len() != dataset.len() {
        return Err(Error::validation("extractive preferences need vote counts on every example"));
    }
    let mut rng = SeedStream::new(seed).substream(SeedStream::PAIRING);
    let pairs = sample_same_label_partners(dataset, pairs_per_example, &mut rng)
        .into_iter()
        .map(|(i1, i0)| {
            let (pref, margins) = extractive_label(&records[i1], &records[i0]);
            PreferencePair {
                id0: dataset.examples[i0].id.clone(),
                id1: dataset.examples[i1].id.clone(),
                pref,
                source: Source::Extractive,
                margins: Some(margins),
                meta: Some(json!({ "votes0": records[i0].counts(), "votes1": records[i1].counts() })),
            }
        })
        .collect();
    Ok(pairs)
}

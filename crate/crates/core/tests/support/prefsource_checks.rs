//! Preference sources: extractive labels, the LLM client against a mock
//! server, and subjective label aggregation.

#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use p2c_core::dataio::{Dataset, Example};
use p2c_core::prefsources::{
    aggregate_worker_labels, agreement_report, build_extractive, query_generative, read_pairs, render_prompt,
    run_simulated_round, write_pairs, HttpCompletion, LlmClientConfig, PreferencePair, ScriptedWorker, Source,
    SubjectiveRoundState, Worker,
};

fn ex(id: &str, text: &str, label: usize, votes: Option<[u32; 2]>) -> Example {
    Example { id: id.into(), text: text.into(), label, votes: votes.map(|v| v.to_vec()), split: None }
}

/// Ten examples with hand-chosen vote counts.
fn vote_table() -> Dataset {
    let rows: [(&str, usize, [u32; 2]); 10] = [
        ("a", 0, [5, 0]),
        ("b", 0, [4, 1]),
        ("c", 0, [4, 1]),
        ("d", 0, [3, 2]),
        ("e", 0, [3, 2]),
        ("f", 1, [0, 5]),
        ("g", 1, [1, 4]),
        ("h", 1, [2, 3]),
        ("i", 1, [2, 3]),
        ("j", 1, [1, 4]),
    ];
    Dataset::new(2, rows.iter().map(|&(id, y, v)| ex(id, &format!("text {id}"), y, Some(v))).collect()).unwrap()
}

/// Expected label of the comparison `(x1, x0)`, written out per vote count of
/// the shared majority class.
fn expected(x1: &str, x0: &str) -> (f64, [f64; 2]) {
    let majority_votes: HashMap<&str, u32> =
        [("a", 5), ("b", 4), ("c", 4), ("d", 3), ("e", 3), ("f", 5), ("g", 4), ("h", 3), ("i", 3), ("j", 4)].into();
    let q0: HashMap<&str, f64> = [
        ("a", 1.0), ("b", 0.8), ("c", 0.8), ("d", 0.6), ("e", 0.6),
        ("f", 0.0), ("g", 0.2), ("h", 0.4), ("i", 0.4), ("j", 0.2),
    ]
    .into();
    let (n1, n0) = (majority_votes[x1], majority_votes[x0]);
    let pref = if n1 > n0 {
        1.0
    } else if n1 < n0 {
        0.0
    } else {
        0.5
    };
    let d = q0[x1] - q0[x0];
    (pref, [d, -d])
}

pub fn extractive_table() {
    let ds = vote_table();
    let label: HashMap<&str, usize> = ds.examples.iter().map(|e| (e.id.as_str(), e.label)).collect();
    let pairs = build_extractive(&ds, 3, 42).unwrap();
    assert_eq!(pairs.len(), 30);
    for p in &pairs {
        assert_eq!(p.source, Source::Extractive);
        assert_ne!(p.id0, p.id1);
        assert_eq!(label[p.id0.as_str()], label[p.id1.as_str()], "pair crosses labels");
        let (pref, m) = expected(&p.id1, &p.id0);
        assert_eq!(p.pref, pref, "{} vs {}", p.id1, p.id0);
        let got = p.margins.as_ref().unwrap();
        assert_eq!(got.len(), 2);
        for (g, e) in got.iter().zip(m) {
            assert!((g - e).abs() < 1e-15, "{} vs {}: {got:?} != {m:?}", p.id1, p.id0);
        }
    }
    // every example is the first side of exactly `pairs_per_example` comparisons
    let mut count: HashMap<&str, usize> = HashMap::new();
    for p in &pairs {
        *count.entry(p.id1.as_str()).or_default() += 1;
    }
    assert!(ds.examples.iter().all(|e| count[e.id.as_str()] == 3));
    // and the draw is seeded
    assert_eq!(pairs, build_extractive(&ds, 3, 42).unwrap());
    // the specific hand-worked cases
    let (pref, m) = expected("b", "d");
    assert_eq!(pref, 1.0);
    assert!((m[0] - 0.2).abs() < 1e-12 && (m[1] + 0.2).abs() < 1e-12);
    assert_eq!(expected("d", "e").0, 0.5);
}

pub fn extractive_needs_votes() {
    let ds = Dataset::new(2, vec![ex("a", "x", 0, None), ex("b", "y", 0, None)]).unwrap();
    assert!(build_extractive(&ds, 1, 0).is_err());
}

pub fn pairs_round_trip_through_jsonl() {
    let pairs = build_extractive(&vote_table(), 1, 7).unwrap();
    let mut buf = Vec::new();
    write_pairs(&pairs, &mut buf).unwrap();
    assert_eq!(read_pairs(buf.as_slice()).unwrap(), pairs);
    let err = read_pairs("{\"id0\":\"a\",\"id1\":\"a\",\"pref\":1,\"source\":\"subjective\"}\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

pub fn agreement_matches_in_either_order() {
    let p = |id0: &str, id1: &str, pref: f64| PreferencePair {
        id0: id0.into(),
        id1: id1.into(),
        pref,
        source: Source::Generative,
        margins: None,
        meta: None,
    };
    let a = [p("a", "b", 1.0), p("c", "d", 0.5), p("e", "f", 0.0), p("g", "h", 1.0)];
    let b = [p("b", "a", 0.0), p("c", "d", 1.0), p("e", "f", 1.0)];
    let r = agreement_report(&a, &b);
    assert_eq!((r.shared, r.one_sided_ties, r.reversed), (3, 1, 1));
    assert!((r.agreement - 1.0 / 3.0).abs() < 1e-12);
}

pub fn prompt_matches_golden_file() {
    let golden = include_str!("../golden/prompt.txt");
    assert_eq!(render_prompt("positive", "The food was fine.", "Best meal of my life!"), golden.trim_end_matches('\n'));
}

// --- generative client against a local mock server ---------------------------

/// Minimal HTTP/1.1 server answering completion requests. The reply depends
/// on a marker word in the first sentence of the prompt.
struct MockLlm {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

fn reply_for(prompt: &str) -> Option<&'static str> {
    let first = prompt.lines().find(|l| l.starts_with("Sentence 1:")).unwrap_or("");
    if first.contains("pick-first") {
        Some("Sentence 1")
    } else if first.contains("pick-second") {
        Some(" sentence 2.")
    } else if first.contains("pick-none") {
        Some("No preference")
    } else if first.contains("pick-junk") {
        Some("I like turtles")
    } else {
        None
    }
}

impl MockLlm {
    fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(body) = read_request(&mut stream) else { continue };
                counter.fetch_add(1, Ordering::SeqCst);
                let v: serde_json::Value = serde_json::from_str(&body).unwrap_or_default();
                let prompt = v["prompt"].as_str().unwrap_or("");
                let (status, payload) = match reply_for(prompt) {
                    Some(text) => ("200 OK", serde_json::json!({ "choices": [{ "text": text }] }).to_string()),
                    None => ("500 Internal Server Error", "{}".to_string()),
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self { url, hits }
    }
}

fn generative_dataset() -> Dataset {
    Dataset::new(
        2,
        vec![
            ex("a0", "pick-first okay", 0, None),
            ex("a1", "great", 0, None),
            ex("b0", "pick-second fine", 0, None),
            ex("b1", "superb", 0, None),
            ex("c0", "pick-none meh", 1, None),
            ex("c1", "awful", 1, None),
            ex("d0", "pick-junk bad", 1, None),
            ex("d1", "terrible", 1, None),
            ex("e0", "pick-error", 1, None),
            ex("e1", "horrid", 1, None),
        ],
    )
    .unwrap()
}

pub fn generative_client_parses_caches_and_retries() {
    let server = MockLlm::start();
    let cache = tempfile::tempdir().unwrap();
    let config = LlmClientConfig {
        endpoint: server.url.clone(),
        api_key_env: "P2C_TEST_UNSET_KEY".into(),
        max_retries: 2,
        backoff_ms: vec![1],
        timeout_secs: 5,
        parallelism: 3,
        cache_dir: Some(cache.path().to_path_buf()),
        ..LlmClientConfig::default()
    };
    let ds = generative_dataset();
    let comparisons: Vec<(String, String)> =
        ["a", "b", "c", "d", "e"].iter().map(|k| (format!("{k}0"), format!("{k}1"))).collect();
    let client = HttpCompletion::new(&config);

    let first = query_generative(&ds, &comparisons, &config, &client).unwrap();
    let prefs: Vec<(String, f64)> = first.pairs.iter().map(|p| (p.id0.clone(), p.pref)).collect();
    assert_eq!(
        prefs,
        vec![("a0".into(), 0.0), ("b0".into(), 1.0), ("c0".into(), 0.5), ("d0".into(), 0.5)]
    );
    assert_eq!(first.unparsed, 1);
    assert_eq!(first.pairs[3].meta.as_ref().unwrap()["unparsed"], true);
    assert_eq!(first.pairs[2].meta.as_ref().unwrap()["unparsed"], false);
    assert_eq!(first.failed.len(), 1);
    assert_eq!(first.failed[0].0, "e0");
    // four successes plus one comparison tried 1 + max_retries times
    assert_eq!(first.network_calls, 4 + 3);
    assert_eq!(server.hits.load(Ordering::SeqCst), 7);

    let before = server.hits.load(Ordering::SeqCst);
    let warm = query_generative(&ds, &comparisons[..4], &config, &client).unwrap();
    assert_eq!(warm.network_calls, 0);
    assert_eq!(warm.cache_hits, 4);
    assert_eq!(server.hits.load(Ordering::SeqCst), before);
    let strip = |ps: &[PreferencePair]| ps.iter().map(|p| (p.id0.clone(), p.id1.clone(), p.pref)).collect::<Vec<_>>();
    assert_eq!(strip(&warm.pairs), strip(&first.pairs));
}

pub fn generative_rejects_cross_label_comparisons() {
    let ds = generative_dataset();
    let config = LlmClientConfig::default();
    let client = HttpCompletion::new(&config);
    assert!(query_generative(&ds, &[("a0".into(), "c0".into())], &config, &client).is_err());
}

// --- subjective protocol ------------------------------------------------------

pub fn subjective_aggregation_paths() {
    assert_eq!(aggregate_worker_labels(&[1.0, 1.0]).unwrap(), Some(1.0));
    assert_eq!(aggregate_worker_labels(&[0.5, 0.5]).unwrap(), Some(0.5));
    assert_eq!(aggregate_worker_labels(&[1.0, 0.0]).unwrap(), None);
    assert_eq!(aggregate_worker_labels(&[1.0, 0.0, 0.0]).unwrap(), Some(0.0));
    assert_eq!(aggregate_worker_labels(&[0.0, 1.0, 1.0]).unwrap(), Some(1.0));
    assert_eq!(aggregate_worker_labels(&[1.0, 0.0, 0.5]).unwrap(), Some(0.5));
    assert_eq!(aggregate_worker_labels(&[0.5, 1.0, 0.0]).unwrap(), Some(0.5));
}

pub fn scripted_round_finalizes_per_rules() {
    let ds = vote_table();
    let pairs: Vec<(String, String)> = [("a", "b"), ("c", "d"), ("f", "g"), ("h", "i")]
        .iter()
        .map(|&(x, y)| (x.to_owned(), y.to_owned()))
        .collect();
    let mut state = SubjectiveRoundState::new(0, pairs, vec![2, 2]);
    // pair i starts with worker i mod 3; answers are consumed in order
    let mut workers: Vec<Box<dyn Worker>> = vec![
        Box::new(ScriptedWorker::new("w0", [1.0, 0.5, 1.0])),
        Box::new(ScriptedWorker::new("w1", [1.0, 0.0, 1.0, 0.0])),
        Box::new(ScriptedWorker::new("w2", [0.0, 0.0, 0.0])),
    ];
    run_simulated_round(&mut state, &ds, &mut workers).unwrap();
    assert!(state.is_complete());
    let finals: Vec<f64> = state.labels.iter().map(|l| l.final_pref.unwrap()).collect();
    // pair 0: w0=1, w1=1 agree -> 1
    // pair 1: w1=0, w2=0 agree -> 0
    // pair 2: w2=0, w0=0.5, w1=1, no consensus -> 0.5
    // pair 3: w0=1, w1=0 split, w2=0 breaks the tie -> 0
    assert_eq!(finals, vec![1.0, 0.0, 0.5, 0.0]);
    let counts: Vec<usize> = state.labels.iter().map(|l| l.labels.len()).collect();
    assert_eq!(counts, vec![2, 2, 3, 3]);
    let out = state.finalized_pairs();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|p| p.source == Source::Subjective && p.margins.is_none()));
    assert_eq!(state.counts(), (0, 0, 4));
}

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use super::{PreferencePair, Source};
use crate::dataio::Dataset;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    /// Sleep before retry `i` is `backoff_ms[min(i, len - 1)]`.
    pub backoff_ms: Vec<u64>,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".into(),
            model: "text-davinci-003".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            backoff_ms: vec![500, 2000, 8000],
            timeout_secs: 30,
            max_tokens: 8,
            parallelism: 4,
            cache_dir: None,
        }
    }
}

/// The forced-choice prompt. Sentence 1 is always `x0`, sentence 2 `x1`.
pub fn render_prompt(label: &str, text0: &str, text1: &str) -> String {
    format!(
        "Both sentences below are labeled '{label}'. Which sentence expresses '{label}' more strongly? \
         Answer exactly one of: Sentence 1, Sentence 2, No preference.\nSentence 1: {text0}\nSentence 2: {text1}"
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedResponse {
    pub pref: f64,
    /// True when the response matched none of the allowed answers.
    pub unparsed: bool,
}

/// Maps a completion to a preference for sentence 2 (`x1`).
pub fn parse_response(text: &str) -> ParsedResponse {
    let t = text.trim().to_lowercase();
    let first = t.contains("sentence 1");
    let second = t.contains("sentence 2");
    let pref = if t.contains("no preference") {
        Some(0.5)
    } else if first && !second {
        Some(0.0)
    } else if second && !first {
        Some(1.0)
    } else {
        None
    };
    match pref {
        Some(pref) => ParsedResponse { pref, unparsed: false },
        None => ParsedResponse { pref: 0.5, unparsed: true },
    }
}

/// Anything that turns a prompt into a completion.
pub trait Completion: Sync {
    fn complete(&self, model: &str, prompt: &str) -> Result<String>;
}

/// Completion over HTTP: POSTs `{model, prompt, temperature: 0, max_tokens}`
/// and reads `choices[0].text` (or `choices[0].message.content`).
pub struct HttpCompletion {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    max_tokens: u32,
}

impl HttpCompletion {
    pub fn new(config: &LlmClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            endpoint: config.endpoint.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            max_tokens: config.max_tokens,
        }
    }
}

impl Completion for HttpCompletion {
    fn complete(&self, model: &str, prompt: &str) -> Result<String> {
        let body = json!({ "model": model, "prompt": prompt, "temperature": 0, "max_tokens": self.max_tokens });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Runtime(format!("LLM request failed: {e}")))?;
        let v: Value =
            resp.body_mut().read_json().map_err(|e| Error::Runtime(format!("LLM response unreadable: {e}")))?;
        let choice = &v["choices"][0];
        choice["text"]
            .as_str()
            .or_else(|| choice["message"]["content"].as_str())
            .map(str::to_owned)
            .ok_or_else(|| Error::Runtime("LLM response has no completion text".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    prompt: String,
    response: String,
}

/// On-disk response cache keyed by `sha256(model, prompt)`.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(model: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, model: &str, prompt: &str) -> Option<String> {
        let raw = fs::read(self.dir.join(format!("{}.json", Self::key(model, prompt)))).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&raw).ok()?;
        (entry.model == model && entry.prompt == prompt).then_some(entry.response)
    }

    /// Writes via a temporary file and rename, so readers never see a torn entry.
    pub fn put(&self, model: &str, prompt: &str, response: &str) -> Result<()> {
        let key = Self::key(model, prompt);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let entry = CacheEntry { model: model.into(), prompt: prompt.into(), response: response.into() };
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(&tmp, self.dir.join(format!("{key}.json")))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerativeOutcome {
    pub pairs: Vec<PreferencePair>,
    /// `(id0, id1, last error)` for comparisons that exhausted their retries.
    pub failed: Vec<(String, String, String)>,
    /// Responses that matched no allowed answer (kept as 0.5).
    pub unparsed: usize,
    pub network_calls: usize,
    pub cache_hits: usize,
}

/// Asks the model about each `(id0, id1)` comparison. Requests run on up to
/// `config.parallelism` threads; output keeps the input order.
pub fn query_generative(
    dataset: &Dataset,
    comparisons: &[(String, String)],
    config: &LlmClientConfig,
    client: &dyn Completion,
) -> Result<GenerativeOutcome> {
    let index = dataset.index_by_id();
    let mut prompts = Vec::with_capacity(comparisons.len());
    for (id0, id1) in comparisons {
        let (Some(&a), Some(&b)) = (index.get(id0.as_str()), index.get(id1.as_str())) else {
            return Err(Error::validation(format!("comparison ({id0}, {id1}) names an unknown example")));
        };
        let (e0, e1) = (&dataset.examples[a], &dataset.examples[b]);
        if e0.label != e1.label {
            return Err(Error::validation(format!("comparison ({id0}, {id1}) crosses labels")));
        }
        prompts.push(render_prompt(dataset.label_name(e0.label), &e0.text, &e1.text));
    }
    let cache = config.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<String, String>>>> = Mutex::new(vec![None; prompts.len()]);

    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= prompts.len() {
            break;
        }
        let prompt = &prompts[i];
        if let Some(hit) = cache.as_ref().and_then(|c| c.get(&config.model, prompt)) {
            hits.fetch_add(1, Ordering::Relaxed);
            results.lock().expect("result lock")[i] = Some(Ok(hit));
            continue;
        }
        let mut outcome = Err(String::new());
        for attempt in 0..=config.max_retries {
            if attempt > 0 {
                let ms = config.backoff_ms.get((attempt - 1) as usize).or(config.backoff_ms.last()).copied();
                std::thread::sleep(Duration::from_millis(ms.unwrap_or(0)));
            }
            calls.fetch_add(1, Ordering::Relaxed);
            match client.complete(&config.model, prompt) {
                Ok(text) => {
                    outcome = Ok(text);
                    break;
                }
                Err(e) => {
                    debug!(attempt, error = %e, "LLM request failed");
                    outcome = Err(e.to_string());
                }
            }
        }
        if let (Ok(text), Some(c)) = (&outcome, &cache) {
            if let Err(e) = c.put(&config.model, prompt, text) {
                warn!(error = %e, "could not cache LLM response");
            }
        }
        results.lock().expect("result lock")[i] = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..config.parallelism.max(1).min(prompts.len().max(1)) {
            s.spawn(worker);
        }
    });

    let mut out = GenerativeOutcome {
        network_calls: calls.into_inner(),
        cache_hits: hits.into_inner(),
        ..Default::default()
    };
    for ((id0, id1), res) in comparisons.iter().zip(results.into_inner().expect("result lock")) {
        match res.expect("every comparison is processed") {
            Ok(text) => {
                let parsed = parse_response(&text);
                out.unparsed += parsed.unparsed as usize;
                out.pairs.push(PreferencePair {
                    id0: id0.clone(),
                    id1: id1.clone(),
                    pref: parsed.pref,
                    source: Source::Generative,
                    margins: None,
                    meta: Some(json!({ "response": text, "unparsed": parsed.unparsed })),
                });
            }
            Err(e) => out.failed.push((id0.clone(), id1.clone(), e)),
        }
    }
    if !out.failed.is_empty() {
        warn!(failed = out.failed.len(), "some comparisons exhausted their retries");
    }
    Ok(out)
}

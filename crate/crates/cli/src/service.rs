//! HTTP annotation service for subjective preference rounds.
//!
//! One round is open at a time. Workers (browser sessions) lease a pair,
//! answer which sentence expresses the shared label more strongly, and the
//! round state aggregates two or three answers per pair. Every accepted label
//! is appended to a JSONL event log before it touches memory, so a restarted
//! service replays the log into exactly the state it had.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use p2c_core::dataio::Dataset;
use p2c_core::prefsources::{write_pairs, PreferencePair, SubjectiveRoundState};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::{info, warn};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(10 * 60);

const MAX_SESSION_LEN: usize = 200;

/// Millisecond wall clock, injectable so tests can expire leases.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("session `{session}` already labeled pair `{pair_id}`")]
    AlreadyLabeled { pair_id: String, session: String },
    #[error("pair `{0}` is already finalized")]
    Finalized(String),
    #[error("session `{session}` holds no active lease on pair `{pair_id}`; fetch the next pair again")]
    LeaseExpired { pair_id: String, session: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid round: {0}")]
    InvalidRound(String),
    #[error("event log {path}: {message}")]
    Log { path: String, message: String },
    #[error("round state is unavailable after an earlier panic")]
    Poisoned,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] p2c_core::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::AlreadyLabeled { .. } | ServiceError::Finalized(_) => StatusCode::CONFLICT,
            ServiceError::LeaseExpired { .. } => StatusCode::GONE,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// One comparison shown to workers. `first` is `id0`, `second` is `id1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPair {
    pub pair_id: String,
    pub id0: String,
    pub id1: String,
    pub text0: String,
    pub text1: String,
    /// Name of the label both sentences share.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSpec {
    pub round: usize,
    #[serde(default)]
    pub quotas: Vec<usize>,
    #[serde(default = "default_instructions")]
    pub instructions: String,
    pub pairs: Vec<RoundPair>,
}

fn default_instructions() -> String {
    "Both sentences carry the same label. Pick the sentence that expresses it more strongly, \
     or answer No Preference if neither does."
        .into()
}

pub fn question(label: &str) -> String {
    format!("Which sentence is more {label}?")
}

impl RoundSpec {
    /// Builds a round over `(id0, id1)` comparisons drawn from `dataset`.
    pub fn from_comparisons(
        round: usize,
        dataset: &Dataset,
        comparisons: &[(String, String)],
        quotas: Vec<usize>,
    ) -> Result<Self> {
        let index = dataset.index_by_id();
        let mut pairs = Vec::with_capacity(comparisons.len());
        for (k, (id0, id1)) in comparisons.iter().enumerate() {
            let (Some(&a), Some(&b)) = (index.get(id0.as_str()), index.get(id1.as_str())) else {
                return Err(ServiceError::InvalidRound(format!("comparison ({id0}, {id1}) names an unknown example")));
            };
            let (e0, e1) = (&dataset.examples[a], &dataset.examples[b]);
            pairs.push(RoundPair {
                pair_id: format!("r{round}-{k:05}"),
                id0: id0.clone(),
                id1: id1.clone(),
                text0: e0.text.clone(),
                text1: e1.text.clone(),
                label: dataset.label_name(e1.label).to_owned(),
            });
        }
        let spec = Self { round, quotas, instructions: default_instructions(), pairs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(ServiceError::InvalidRound(format!("duplicate pair id `{}`", p.pair_id)));
            }
            if p.id0 == p.id1 {
                return Err(ServiceError::InvalidRound(format!("pair `{}` compares an example with itself", p.pair_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| ServiceError::InvalidRound(format!("cannot parse round file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("round spec serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
    None,
}

impl Choice {
    /// Probability that the second sentence (`id1`) is preferred.
    pub fn value(self) -> f64 {
        match self {
            Choice::First => 0.0,
            Choice::Second => 1.0,
            Choice::None => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Open { spec: RoundSpec },
    Label { pair_id: String, session: String, choice: Choice, at_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub pair_id: String,
    pub session: String,
    pub choice: Choice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub pair_id: String,
    pub choice: Choice,
    /// Labels stored for the pair so far.
    pub labels: usize,
    pub final_pref: Option<f64>,
    pub round_complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_id: String,
    pub first: String,
    pub second: String,
    pub question: String,
    pub lease_expires_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NextStatus {
    /// `pair` holds a freshly leased (or still-leased) comparison.
    Leased,
    /// Every open slot is leased by someone else; ask again later.
    Wait,
    /// Nothing left that this session may label.
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub status: NextStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairView>,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStatus {
    pub round: usize,
    pub total: usize,
    pub pending: usize,
    pub in_progress: usize,
    pub finalized: usize,
    pub active_leases: usize,
    pub complete: bool,
}

#[derive(Clone, Debug)]
struct Lease {
    session: String,
    expires_ms: u64,
}

/// State of the open round plus its (optional) event log.
pub struct RoundService {
    spec: RoundSpec,
    state: SubjectiveRoundState,
    index: HashMap<String, usize>,
    leases: Vec<Vec<Lease>>,
    log: Option<(File, String)>,
    clock: Arc<dyn Clock>,
    lease_ms: u64,
}

impl RoundService {
    /// A round kept only in memory.
    pub fn new(spec: RoundSpec, clock: Arc<dyn Clock>) -> Result<Self> {
        spec.validate()?;
        let state = SubjectiveRoundState::new(
            spec.round,
            spec.pairs.iter().map(|p| (p.id0.clone(), p.id1.clone())).collect(),
            spec.quotas.clone(),
        );
        let index = spec.pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        let leases = vec![Vec::new(); spec.pairs.len()];
        Ok(Self { spec, state, index, leases, log: None, clock, lease_ms: DEFAULT_LEASE.as_millis() as u64 })
    }

    /// Opens a persistent round. An existing non-empty log is replayed (and
    /// must describe `spec` when one is given); otherwise the log is created
    /// from `spec`.
    pub fn open(log_path: impl AsRef<Path>, spec: Option<RoundSpec>, clock: Arc<dyn Clock>) -> Result<Self> {
        let path = log_path.as_ref();
        let shown = path.display().to_string();
        let log_err = |message: String| ServiceError::Log { path: shown.clone(), message };
        let existing = match fs::read(path) {
            Ok(bytes) if !bytes.is_empty() => Some(bytes),
            Ok(_) => None,
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let Some(bytes) = existing else {
            let spec = spec.ok_or_else(|| ServiceError::BadRequest("no round given and no event log to resume".into()))?;
            let mut service = Self::new(spec, clock)?;
            let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
            service.log = Some((file, shown));
            service.append(&Event::Open { spec: service.spec.clone() })?;
            info!(round = service.spec.round, pairs = service.spec.pairs.len(), "opened new round");
            return Ok(service);
        };

        let (events, valid_len) = parse_log(&bytes).map_err(log_err)?;
        let mut events = events.into_iter();
        let mut service = match events.next() {
            Some((_, Event::Open { spec: logged })) => {
                if spec.as_ref().is_some_and(|s| *s != logged) {
                    return Err(log_err("log belongs to a different round".into()));
                }
                Self::new(logged, clock)?
            }
            _ => return Err(log_err("log does not start with an open event".into())),
        };
        let mut replayed = 0;
        for (line, event) in events {
            match event {
                Event::Label { pair_id, session, choice, .. } => {
                    service.apply(&pair_id, &session, choice).map_err(|e| log_err(format!("line {line}: {e}")))?;
                    replayed += 1;
                }
                Event::Open { .. } => return Err(log_err(format!("line {line}: second open event"))),
            }
        }
        if valid_len < bytes.len() {
            warn!(log = %shown, dropped_bytes = bytes.len() - valid_len, "dropping torn final log line");
            OpenOptions::new().write(true).open(path)?.set_len(valid_len as u64)?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        service.log = Some((file, shown));
        info!(round = service.spec.round, labels = replayed, "resumed round from event log");
        Ok(service)
    }

    pub fn with_lease_duration(mut self, lease: Duration) -> Self {
        self.lease_ms = lease.as_millis() as u64;
        self
    }

    pub fn spec(&self) -> &RoundSpec {
        &self.spec
    }

    pub fn state(&self) -> &SubjectiveRoundState {
        &self.state
    }

    pub fn lease_duration(&self) -> Duration {
        Duration::from_millis(self.lease_ms)
    }

    pub fn status(&self) -> RoundStatus {
        let now = self.clock.now_ms();
        let (mut pending, mut in_progress, mut finalized, mut active) = (0, 0, 0, 0);
        for (i, labels) in self.state.labels.iter().enumerate() {
            let leased = self.leases[i].iter().filter(|l| l.expires_ms > now).count();
            if labels.final_pref.is_some() {
                finalized += 1;
                continue;
            }
            active += leased;
            if labels.labels.is_empty() && leased == 0 {
                pending += 1;
            } else {
                in_progress += 1;
            }
        }
        RoundStatus {
            round: self.spec.round,
            total: self.spec.pairs.len(),
            pending,
            in_progress,
            finalized,
            active_leases: active,
            complete: self.state.is_complete(),
        }
    }

    fn progress(&self, session: &str) -> Progress {
        let labeled = (0..self.spec.pairs.len()).filter(|&i| self.state.has_labeled(i, session)).count();
        Progress { labeled, total: self.spec.pairs.len() }
    }

    fn view(&self, i: usize, expires_ms: u64) -> PairView {
        let p = &self.spec.pairs[i];
        PairView {
            pair_id: p.pair_id.clone(),
            first: p.text0.clone(),
            second: p.text1.clone(),
            question: question(&p.label),
            lease_expires_ms: expires_ms,
        }
    }

    /// Leases the next pair `session` may label. A session that already
    /// holds a live lease gets the same pair back.
    pub fn next(&mut self, session: &str) -> Result<NextResponse> {
        check_session(session)?;
        let now = self.clock.now_ms();
        for leases in &mut self.leases {
            leases.retain(|l| l.expires_ms > now);
        }
        let held = self
            .leases
            .iter()
            .enumerate()
            .find_map(|(i, ls)| ls.iter().find(|l| l.session == session).map(|l| (i, l.expires_ms)));
        if let Some((i, expires)) = held {
            return Ok(NextResponse {
                status: NextStatus::Leased,
                pair: Some(self.view(i, expires)),
                progress: self.progress(session),
            });
        }
        let mut blocked = false;
        for i in 0..self.spec.pairs.len() {
            let needed = self.state.labels_needed(i);
            if needed == 0 || self.state.has_labeled(i, session) {
                continue;
            }
            if self.leases[i].len() >= needed {
                blocked = true;
                continue;
            }
            let expires_ms = now + self.lease_ms;
            self.leases[i].push(Lease { session: session.to_owned(), expires_ms });
            return Ok(NextResponse {
                status: NextStatus::Leased,
                pair: Some(self.view(i, expires_ms)),
                progress: self.progress(session),
            });
        }
        let status = if blocked { NextStatus::Wait } else { NextStatus::Done };
        Ok(NextResponse { status, pair: None, progress: self.progress(session) })
    }

    /// Stores one leased label: the log line is written before memory changes.
    pub fn label(&mut self, req: &LabelRequest) -> Result<LabelResponse> {
        check_session(&req.session)?;
        let i = *self.index.get(&req.pair_id).ok_or_else(|| ServiceError::UnknownPair(req.pair_id.clone()))?;
        if self.state.has_labeled(i, &req.session) {
            return Err(ServiceError::AlreadyLabeled { pair_id: req.pair_id.clone(), session: req.session.clone() });
        }
        if self.state.labels_needed(i) == 0 {
            return Err(ServiceError::Finalized(req.pair_id.clone()));
        }
        let now = self.clock.now_ms();
        let Some(pos) = self.leases[i].iter().position(|l| l.session == req.session) else {
            return Err(ServiceError::LeaseExpired { pair_id: req.pair_id.clone(), session: req.session.clone() });
        };
        if self.leases[i][pos].expires_ms <= now {
            self.leases[i].remove(pos);
            return Err(ServiceError::LeaseExpired { pair_id: req.pair_id.clone(), session: req.session.clone() });
        }
        self.append(&Event::Label {
            pair_id: req.pair_id.clone(),
            session: req.session.clone(),
            choice: req.choice,
            at_ms: now,
        })?;
        self.leases[i].remove(pos);
        let final_pref = self.apply(&req.pair_id, &req.session, req.choice)?;
        Ok(LabelResponse {
            pair_id: req.pair_id.clone(),
            choice: req.choice,
            labels: self.state.labels[i].labels.len(),
            final_pref,
            round_complete: self.state.is_complete(),
        })
    }

    fn apply(&mut self, pair_id: &str, session: &str, choice: Choice) -> Result<Option<f64>> {
        let i = *self.index.get(pair_id).ok_or_else(|| ServiceError::UnknownPair(pair_id.to_owned()))?;
        Ok(self.state.record(i, session, choice.value())?)
    }

    fn append(&mut self, event: &Event) -> Result<()> {
        if let Some((file, _)) = &mut self.log {
            let mut line = serde_json::to_string(event).expect("events serialize");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<PreferencePair> {
        self.state.finalized_pairs()
    }
}

fn check_session(session: &str) -> Result<()> {
    if session.is_empty() || session.len() > MAX_SESSION_LEN {
        return Err(ServiceError::BadRequest(format!("session must be 1..={MAX_SESSION_LEN} bytes")));
    }
    Ok(())
}

/// Parses log lines, returning `(line number, event)` pairs and the length of
/// the well-formed prefix. Only an unterminated final line may fail to parse:
/// that is a write torn by a crash, and it never reached memory.
fn parse_log(bytes: &[u8]) -> std::result::Result<(Vec<(usize, Event)>, usize), String> {
    let mut events = Vec::new();
    let mut offset = 0;
    for (n, chunk) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let terminated = chunk.ends_with(b"\n");
        let text = std::str::from_utf8(chunk).map_err(|e| format!("line {}: {e}", n + 1));
        match text.and_then(|t| serde_json::from_str::<Event>(t.trim()).map_err(|e| format!("line {}: {e}", n + 1))) {
            Ok(event) => events.push((n + 1, event)),
            Err(_) if chunk.iter().all(u8::is_ascii_whitespace) => {}
            Err(_) if !terminated => return Ok((events, offset)),
            Err(e) => return Err(e),
        }
        offset += chunk.len();
    }
    Ok((events, offset))
}

/// The service shared by all request handlers; the mutex is the single
/// writer every mutation passes through.
pub type SharedService = Arc<Mutex<RoundService>>;

fn lock(service: &SharedService) -> Result<MutexGuard<'_, RoundService>> {
    service.lock().map_err(|_| ServiceError::Poisoned)
}

#[derive(Deserialize)]
struct SessionQuery {
    session: String,
}

async fn get_status(State(service): State<SharedService>) -> Result<Json<RoundStatus>> {
    Ok(Json(lock(&service)?.status()))
}

async fn get_next(State(service): State<SharedService>, Query(q): Query<SessionQuery>) -> Result<Json<NextResponse>> {
    Ok(Json(lock(&service)?.next(&q.session)?))
}

async fn post_label(State(service): State<SharedService>, Json(req): Json<LabelRequest>) -> Result<Json<LabelResponse>> {
    Ok(Json(lock(&service)?.label(&req)?))
}

async fn get_export(State(service): State<SharedService>) -> Result<Response> {
    let pairs = lock(&service)?.export();
    let mut body = Vec::new();
    write_pairs(&pairs, &mut body)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn get_config(State(service): State<SharedService>) -> Result<Json<serde_json::Value>> {
    let service = lock(&service)?;
    Ok(Json(json!({
        "round": service.spec.round,
        "instructions": service.spec.instructions,
        "choices": ["first", "second", "none"],
        "lease_seconds": service.lease_duration().as_secs(),
    })))
}

/// Routes of the annotation API. With `ui_origin` set only that origin may
/// make cross-origin calls; otherwise any origin may.
pub fn router(service: SharedService, ui_origin: Option<HeaderValue>) -> Router {
    let origin = match ui_origin {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/round/status", get(get_status))
        .route("/round/next", get(get_next))
        .route("/round/label", post(post_label))
        .route("/pairs/export", get(get_export))
        .route("/config", get(get_config))
        .layer(cors)
        .with_state(service)
}

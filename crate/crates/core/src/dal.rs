//! Data access layer: job bookkeeping, detector dispatch and decisions.
//!
//! One submitted event fans out to one job per enabled, applicable
//! mechanism. Jobs advance `created -> stored -> dispatched -> analyzed ->
//! decided` on a worker pool; every transition is appended to the audit log.

use std::collections::HashMap;
use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;
use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{DetectionResult, EventData, Evidence, Registry, Thresholds};
use crate::event::{content_address, ChatLine, Direction, EventKind, EventPayload, TrafficEvent};
use crate::model::{DataClass, MechanismKind, PolicyState, Timestamp};
use crate::notify::{Audience, NotificationIntent, Release, Severity};
use crate::store::{DocumentStore, StoreError};

pub const DATA: &str = "data";
pub const BLOB: &str = "blob";
pub const JOBS: &str = "jobs";
pub const RESULTS: &str = "results";
pub const EVENTS: &str = "events";
pub const WINDOWS: &str = "window";
pub const DIAGNOSTICS: &str = "diagnostics";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExecId(pub String);

static EXEC_COUNTER: AtomicU64 = AtomicU64::new(1);

impl ExecId {
    /// Process-wide counter plus a random suffix.
    pub fn generate() -> Self {
        let n = EXEC_COUNTER.fetch_add(1, Ordering::Relaxed);
        Self(format!("{n:016x}-{:016x}", rand::random::<u64>()))
    }
}

impl std::fmt::Display for ExecId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataId(pub String);

impl std::fmt::Display for DataId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Created,
    Stored,
    Dispatched,
    Analyzed,
    Decided,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::Stored => "stored",
            Self::Dispatched => "dispatched",
            Self::Analyzed => "analyzed",
            Self::Decided => "decided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisJob {
    pub exec_id: ExecId,
    /// Empty until the snapshot has been stored.
    pub data_id: Option<DataId>,
    pub event_id: String,
    pub member_id: String,
    pub event_kind: EventKind,
    pub mechanism: MechanismKind,
    pub detector_version: String,
    pub state: JobState,
    /// Index of the triggering event inside the analyzed window.
    pub current_item: usize,
    pub created_at: Timestamp,
    pub result_ref: Option<String>,
}

impl AnalysisJob {
    fn advance(&mut self, to: JobState) {
        debug_assert!(to >= self.state, "job state moved backwards");
        self.state = to;
    }
}

/// What the proxy should do with the intercepted traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    WatermarkOnly,
    ProtectImage,
    StaticNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum InterceptDecision {
    Pass,
    /// Byte ranges of the current message to hide.
    Redact { ranges: Vec<(usize, usize)> },
    Replace { with: Replacement },
    Block { mechanism: MechanismKind },
}

impl InterceptDecision {
    fn rank(&self) -> u8 {
        match self {
            Self::Pass => 0,
            Self::Redact { .. } => 1,
            Self::Replace { with } => 2 + *with as u8,
            Self::Block { .. } => 10,
        }
    }

    pub fn is_enforcing(&self) -> bool {
        matches!(self, Self::Replace { .. } | Self::Block { .. })
    }

    /// Most restrictive of the two; redactions merge.
    pub fn combine(self, other: Self) -> Self {
        match (self, other) {
            (Self::Redact { mut ranges }, Self::Redact { ranges: more }) => {
                ranges.extend(more);
                ranges.sort_unstable();
                ranges.dedup();
                Self::Redact { ranges }
            }
            (a, b) => {
                if b.rank() > a.rank() {
                    b
                } else {
                    a
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub triggered: bool,
    pub intercept: InterceptDecision,
    pub intents: Vec<NotificationIntent>,
}

fn severity(m: MechanismKind) -> Severity {
    use MechanismKind::*;
    match m {
        Grooming | Cyberbullying | SensitiveImage => Severity::High,
        Distress | PiiExposure | HatefulMeme | DisturbingVideo => Severity::Medium,
        AbusiveAccount | BotAccount | FakeActivity => Severity::Low,
    }
}

fn enforcement(job: &AnalysisJob, result: &DetectionResult, triggered: bool) -> InterceptDecision {
    use MechanismKind::*;
    let inbound = job.event_kind.direction() == Direction::Inbound;
    match job.mechanism {
        SensitiveImage => InterceptDecision::Replace {
            with: if triggered {
                Replacement::ProtectImage
            } else {
                Replacement::WatermarkOnly
            },
        },
        _ if !triggered => InterceptDecision::Pass,
        HatefulMeme if inbound => InterceptDecision::Replace {
            with: Replacement::StaticNotice,
        },
        Grooming | Cyberbullying if inbound => {
            let ranges: Vec<(usize, usize)> = result
                .evidence
                .iter()
                .filter(|e| e.item == job.current_item)
                .map(|e| (e.start, e.end))
                .collect();
            if ranges.is_empty() {
                InterceptDecision::Pass
            } else {
                InterceptDecision::Redact { ranges }
            }
        }
        Distress => InterceptDecision::Pass,
        m => InterceptDecision::Block { mechanism: m },
    }
}

/// Maps a detection result to an intercept action and notification intents.
///
/// Pure: depends only on its arguments. A score triggers only when it is
/// strictly greater than the mechanism's threshold; error results never
/// trigger. Enforcement applies only at cybersafety level 2 for enforced
/// mechanisms.
pub fn decide(
    job: &AnalysisJob,
    result: &DetectionResult,
    thresholds: &Thresholds,
    policy: &PolicyState,
    now: Timestamp,
) -> Decision {
    let cyber = policy.effective_cybersafety(now);
    let threshold = thresholds.for_mechanism(job.mechanism);
    let triggered = !result.is_error()
        && cyber.enabled_mechanisms.contains(&job.mechanism)
        && result.scores.values().any(|&s| s > threshold);
    let intercept = if cyber.enforces(job.mechanism) {
        enforcement(job, result, triggered)
    } else {
        InterceptDecision::Pass
    };
    let mut intents = Vec::new();
    if triggered {
        let base = NotificationIntent {
            exec_id: job.exec_id.0.clone(),
            mechanism: job.mechanism,
            child_member_id: job.member_id.clone(),
            perpetrator: result.attributes.get("perpetrator").cloned(),
            evidence_refs: result.evidence.clone(),
            severity: severity(job.mechanism),
            data_class: job.event_kind.data_class(),
            audience: Audience::Child,
            release: Release::Immediate,
            blocked: intercept.is_enforcing(),
            detail: result.attributes.clone(),
        };
        let custodian_release = if job.mechanism == MechanismKind::PiiExposure {
            Release::OnChildDismiss
        } else {
            Release::Immediate
        };
        intents.push(NotificationIntent {
            audience: Audience::Custodian,
            release: custodian_release,
            ..base.clone()
        });
        intents.insert(0, base);
    }
    Decision {
        triggered,
        intercept,
        intents,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DalError {
    #[error("event `{0}` was already submitted")]
    Duplicate(String),
    #[error("malformed event: {0}")]
    InvalidEvent(String),
    #[error("unknown {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("dal is shut down")]
    Closed,
    #[error("analysis queue is full")]
    Overloaded,
}

/// Stored form of one analyzed event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub event: TrafficEvent,
    #[serde(default)]
    pub window: Vec<ChatLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub ts: Timestamp,
    pub exec_id: String,
    pub data_id: Option<String>,
    pub mechanism: MechanismKind,
    pub state: JobState,
}

/// Append-only NDJSON audit trail.
pub struct AuditLog {
    sink: Mutex<Box<dyn Write + Send>>,
    mirror: Option<Mutex<Vec<AuditRecord>>>,
}

impl AuditLog {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        Self {
            sink: Mutex::new(sink),
            mirror: None,
        }
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self::new(Box::new(file)))
    }

    /// In-memory log, readable through [`AuditLog::records`].
    pub fn memory() -> Self {
        Self {
            sink: Mutex::new(Box::new(std::io::sink())),
            mirror: Some(Mutex::new(Vec::new())),
        }
    }

    pub fn append(&self, record: AuditRecord) {
        let mut line = serde_json::to_vec(&record).expect("audit record serializes");
        line.push(b'\n');
        {
            let mut sink = self.sink.lock();
            if let Err(err) = sink.write_all(&line).and_then(|_| sink.flush()) {
                tracing::error!(%err, "audit write failed");
            }
        }
        if let Some(m) = &self.mirror {
            m.lock().push(record);
        }
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.mirror
            .as_ref()
            .map(|m| m.lock().clone())
            .unwrap_or_default()
    }

    /// Final state per exec id, replayed from NDJSON text.
    pub fn replay(ndjson: &str) -> Result<HashMap<String, AuditRecord>, serde_json::Error> {
        let mut out = HashMap::new();
        for line in ndjson.lines().filter(|l| !l.trim().is_empty()) {
            let rec: AuditRecord = serde_json::from_str(line)?;
            out.insert(rec.exec_id.clone(), rec);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DalConfig {
    pub workers: usize,
    pub queue_bound: usize,
    pub detector_timeout: Duration,
    /// Wait before each retry; its length is the retry count.
    pub retry_backoff: Vec<Duration>,
    pub retention: chrono::Duration,
    pub chat_window: usize,
}

impl Default for DalConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            queue_bound: 1024,
            detector_timeout: Duration::from_millis(1500),
            retry_backoff: [100, 400, 1600].map(Duration::from_millis).to_vec(),
            retention: chrono::Duration::days(30),
            chat_window: 50,
        }
    }
}

/// The detector set in use; swapped atomically between analyses.
#[derive(Clone)]
pub struct DetectorSet {
    pub registry: Arc<Registry>,
    pub thresholds: Thresholds,
}

impl DetectorSet {
    pub fn new(registry: Registry, thresholds: Thresholds) -> Self {
        Self {
            registry: Arc::new(registry),
            thresholds,
        }
    }

    pub fn version(&self) -> &str {
        self.registry.version()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job: AnalysisJob,
    pub result: DetectionResult,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job: AnalysisJob,
    pub result: Option<DetectionResult>,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedResult {
    exec_id: ExecId,
    data_id: Option<DataId>,
    result: DetectionResult,
    decision: Decision,
}

/// Completion signal for the jobs of one submission.
pub struct Submission {
    pub jobs: Vec<AnalysisJob>,
    done: Receiver<JobOutcome>,
}

impl Submission {
    /// Collects outcomes until all jobs finish or `timeout` passes; late
    /// jobs are simply missing from the returned list.
    pub fn wait(&self, timeout: Duration) -> Vec<JobOutcome> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::with_capacity(self.jobs.len());
        while out.len() < self.jobs.len() {
            match self.done.recv_deadline(deadline) {
                Ok(o) => out.push(o),
                Err(_) => break,
            }
        }
        out
    }

    /// Combined intercept decision over every outcome that arrived in time.
    pub fn intercept(outcomes: &[JobOutcome]) -> InterceptDecision {
        outcomes
            .iter()
            .map(|o| o.decision.intercept.clone())
            .fold(InterceptDecision::Pass, InterceptDecision::combine)
    }
}

struct WorkItem {
    job: AnalysisJob,
    snapshot: Arc<Vec<u8>>,
    policy: Arc<PolicyState>,
    reply: Sender<JobOutcome>,
}

pub type Listener = Arc<dyn Fn(&JobOutcome) + Send + Sync>;

struct Inner {
    store: Arc<dyn DocumentStore>,
    detectors: RwLock<DetectorSet>,
    audit: Arc<AuditLog>,
    config: DalConfig,
    jobs: RwLock<HashMap<ExecId, JobView>>,
    listeners: RwLock<Vec<Listener>>,
    data_seq: AtomicU64,
    window_lock: Mutex<()>,
}

pub struct Dal {
    inner: Arc<Inner>,
    queue: Mutex<Option<Sender<WorkItem>>>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
}

impl Dal {
    pub fn new(
        store: Arc<dyn DocumentStore>,
        detectors: DetectorSet,
        audit: Arc<AuditLog>,
        config: DalConfig,
    ) -> Self {
        let seq = store.keys(DATA).map(|k| k.len() as u64).unwrap_or(0);
        let inner = Arc::new(Inner {
            store,
            detectors: RwLock::new(detectors),
            audit,
            config,
            jobs: RwLock::new(HashMap::new()),
            listeners: RwLock::new(Vec::new()),
            data_seq: AtomicU64::new(seq),
            window_lock: Mutex::new(()),
        });
        let (tx, rx) = bounded::<WorkItem>(inner.config.queue_bound.max(1));
        let mut handles = Vec::new();
        for i in 0..inner.config.workers.max(1) {
            let rx = rx.clone();
            let inner = inner.clone();
            handles.push(
                thread::Builder::new()
                    .name(format!("dal-worker-{i}"))
                    .spawn(move || {
                        for item in rx {
                            inner.process(item);
                        }
                    })
                    .expect("spawn dal worker"),
            );
        }
        Self {
            inner,
            queue: Mutex::new(Some(tx)),
            workers: Mutex::new(handles),
        }
    }

    pub fn store(&self) -> &Arc<dyn DocumentStore> {
        &self.inner.store
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.inner.audit
    }

    pub fn config(&self) -> &DalConfig {
        &self.inner.config
    }

    pub fn detectors(&self) -> DetectorSet {
        self.inner.detectors.read().clone()
    }

    /// Replaces the detector set; jobs already dispatched keep the old one.
    pub fn install(&self, set: DetectorSet) {
        tracing::info!(version = set.version(), "detector set installed");
        *self.inner.detectors.write() = set;
    }

    pub fn add_listener(&self, listener: Listener) {
        self.inner.listeners.write().push(listener);
    }

    /// Stores raw image bytes under their content address.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let key = content_address(bytes);
        self.inner.store.put(BLOB, &key, bytes.to_vec())?;
        Ok(key)
    }

    pub fn store_data(&self, payload: &[u8]) -> Result<DataId, StoreError> {
        self.inner.store_data(payload)
    }

    pub fn fetch_data(&self, data_id: &DataId) -> Result<Vec<u8>, DalError> {
        self.inner
            .store
            .get(DATA, &data_id.0)?
            .map(|d| d.body)
            .ok_or_else(|| DalError::NotFound(format!("data id {data_id}")))
    }

    /// Steps 1-4: one job per enabled applicable mechanism, snapshot stored,
    /// jobs queued for dispatch.
    pub fn submit(&self, event: TrafficEvent, image: Option<&[u8]>, policy: &PolicyState) -> Result<Submission, DalError> {
        self.submit_at(event, image, policy, Utc::now())
    }

    pub fn submit_at(
        &self,
        event: TrafficEvent,
        image: Option<&[u8]>,
        policy: &PolicyState,
        now: Timestamp,
    ) -> Result<Submission, DalError> {
        self.enqueue(event, image, policy, now, false)
    }

    /// Like [`Dal::submit`], but gives up with [`DalError::Overloaded`]
    /// instead of waiting when the queue has no room for the event's jobs.
    /// Nothing is stored for a refused event.
    pub fn try_submit(&self, event: TrafficEvent, image: Option<&[u8]>, policy: &PolicyState) -> Result<Submission, DalError> {
        self.enqueue(event, image, policy, Utc::now(), true)
    }

    fn enqueue(
        &self,
        event: TrafficEvent,
        image: Option<&[u8]>,
        policy: &PolicyState,
        now: Timestamp,
        shed: bool,
    ) -> Result<Submission, DalError> {
        event
            .validate()
            .map_err(|e| DalError::InvalidEvent(e.to_string()))?;
        let enabled = policy.effective_cybersafety(now).enabled_mechanisms;
        let set = self.detectors();
        let mechanisms = set.registry.applicable(event.kind, &enabled);
        let (tx, rx) = unbounded();
        if mechanisms.is_empty() {
            return Ok(Submission {
                jobs: Vec::new(),
                done: rx,
            });
        }
        if shed {
            let queue = self.queue.lock().clone().ok_or(DalError::Closed)?;
            let room = queue.capacity().unwrap_or(usize::MAX).saturating_sub(queue.len());
            if room < mechanisms.len() {
                return Err(DalError::Overloaded);
            }
        }
        if self.inner.jobs.read().values().any(|v| v.job.event_id == event.event_id) {
            return Err(DalError::Duplicate(event.event_id));
        }
        match self.inner.store.insert(EVENTS, &event.event_id, now.to_rfc3339().into_bytes()) {
            Ok(_) => {}
            Err(StoreError::Exists { .. }) => return Err(DalError::Duplicate(event.event_id)),
            Err(err) => tracing::warn!(%err, "event marker not stored"),
        }
        if let (Some(bytes), Some(r)) = (image, event.image_ref()) {
            self.inner.store.put(BLOB, r, bytes.to_vec())?;
        }
        let window = self.inner.extend_window(&event)?;
        let current_item = window.len().saturating_sub(1);
        let snapshot = Arc::new(
            serde_json::to_vec(&Snapshot {
                event: event.clone(),
                window,
            })
            .expect("snapshot serializes"),
        );
        let data_id = match self.inner.store_data(&snapshot) {
            Ok(id) => Some(id),
            Err(err) => {
                tracing::warn!(%err, event_id = %event.event_id, "snapshot store deferred");
                None
            }
        };
        let policy = Arc::new(policy.clone());
        let mut jobs = Vec::new();
        for mechanism in mechanisms {
            let mut job = AnalysisJob {
                exec_id: ExecId::generate(),
                data_id: None,
                event_id: event.event_id.clone(),
                member_id: event.member_id.clone(),
                event_kind: event.kind,
                mechanism,
                detector_version: set.version().to_string(),
                state: JobState::Created,
                current_item,
                created_at: now,
                result_ref: None,
            };
            self.inner.record(&job);
            if let Some(id) = &data_id {
                job.data_id = Some(id.clone());
                job.advance(JobState::Stored);
                self.inner.record(&job);
            }
            jobs.push(job);
        }
        let queue = self.queue.lock().clone().ok_or(DalError::Closed)?;
        for job in &jobs {
            queue
                .send(WorkItem {
                    job: job.clone(),
                    snapshot: snapshot.clone(),
                    policy: policy.clone(),
                    reply: tx.clone(),
                })
                .map_err(|_| DalError::Closed)?;
        }
        Ok(Submission { jobs, done: rx })
    }

    /// Steps 5-9 for a stored job, run on the calling thread.
    pub fn dispatch(&self, job: &AnalysisJob) -> Result<DetectionResult, DalError> {
        if job.state != JobState::Stored {
            return Err(DalError::InvalidEvent(format!(
                "job {} is {}, expected stored",
                job.exec_id,
                job.state.as_str()
            )));
        }
        let mut job = job.clone();
        Ok(self.inner.dispatch(&mut job, &self.detectors()))
    }

    pub fn fetch_results(&self, exec_id: &ExecId) -> Result<JobView, DalError> {
        if let Some(v) = self.inner.jobs.read().get(exec_id) {
            return Ok(v.clone());
        }
        let job: AnalysisJob = self
            .inner
            .load_json(JOBS, &exec_id.0)?
            .ok_or_else(|| DalError::NotFound(format!("exec id {exec_id}")))?;
        let persisted: Option<PersistedResult> = self.inner.load_json(RESULTS, &exec_id.0)?;
        Ok(JobView {
            job,
            result: persisted.as_ref().map(|p| p.result.clone()),
            decision: persisted.map(|p| p.decision),
        })
    }

    /// Every job known for `event_id`, in creation order.
    pub fn jobs_for_event(&self, event_id: &str) -> Vec<JobView> {
        let mut out: Vec<JobView> = self
            .inner
            .jobs
            .read()
            .values()
            .filter(|v| v.job.event_id == event_id)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.job.exec_id.cmp(&b.job.exec_id));
        out
    }

    /// Loads the analyzed snapshot of a job, for evidence rendering.
    pub fn snapshot_of(&self, exec_id: &ExecId) -> Result<Snapshot, DalError> {
        let view = self.fetch_results(exec_id)?;
        let data_id = view
            .job
            .data_id
            .ok_or_else(|| DalError::NotFound(format!("data for {exec_id}")))?;
        serde_json::from_slice(&self.fetch_data(&data_id)?)
            .map_err(|e| DalError::InvalidEvent(e.to_string()))
    }

    /// Deletes every artifact derived from `event_id`: snapshot, image,
    /// jobs, results, diagnostics, the duplicate marker and its chat window.
    pub fn purge_event(&self, event: &TrafficEvent) -> Result<(), DalError> {
        let store = &self.inner.store;
        let views = self.jobs_for_event(&event.event_id);
        for v in &views {
            let id = &v.job.exec_id.0;
            store.delete(JOBS, id)?;
            store.delete(RESULTS, id)?;
            store.delete(DIAGNOSTICS, id)?;
            if let Some(d) = &v.job.data_id {
                store.delete(DATA, &d.0)?;
            }
        }
        {
            let mut jobs = self.inner.jobs.write();
            for v in &views {
                jobs.remove(&v.job.exec_id);
            }
        }
        if let Some(r) = event.image_ref() {
            store.delete(BLOB, r)?;
        }
        if let Some(key) = window_key(event) {
            store.delete(WINDOWS, &key)?;
        }
        store.delete(EVENTS, &event.event_id)?;
        Ok(())
    }

    /// Drops analyzed snapshots and job artifacts older than the retention
    /// period. Returns the number of events purged.
    pub fn purge_expired(&self, now: Timestamp) -> Result<usize, DalError> {
        let cutoff = now - self.inner.config.retention;
        let mut purged = 0;
        for key in self.inner.store.keys(DATA)? {
            let Some(doc) = self.inner.store.get(DATA, &key)? else {
                continue;
            };
            let Ok(snap) = serde_json::from_slice::<Snapshot>(&doc.body) else {
                continue;
            };
            if snap.event.captured_at < cutoff {
                self.purge_event(&snap.event)?;
                self.inner.store.delete(DATA, &key)?;
                purged += 1;
            }
        }
        Ok(purged)
    }

    /// Stops accepting work and joins the workers after the queue drains.
    pub fn shutdown(&self) {
        self.queue.lock().take();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Dal {
    fn drop(&mut self) {
        self.queue.lock().take();
    }
}

fn window_key(event: &TrafficEvent) -> Option<String> {
    match &event.payload {
        EventPayload::Chat { conversation, .. } => Some(format!("{}|{}", event.member_id, conversation)),
        _ => None,
    }
}

fn retry<T>(
    backoff: &[Duration],
    what: &str,
    mut f: impl FnMut() -> Result<T, StoreError>,
) -> Result<T, StoreError> {
    let mut attempt = 0;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(err) if attempt < backoff.len() => {
                tracing::warn!(%err, attempt, what, "retrying");
                let wait = match &err {
                    StoreError::CapacityExceeded { retry_after_ms } => {
                        backoff[attempt].max(Duration::from_millis(*retry_after_ms).min(backoff[attempt] * 4))
                    }
                    _ => backoff[attempt],
                };
                thread::sleep(wait);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

impl Inner {
    fn store_data(&self, payload: &[u8]) -> Result<DataId, StoreError> {
        let hash = content_address(payload);
        loop {
            let seq = self.data_seq.fetch_add(1, Ordering::Relaxed) + 1;
            let id = DataId(format!("{}-{seq:08x}", &hash[..16]));
            match self.store.insert(DATA, &id.0, payload.to_vec()) {
                Ok(_) => return Ok(id),
                Err(StoreError::Exists { .. }) => continue,
                Err(err) => return Err(err),
            }
        }
    }

    fn load_json<T: serde::de::DeserializeOwned>(&self, collection: &str, key: &str) -> Result<Option<T>, DalError> {
        match self.store.get(collection, key)? {
            Some(doc) => serde_json::from_slice(&doc.body)
                .map(Some)
                .map_err(|e| DalError::InvalidEvent(e.to_string())),
            None => Ok(None),
        }
    }

    fn extend_window(&self, event: &TrafficEvent) -> Result<Vec<ChatLine>, DalError> {
        let EventPayload::Chat { peer, text, .. } = &event.payload else {
            return Ok(Vec::new());
        };
        let key = window_key(event).expect("chat event has window key");
        let line = match event.direction {
            Direction::Inbound => ChatLine::inbound(peer, text),
            Direction::Outbound => ChatLine::outbound(&event.member_id, text),
        };
        let _guard = self.window_lock.lock();
        let mut window: Vec<ChatLine> = match self.store.get(WINDOWS, &key) {
            Ok(Some(doc)) => serde_json::from_slice(&doc.body).unwrap_or_default(),
            Ok(None) => Vec::new(),
            Err(err) => {
                tracing::warn!(%err, "chat window unavailable, analyzing the line alone");
                return Ok(vec![line]);
            }
        };
        window.push(line);
        let cap = self.config.chat_window.max(1);
        if window.len() > cap {
            window.drain(..window.len() - cap);
        }
        if let Err(err) = self.store.put(WINDOWS, &key, serde_json::to_vec(&window).expect("window serializes")) {
            tracing::warn!(%err, "chat window not persisted");
        }
        Ok(window)
    }

    /// Updates the in-memory table, the jobs collection and the audit log.
    fn record(&self, job: &AnalysisJob) {
        self.jobs
            .write()
            .entry(job.exec_id.clone())
            .and_modify(|v| v.job = job.clone())
            .or_insert_with(|| JobView {
                job: job.clone(),
                result: None,
                decision: None,
            });
        let body = serde_json::to_vec(job).expect("job serializes");
        if let Err(err) = self.store.put(JOBS, &job.exec_id.0, body) {
            tracing::warn!(%err, exec_id = %job.exec_id, "job state not persisted");
        }
        self.audit.append(AuditRecord {
            ts: Utc::now(),
            exec_id: job.exec_id.0.clone(),
            data_id: job.data_id.as_ref().map(|d| d.0.clone()),
            mechanism: job.mechanism,
            state: job.state,
        });
    }

    fn diagnose(&self, job: &AnalysisJob, message: &str) {
        tracing::warn!(exec_id = %job.exec_id, mechanism = %job.mechanism, message, "detector failure");
        let body = serde_json::json!({
            "exec_id": job.exec_id,
            "mechanism": job.mechanism,
            "message": message,
            "ts": Utc::now(),
        });
        let _ = self
            .store
            .put(DIAGNOSTICS, &job.exec_id.0, body.to_string().into_bytes());
    }

    fn load_event_data(&self, job: &AnalysisJob) -> Result<EventData, String> {
        let data_id = job.data_id.as_ref().ok_or("job has no data id")?;
        let body = retry(&self.config.retry_backoff, "fetch data", || {
            self.store.get(DATA, &data_id.0)
        })
        .map_err(|e| e.to_string())?
        .ok_or_else(|| format!("data {data_id} missing"))?
        .body;
        let snap: Snapshot = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let image = match snap.event.image_ref() {
            Some(r) => self
                .store
                .get(BLOB, r)
                .map_err(|e| e.to_string())?
                .map(|d| d.body),
            None => None,
        };
        Ok(EventData {
            event: snap.event,
            window: snap.window,
            image,
        })
    }

    fn dispatch(&self, job: &mut AnalysisJob, set: &DetectorSet) -> DetectionResult {
        let Some(detector) = set.registry.get(job.mechanism) else {
            self.diagnose(job, "no detector registered");
            return DetectionResult::error(set.version());
        };
        job.detector_version = detector.version().to_string();
        job.advance(JobState::Dispatched);
        self.record(job);
        let data = match self.load_event_data(job) {
            Ok(d) => d,
            Err(msg) => {
                self.diagnose(job, &msg);
                return DetectionResult::error(detector.version());
            }
        };
        let (tx, rx) = bounded(1);
        let version = detector.version().to_string();
        thread::spawn(move || {
            let out = std::panic::catch_unwind(AssertUnwindSafe(|| detector.analyze(&data)));
            let _ = tx.send(out);
        });
        match rx.recv_timeout(self.config.detector_timeout) {
            Ok(Ok(mut result)) => {
                for v in result.scores.values_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
                result
            }
            Ok(Err(_)) => {
                self.diagnose(job, "detector panicked");
                DetectionResult::error(&version)
            }
            Err(_) => {
                self.diagnose(job, "detector timed out");
                DetectionResult::error(&version)
            }
        }
    }

    fn process(&self, item: WorkItem) {
        let WorkItem {
            mut job,
            snapshot,
            policy,
            reply,
        } = item;
        let set = self.detectors.read().clone();
        let result = if job.state == JobState::Created {
            match retry(&self.config.retry_backoff, "store data", || self.store_data(&snapshot)) {
                Ok(id) => {
                    job.data_id = Some(id);
                    job.advance(JobState::Stored);
                    self.record(&job);
                    None
                }
                Err(err) => {
                    self.diagnose(&job, &format!("store failed after retries: {err}"));
                    Some(DetectionResult::error(set.version()))
                }
            }
        } else {
            None
        };
        let result = result.unwrap_or_else(|| self.dispatch(&mut job, &set));
        job.advance(JobState::Analyzed);
        job.result_ref = Some(job.exec_id.0.clone());
        self.record(&job);
        let now = Utc::now();
        let decision = decide(&job, &result, &set.thresholds, &policy, now);
        job.advance(JobState::Decided);
        let persisted = PersistedResult {
            exec_id: job.exec_id.clone(),
            data_id: job.data_id.clone(),
            result: result.clone(),
            decision: decision.clone(),
        };
        let body = serde_json::to_vec(&persisted).expect("result serializes");
        if let Err(err) = retry(&self.config.retry_backoff, "persist result", || {
            self.store.put(RESULTS, &job.exec_id.0, body.clone())
        }) {
            tracing::error!(%err, exec_id = %job.exec_id, "result not persisted");
        }
        if let Some(v) = self.jobs.write().get_mut(&job.exec_id) {
            v.result = Some(result.clone());
            v.decision = Some(decision.clone());
        }
        self.record(&job);
        let outcome = JobOutcome {
            job,
            result,
            decision,
        };
        for l in self.listeners.read().iter() {
            l(&outcome);
        }
        let _ = reply.send(outcome);
    }
}

/// Helper for callers building evidence portions: the evidence items plus
/// one line of context on each side, in window order.
pub fn evidence_portions(window: &[ChatLine], evidence: &[Evidence]) -> Vec<(usize, ChatLine)> {
    let mut idx = std::collections::BTreeSet::new();
    for e in evidence {
        if e.item >= window.len() {
            continue;
        }
        idx.insert(e.item);
        if e.item > 0 {
            idx.insert(e.item - 1);
        }
        if e.item + 1 < window.len() {
            idx.insert(e.item + 1);
        }
    }
    idx.into_iter().map(|i| (i, window[i].clone())).collect()
}

/// Data class of a job's event, for scope checks.
pub fn job_class(job: &AnalysisJob) -> DataClass {
    job.event_kind.data_class()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CybersafetyConfig, CybersafetyLevel};
    use std::collections::BTreeSet;

    fn job(m: MechanismKind, kind: EventKind) -> AnalysisJob {
        AnalysisJob {
            exec_id: ExecId("e".into()),
            data_id: Some(DataId("d".into())),
            event_id: "ev".into(),
            member_id: "kid".into(),
            event_kind: kind,
            mechanism: m,
            detector_version: "v1".into(),
            state: JobState::Analyzed,
            current_item: 0,
            created_at: Utc::now(),
            result_ref: None,
        }
    }

    fn policy(level: CybersafetyLevel, enforce: &[MechanismKind]) -> PolicyState {
        let household = crate::model::Household::new(
            "h",
            vec![
                crate::model::HouseholdMember::child("kid", "John", "owl"),
                crate::model::HouseholdMember::custodian("mum", "Mary"),
            ],
        )
        .unwrap();
        let change = crate::model::OptionChange::Cybersafety {
            level,
            enabled: CybersafetyConfig::default().enabled_mechanisms,
            enforce: enforce.iter().copied().collect::<BTreeSet<_>>(),
        };
        PolicyState::with_approved(&household, [change], Utc::now()).unwrap()
    }

    #[test]
    fn exec_ids_are_unique_and_ordered() {
        let a = ExecId::generate();
        let b = ExecId::generate();
        assert_ne!(a, b);
        assert!(a < b);
    }

    #[test]
    fn combine_prefers_block() {
        let r = InterceptDecision::Redact { ranges: vec![(0, 1)] };
        let b = InterceptDecision::Block {
            mechanism: MechanismKind::PiiExposure,
        };
        assert_eq!(r.clone().combine(b.clone()), b);
        assert_eq!(InterceptDecision::Pass.combine(r.clone()), r);
        let p = InterceptDecision::Replace {
            with: Replacement::ProtectImage,
        };
        let w = InterceptDecision::Replace {
            with: Replacement::WatermarkOnly,
        };
        assert_eq!(w.combine(p.clone()), p);
    }

    #[test]
    fn error_result_never_triggers() {
        let d = decide(
            &job(MechanismKind::PiiExposure, EventKind::ChatOut),
            &DetectionResult::error("v1"),
            &Thresholds::default(),
            &policy(CybersafetyLevel::L2, &[MechanismKind::PiiExposure]),
            Utc::now(),
        );
        assert!(!d.triggered);
        assert_eq!(d.intercept, InterceptDecision::Pass);
        assert!(d.intents.is_empty());
    }

    #[test]
    fn meme_replaced_in_feed_blocked_on_upload() {
        let hit = DetectionResult::new("hateful", "v1").score("hateful", 1.0);
        let p = policy(CybersafetyLevel::L2, &[MechanismKind::HatefulMeme]);
        let feed = decide(&job(MechanismKind::HatefulMeme, EventKind::FeedImage), &hit, &Thresholds::default(), &p, Utc::now());
        assert_eq!(
            feed.intercept,
            InterceptDecision::Replace {
                with: Replacement::StaticNotice
            }
        );
        let up = decide(&job(MechanismKind::HatefulMeme, EventKind::ImageUpload), &hit, &Thresholds::default(), &p, Utc::now());
        assert!(matches!(up.intercept, InterceptDecision::Block { .. }));
    }

    #[test]
    fn pii_custodian_waits_for_dismissal() {
        let hit = DetectionResult::new("pii_found", "v1").score("pii", 1.0);
        let d = decide(
            &job(MechanismKind::PiiExposure, EventKind::ChatOut),
            &hit,
            &Thresholds::default(),
            &policy(CybersafetyLevel::L1, &[]),
            Utc::now(),
        );
        assert_eq!(d.intents.len(), 2);
        assert_eq!(d.intents[0].audience, Audience::Child);
        assert_eq!(d.intents[0].release, Release::Immediate);
        assert_eq!(d.intents[1].release, Release::OnChildDismiss);
    }

    #[test]
    fn portions_add_one_line_of_context() {
        let w: Vec<ChatLine> = (0..6).map(|i| ChatLine::inbound("x", &i.to_string())).collect();
        let ev = vec![Evidence::whole_message(2, "2"), Evidence::whole_message(5, "5")];
        let idx: Vec<usize> = evidence_portions(&w, &ev).into_iter().map(|(i, _)| i).collect();
        assert_eq!(idx, vec![1, 2, 3, 4, 5]);
    }
}

//! Notification rendering, per-recipient push queues and flag reports.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, LazyLock};

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{anonymize, ConsentProof, IntakePayload, IntakeRecord, IntakeSink};
use crate::dal::{Dal, ExecId, Snapshot};
use crate::detectors::Evidence;
use crate::model::{
    scope_check, ConsentRecord, DataClass, Destination, Household, MechanismKind, PolicyState,
    ScopeDecision, Timestamp, VisibilityLevel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Child,
    Custodian,
}

/// When a rendered notification may leave the hub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Release {
    Immediate,
    /// Held until the child dismisses the matching warning.
    OnChildDismiss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationIntent {
    pub exec_id: String,
    pub mechanism: MechanismKind,
    pub child_member_id: String,
    pub perpetrator: Option<String>,
    pub evidence_refs: Vec<Evidence>,
    pub severity: Severity,
    pub data_class: DataClass,
    pub audience: Audience,
    pub release: Release,
    /// The traffic was blocked or replaced.
    #[serde(default)]
    pub blocked: bool,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceAccess {
    None,
    NamesOnly,
    PortionsLink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedNotification {
    pub recipient: Audience,
    pub exec_id: String,
    pub mechanism: MechanismKind,
    pub text: String,
    pub evidence_access: EvidenceAccess,
    pub evidence_url: Option<String>,
    pub release: Release,
}

fn parse_table(raw: &str) -> HashMap<MechanismKind, String> {
    raw.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.split_once('\t')?;
            Some((MechanismKind::parse(k.trim())?, v.trim().to_string()))
        })
        .collect()
}

static PHRASES: LazyLock<HashMap<MechanismKind, String>> =
    LazyLock::new(|| parse_table(include_str!("../data/mechanism_phrases.tsv")));

static ADVICE: LazyLock<HashMap<MechanismKind, String>> =
    LazyLock::new(|| parse_table(include_str!("../data/child_advice.tsv")));

/// Custodian-facing phrase, e.g. grooming -> "sexual grooming".
pub fn mechanism_phrase(m: MechanismKind) -> &'static str {
    PHRASES.get(&m).map(String::as_str).unwrap_or(m.as_str())
}

pub fn evidence_url(exec_id: &str) -> String {
    format!("/evidence/{exec_id}")
}

fn pii_nouns(categories: &str) -> String {
    let nouns: Vec<&str> = categories
        .split(',')
        .filter(|c| !c.is_empty())
        .map(|c| match c {
            "phone" => "phone number",
            "email" => "email address",
            "street_address" => "home address",
            "zip_code" => "zip code",
            "credit_card" => "card number",
            "ip" | "ipv6" => "IP address",
            "link" => "personal link",
            other => other,
        })
        .collect();
    match nouns.as_slice() {
        [] => "personal information".to_string(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn child_text(intent: &NotificationIntent) -> String {
    let template = ADVICE
        .get(&intent.mechanism)
        .cloned()
        .unwrap_or_else(|| "Something here looks risky. Be careful.".into());
    let detail = match intent.mechanism {
        MechanismKind::PiiExposure => {
            pii_nouns(intent.detail.get("categories").map(String::as_str).unwrap_or(""))
        }
        _ => String::new(),
    };
    template
        .replace("{perp}", intent.perpetrator.as_deref().unwrap_or("Someone"))
        .replace("{detail}", &detail)
}

/// Renders one intent for its audience.
///
/// Custodian texts follow the parental visibility level:
/// - L1: `"{child} might be a victim of {phrase}."`, no evidence.
/// - L2: adds `" by {perp}"` when the perpetrator is known; a data class
///   selected at L2 also gets the evidence link.
/// - L3: adds the evidence link for every class.
///
/// The child's rendering never depends on policy.
pub fn render(
    intent: &NotificationIntent,
    policy: &PolicyState,
    child_name: &str,
    now: Timestamp,
) -> Vec<RenderedNotification> {
    let base = RenderedNotification {
        recipient: intent.audience,
        exec_id: intent.exec_id.clone(),
        mechanism: intent.mechanism,
        text: String::new(),
        evidence_access: EvidenceAccess::None,
        evidence_url: None,
        release: intent.release,
    };
    if intent.audience == Audience::Child {
        return vec![RenderedNotification {
            text: child_text(intent),
            ..base
        }];
    }
    let phrase = mechanism_phrase(intent.mechanism);
    let level = policy.effective_parental(now).level;
    let class_visible =
        scope_check(policy, intent.data_class, Destination::Custodian, now) == ScopeDecision::Allow;
    let (text, access) = match (level, intent.perpetrator.as_deref()) {
        (VisibilityLevel::L1, _) => (
            format!("{child_name} might be a victim of {phrase}."),
            EvidenceAccess::None,
        ),
        (_, perp) if class_visible => {
            let by = perp.map(|p| format!(" by {p}")).unwrap_or_default();
            (
                format!(
                    "{child_name} might be a victim of {phrase}{by}. Click here to see the suspicious {}",
                    intent.data_class.noun()
                ),
                EvidenceAccess::PortionsLink,
            )
        }
        (_, Some(perp)) => (
            format!("{child_name} might be a victim of {phrase} by {perp}"),
            EvidenceAccess::NamesOnly,
        ),
        (_, None) => (
            format!("{child_name} might be a victim of {phrase}."),
            EvidenceAccess::None,
        ),
    };
    vec![RenderedNotification {
        text,
        evidence_url: (access == EvidenceAccess::PortionsLink).then(|| evidence_url(&intent.exec_id)),
        evidence_access: access,
        ..base
    }]
}

/// Member ids that receive a rendering.
pub fn recipients(household: &Household, rendered: &RenderedNotification) -> Vec<String> {
    match rendered.recipient {
        Audience::Child => vec![household.child().member_id.clone()],
        Audience::Custodian => household.custodians().map(|m| m.member_id.clone()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    #[default]
    Incident,
    ConsentRequest,
    ConsentDecided,
}

/// One event on a member's push stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushMessage {
    pub seq: u64,
    pub recipient: Audience,
    pub text: String,
    pub evidence_access: EvidenceAccess,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_url: Option<String>,
    #[serde(default)]
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ConsentRecord>,
}

impl PushMessage {
    pub fn incident(r: &RenderedNotification) -> Self {
        Self {
            seq: 0,
            recipient: r.recipient,
            text: r.text.clone(),
            evidence_access: r.evidence_access,
            evidence_url: r.evidence_url.clone(),
            kind: MessageKind::Incident,
            exec_id: Some(r.exec_id.clone()),
            record: None,
        }
    }

    pub fn consent(recipient: Audience, kind: MessageKind, text: String, record: ConsentRecord) -> Self {
        Self {
            seq: 0,
            recipient,
            text,
            evidence_access: EvidenceAccess::None,
            evidence_url: None,
            kind,
            exec_id: None,
            record: Some(record),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("push channel closed")]
pub struct ChannelClosed;

pub trait PushChannel: Send + Sync {
    fn deliver(&self, msg: &PushMessage) -> Result<(), ChannelClosed>;
}

/// Collects deliveries in memory; can be closed to simulate a disconnect.
#[derive(Default)]
pub struct MemoryChannel {
    received: Mutex<Vec<PushMessage>>,
    closed: std::sync::atomic::AtomicBool,
}

impl MemoryChannel {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn received(&self) -> Vec<PushMessage> {
        self.received.lock().clone()
    }

    pub fn close(&self) {
        self.closed.store(true, std::sync::atomic::Ordering::SeqCst);
    }
}

impl PushChannel for MemoryChannel {
    fn deliver(&self, msg: &PushMessage) -> Result<(), ChannelClosed> {
        if self.closed.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(ChannelClosed);
        }
        self.received.lock().push(msg.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
    pub delivered: bool,
}

pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;

#[derive(Default)]
struct HubState {
    next_seq: HashMap<String, u64>,
    queues: HashMap<String, VecDeque<PushMessage>>,
    channels: HashMap<String, Arc<dyn PushChannel>>,
    held: HashMap<String, Vec<(String, PushMessage)>>,
    dropped: u64,
}

/// Per-recipient FIFO queues with bounded backlog for offline members.
pub struct NotificationHub {
    state: Mutex<HubState>,
    capacity: usize,
}

impl Default for NotificationHub {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl NotificationHub {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(HubState::default()),
            capacity: capacity.max(1),
        }
    }

    /// Attaches a channel and flushes anything queued for `member_id`.
    pub fn register(&self, member_id: &str, channel: Arc<dyn PushChannel>) {
        let mut st = self.state.lock();
        st.channels.insert(member_id.to_string(), channel);
        Self::flush(&mut st, member_id);
    }

    pub fn unregister(&self, member_id: &str) {
        self.state.lock().channels.remove(member_id);
    }

    pub fn queued(&self, member_id: &str) -> usize {
        self.state.lock().queues.get(member_id).map_or(0, VecDeque::len)
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().dropped
    }

    /// Assigns the next sequence number and delivers or queues.
    pub fn push(&self, member_id: &str, mut msg: PushMessage) -> Receipt {
        let mut st = self.state.lock();
        let seq = {
            let n = st.next_seq.entry(member_id.to_string()).or_insert(0);
            *n += 1;
            *n
        };
        msg.seq = seq;
        let queue = st.queues.entry(member_id.to_string()).or_default();
        queue.push_back(msg);
        if queue.len() > self.capacity {
            let old = queue.pop_front().expect("non-empty queue");
            st.dropped += 1;
            tracing::warn!(member_id, seq = old.seq, "push queue full, dropped oldest message");
        }
        Self::flush(&mut st, member_id);
        let delivered = !st
            .queues
            .get(member_id)
            .is_some_and(|q| q.iter().any(|m| m.seq == seq));
        Receipt { seq, delivered }
    }

    /// Pushes every rendering to its recipients, holding those released on
    /// child dismissal.
    pub fn publish(&self, household: &Household, rendered: &[RenderedNotification]) -> Vec<Receipt> {
        let mut out = Vec::new();
        for r in rendered {
            for member in recipients(household, r) {
                let msg = PushMessage::incident(r);
                if r.release == Release::OnChildDismiss {
                    self.state
                        .lock()
                        .held
                        .entry(r.exec_id.clone())
                        .or_default()
                        .push((member, msg));
                } else {
                    out.push(self.push(&member, msg));
                }
            }
        }
        out
    }

    /// The child dismissed the warning for `exec_id`; releases held
    /// custodian notifications.
    pub fn child_dismissed(&self, exec_id: &str) -> Vec<Receipt> {
        let held = self.state.lock().held.remove(exec_id).unwrap_or_default();
        held.into_iter()
            .map(|(member, msg)| self.push(&member, msg))
            .collect()
    }

    fn flush(st: &mut HubState, member_id: &str) {
        let Some(channel) = st.channels.get(member_id).cloned() else {
            return;
        };
        let Some(queue) = st.queues.get_mut(member_id) else {
            return;
        };
        while let Some(front) = queue.front() {
            match channel.deliver(front) {
                Ok(()) => {
                    queue.pop_front();
                }
                Err(ChannelClosed) => {
                    tracing::info!(member_id, "push channel closed, queueing");
                    st.channels.remove(member_id);
                    return;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagClaim {
    Cyberbullying,
    Grooming,
    Aggressive,
    FakeIdentity,
    FalseInformation,
    SensitiveImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagDirection {
    MissedDetection,
    WrongDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagReport {
    pub member_id: String,
    /// An exec id or an event id.
    pub target_ref: String,
    pub claim: FlagClaim,
    pub direction: FlagDirection,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFlag {
    pub flag_id: String,
    pub report: FlagReport,
    pub event_id: String,
    pub exec_id: Option<String>,
    pub data_class: DataClass,
    pub forwarded: bool,
    pub created_at: Timestamp,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlagError {
    #[error("unknown flag target `{0}`")]
    UnknownTarget(String),
    #[error("member `{0}` is not part of the household")]
    UnknownMember(String),
    #[error("flag store: {0}")]
    Store(String),
}

pub const FLAGS: &str = "flags";

fn resolve_target(dal: &Dal, target: &str) -> Option<(Snapshot, Option<String>)> {
    let exec = ExecId(target.to_string());
    if dal.fetch_results(&exec).is_ok() {
        return dal.snapshot_of(&exec).ok().map(|s| (s, Some(target.to_string())));
    }
    let jobs = dal.jobs_for_event(target);
    let first = jobs.first()?;
    dal.snapshot_of(&first.job.exec_id).ok().map(|s| (s, None))
}

/// Persists a flag and forwards it to the back end when the back-end
/// visibility option covers the flagged data class.
pub fn submit_flag(
    report: FlagReport,
    dal: &Dal,
    household: &Household,
    policy: &PolicyState,
    salt: &[u8],
    sink: Option<&dyn IntakeSink>,
) -> Result<StoredFlag, FlagError> {
    let now = Utc::now();
    if household.member(&report.member_id).is_none() {
        return Err(FlagError::UnknownMember(report.member_id));
    }
    let (snapshot, exec_id) = resolve_target(dal, &report.target_ref)
        .ok_or_else(|| FlagError::UnknownTarget(report.target_ref.clone()))?;
    let class = snapshot.event.kind.data_class();
    let scope = scope_check(policy, class, Destination::Backend, now);
    let mut flag = StoredFlag {
        flag_id: uuid::Uuid::new_v4().to_string(),
        report,
        event_id: snapshot.event.event_id.clone(),
        exec_id,
        data_class: class,
        forwarded: false,
        created_at: now,
    };
    if let (true, Some(sink)) = (scope.permits(), sink) {
        let mut payload = IntakePayload::from_event(&snapshot.event);
        payload.flag = Some(crate::backend::FlagSummary {
            claim: flag.report.claim,
            direction: flag.report.direction,
        });
        if scope == ScopeDecision::AllowAnonymized {
            payload = anonymize(&payload, household, salt);
        }
        let record = IntakeRecord {
            data_class: class,
            payload,
            proof: Some(ConsentProof::from_policy(policy, class, now)),
            received_at: None,
        };
        match sink.send(record) {
            Ok(()) => flag.forwarded = true,
            Err(err) => tracing::warn!(%err, "flag not forwarded to back end"),
        }
    }
    dal.store()
        .put(FLAGS, &flag.flag_id, serde_json::to_vec(&flag).expect("flag serializes"))
        .map_err(|e| FlagError::Store(e.to_string()))?;
    Ok(flag)
}

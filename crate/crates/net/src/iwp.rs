//! The in-home proxy's orchestration layer: policy engine, data access
//! layer, notification hub, image guard and liveness monitor wired together.
//!
//! Everything here is synchronous; the proxy and HTTP API call in through
//! `spawn_blocking`.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use cfas_core::backend::{anonymize, ConsentProof, IntakePayload, IntakeRecord, IntakeSink};
use cfas_core::bundle::{BundleError, DetectorBundle};
use cfas_core::dal::{
    evidence_portions, job_class, AnalysisJob, AuditLog, Dal, DalConfig, DalError, ExecId, InterceptDecision,
    JobOutcome, Replacement, Submission,
};
use cfas_core::detectors::{applicable_kinds, ExternalApis};
use cfas_core::imageguard::{
    looks_protected, watermark, AudienceGroup, Directory, GuardError, ImageGuard, KeyService, TamperEntry,
    Unprotected, Watermark,
};
use cfas_core::model::{
    scope_check, ConsentRecord, CybersafetyLevel, DataClass, Destination, Household, OptionChange, PolicyEngine,
    PolicyError, PolicyState, Role, ScopeDecision,
};
use cfas_core::notify::{
    render, submit_flag, Audience, EvidenceAccess, FlagError, FlagReport, MessageKind, NotificationHub,
    PushChannel, PushMessage, StoredFlag, DEFAULT_QUEUE_CAPACITY,
};
use cfas_core::store::DocumentStore;
use cfas_core::{Direction, EventKind, MechanismKind, Timestamp, TrafficEvent};
use chrono::Utc;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::heartbeat::{HeartbeatMonitor, Liveness, Transition};

#[derive(Debug, thiserror::Error)]
pub enum IwpError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dal(#[from] DalError),
    #[error(transparent)]
    Flag(#[from] FlagError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
}

#[derive(Clone)]
pub struct IwpSettings {
    /// How long outbound and enforced traffic is held for a decision.
    pub hold_deadline: Duration,
    /// Household salt for anonymized identifiers; never leaves the IWP.
    pub salt: Vec<u8>,
    pub heartbeat_interval: chrono::Duration,
    pub heartbeat_missed: u32,
    pub threshold_overrides: BTreeMap<MechanismKind, f64>,
    pub external: ExternalApis,
    pub dal: DalConfig,
}

impl Default for IwpSettings {
    fn default() -> Self {
        Self {
            hold_deadline: Duration::from_millis(2000),
            salt: rand::random::<[u8; 16]>().to_vec(),
            heartbeat_interval: chrono::Duration::seconds(10),
            heartbeat_missed: 3,
            threshold_overrides: BTreeMap::new(),
            external: ExternalApis::default(),
            dal: DalConfig::default(),
        }
    }
}

/// Result of analyzing one event.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub jobs: Vec<AnalysisJob>,
    pub outcomes: Vec<JobOutcome>,
    pub decision: InterceptDecision,
    /// False when the hold deadline passed before every job finished, or
    /// when the event was analyzed in the background.
    pub complete: bool,
}

/// One intercept decision as applied by the proxy, for the gating audit.
#[derive(Debug, Clone, Serialize)]
pub struct AppliedDecision {
    pub at: Timestamp,
    pub event_id: String,
    pub kind: EventKind,
    pub cybersafety_level: CybersafetyLevel,
    pub decision: InterceptDecision,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvidenceItem {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvidenceView {
    pub exec_id: String,
    pub mechanism: MechanismKind,
    pub data_class: DataClass,
    pub items: Vec<EvidenceItem>,
}

pub struct Iwp {
    household: Household,
    policy: Arc<PolicyEngine>,
    dal: Arc<Dal>,
    hub: Arc<NotificationHub>,
    guard: ImageGuard,
    directory: Directory,
    settings: IwpSettings,
    intake: Option<mpsc::SyncSender<IntakeRecord>>,
    heartbeat: Mutex<HeartbeatMonitor>,
    applied: Mutex<Vec<AppliedDecision>>,
    tokens: RwLock<HashMap<String, String>>,
    decided_items: Mutex<HashMap<String, InterceptDecision>>,
    flag_sink: Option<Arc<dyn IntakeSink>>,
}

const DECIDED_ITEMS_LIMIT: usize = 100_000;

impl Iwp {
    pub fn new(
        household: Household,
        store: Arc<dyn DocumentStore>,
        bundle: &DetectorBundle,
        keys: Arc<dyn KeyService>,
        intake: Option<Arc<dyn IntakeSink>>,
        audit: Arc<AuditLog>,
        settings: IwpSettings,
    ) -> Result<Arc<Self>, IwpError> {
        let policy = Arc::new(PolicyEngine::open(household.clone(), store.clone())?);
        let set = Self::detector_set(bundle, &settings)?;
        let dal = Arc::new(Dal::new(store, set, audit, settings.dal.clone()));
        let hub = Arc::new(NotificationHub::new(DEFAULT_QUEUE_CAPACITY));
        {
            let (hub, policy, household) = (hub.clone(), policy.clone(), household.clone());
            let child_name = household.child().display_name.clone();
            dal.add_listener(Arc::new(move |o: &JobOutcome| {
                if o.decision.intents.is_empty() {
                    return;
                }
                let Ok(snapshot) = policy.snapshot() else {
                    tracing::error!("policy unreadable, notifications dropped");
                    return;
                };
                let now = Utc::now();
                let rendered: Vec<_> = o
                    .decision
                    .intents
                    .iter()
                    .flat_map(|i| render(i, &snapshot, &child_name, now))
                    .collect();
                hub.publish(&household, &rendered);
            }));
        }
        let flag_sink = intake.clone();
        let intake = intake.map(|sink| {
            let (tx, rx) = mpsc::sync_channel::<IntakeRecord>(1024);
            std::thread::Builder::new()
                .name("intake-sender".into())
                .spawn(move || {
                    for record in rx {
                        if let Err(err) = sink.send(record) {
                            tracing::warn!(%err, "intake record not delivered");
                        }
                    }
                })
                .expect("spawn intake sender");
            tx
        });
        let now = Utc::now();
        Ok(Arc::new(Self {
            directory: Directory::from_household(&household),
            heartbeat: Mutex::new(HeartbeatMonitor::new(
                settings.heartbeat_interval,
                settings.heartbeat_missed,
                now,
            )),
            household,
            policy,
            dal,
            hub,
            guard: ImageGuard::new(keys),
            settings,
            intake,
            applied: Mutex::new(Vec::new()),
            tokens: RwLock::new(HashMap::new()),
            decided_items: Mutex::new(HashMap::new()),
            flag_sink,
        }))
    }

    fn detector_set(bundle: &DetectorBundle, settings: &IwpSettings) -> Result<cfas_core::dal::DetectorSet, IwpError> {
        let mut set = bundle.detector_set(&settings.external)?;
        for (m, t) in &settings.threshold_overrides {
            set.thresholds.per_mechanism.insert(*m, *t);
        }
        Ok(set)
    }

    /// Swaps in a verified bundle; analyses already running keep the old set.
    pub fn install_bundle(&self, bundle: &DetectorBundle) -> Result<(), IwpError> {
        self.dal.install(Self::detector_set(bundle, &self.settings)?);
        Ok(())
    }

    pub fn detector_version(&self) -> String {
        self.dal.detectors().version().to_string()
    }

    pub fn household(&self) -> &Household {
        &self.household
    }

    pub fn child_id(&self) -> &str {
        &self.household.child().member_id
    }

    pub fn dal(&self) -> &Arc<Dal> {
        &self.dal
    }

    pub fn hub(&self) -> &Arc<NotificationHub> {
        &self.hub
    }

    pub fn settings(&self) -> &IwpSettings {
        &self.settings
    }

    pub fn policy(&self) -> Result<PolicyState, IwpError> {
        Ok(self.policy.snapshot()?)
    }

    /// Issues a bearer token for a household member.
    pub fn pair(&self, member_id: &str) -> Result<String, IwpError> {
        if self.household.member(member_id).is_none() {
            return Err(IwpError::NotFound(format!("member {member_id}")));
        }
        let token = hex::encode(rand::random::<[u8; 16]>());
        self.tokens.write().insert(token.clone(), member_id.to_string());
        Ok(token)
    }

    pub fn member_for_token(&self, token: &str) -> Option<String> {
        self.tokens.read().get(token).cloned()
    }

    pub fn role_of(&self, member_id: &str) -> Option<Role> {
        self.household.member(member_id).map(|m| m.role)
    }

    pub fn propose(&self, custodian_id: &str, change: OptionChange) -> Result<ConsentRecord, IwpError> {
        let (record, _) = self.policy.propose(custodian_id, change, Utc::now())?;
        let who = self
            .household
            .member(custodian_id)
            .map(|m| m.display_name.clone())
            .unwrap_or_default();
        let text = format!("{who} would like to change a safety setting. Please review it.");
        self.hub.push(
            self.child_id(),
            PushMessage::consent(Audience::Child, MessageKind::ConsentRequest, text, record.clone()),
        );
        Ok(record)
    }

    pub fn decide(&self, child_id: &str, record_id: &str, approve: bool) -> Result<PolicyState, IwpError> {
        let (state, _) = self.policy.decide(child_id, record_id, approve, Utc::now())?;
        let record = state.record(record_id).cloned().expect("decided record present");
        let child = &self.household.child().display_name;
        let text = if approve {
            format!("{child} approved your requested change.")
        } else {
            format!("{child} declined your requested change.")
        };
        for c in self.household.custodians() {
            self.hub.push(
                &c.member_id,
                PushMessage::consent(Audience::Custodian, MessageKind::ConsentDecided, text.clone(), record.clone()),
            );
        }
        Ok(state)
    }

    pub fn expire_consents(&self) -> Result<usize, IwpError> {
        Ok(self.policy.expire_consents(Utc::now())?)
    }

    /// How long traffic of `kind` should be held, or `None` to analyze in
    /// the background.
    pub fn hold_for(&self, kind: EventKind) -> Option<Duration> {
        if kind.direction() == Direction::Outbound {
            return Some(self.settings.hold_deadline);
        }
        let policy = self.policy.snapshot().ok()?;
        let cs = policy.effective_cybersafety(Utc::now());
        let enforced = cs.level == CybersafetyLevel::L2
            && MechanismKind::ALL.into_iter().any(|m| {
                applicable_kinds(m).contains(&kind) && cs.enabled_mechanisms.contains(&m) && cs.enforces(m)
            });
        enforced.then_some(self.settings.hold_deadline)
    }

    /// Submits one event; with `hold`, waits for the jobs up to that long.
    ///
    /// Missing results count as pass, except that a sensitive-image check
    /// still outstanding on an enforced upload blocks it.
    pub fn analyze(&self, event: TrafficEvent, image: Option<&[u8]>, hold: Option<Duration>) -> Result<Analysis, IwpError> {
        let policy = self.policy.snapshot()?;
        self.forward_intake(&event, &policy);
        let kind = event.kind;
        let sub = match hold {
            Some(_) => self.dal.submit(event, image, &policy)?,
            None => match self.dal.try_submit(event, image, &policy) {
                Err(DalError::Overloaded) => {
                    tracing::warn!(kind = kind.as_str(), "analysis queue full, unenforced analysis shed");
                    return Ok(Analysis {
                        jobs: Vec::new(),
                        outcomes: Vec::new(),
                        decision: InterceptDecision::Pass,
                        complete: false,
                    });
                }
                other => other?,
            },
        };
        let Some(deadline) = hold else {
            return Ok(Analysis {
                jobs: sub.jobs.clone(),
                outcomes: Vec::new(),
                decision: InterceptDecision::Pass,
                complete: false,
            });
        };
        let outcomes = sub.wait(deadline);
        let complete = outcomes.len() == sub.jobs.len();
        let mut decision = Submission::intercept(&outcomes);
        if !complete {
            let cs = policy.effective_cybersafety(Utc::now());
            let image_pending = sub.jobs.iter().any(|j| {
                j.mechanism == MechanismKind::SensitiveImage && !outcomes.iter().any(|o| o.job.exec_id == j.exec_id)
            });
            tracing::warn!(
                kind = kind.as_str(),
                finished = outcomes.len(),
                total = sub.jobs.len(),
                "hold deadline passed"
            );
            if kind == EventKind::ImageUpload && image_pending && cs.enforces(MechanismKind::SensitiveImage) {
                decision = decision.combine(InterceptDecision::Block {
                    mechanism: MechanismKind::SensitiveImage,
                });
            }
        }
        Ok(Analysis {
            jobs: sub.jobs,
            outcomes,
            decision,
            complete,
        })
    }

    fn forward_intake(&self, event: &TrafficEvent, policy: &PolicyState) {
        let Some(tx) = &self.intake else {
            return;
        };
        let now = Utc::now();
        let class = event.kind.data_class();
        let scope = scope_check(policy, class, Destination::Backend, now);
        if !scope.permits() {
            return;
        }
        let mut payload = IntakePayload::from_event(event);
        if scope == ScopeDecision::AllowAnonymized {
            payload = anonymize(&payload, &self.household, &self.settings.salt);
        }
        let record = IntakeRecord {
            data_class: class,
            payload,
            proof: Some(ConsentProof::from_policy(policy, class, now)),
            received_at: None,
        };
        if tx.try_send(record).is_err() {
            tracing::warn!("intake queue full, record dropped");
        }
    }

    /// Records an intercept decision the proxy applied.
    pub fn record_applied(&self, event: &TrafficEvent, decision: &InterceptDecision) {
        let level = self
            .policy
            .snapshot()
            .map(|p| p.effective_cybersafety(Utc::now()).level)
            .unwrap_or(CybersafetyLevel::L1);
        self.applied.lock().push(AppliedDecision {
            at: Utc::now(),
            event_id: event.event_id.clone(),
            kind: event.kind,
            cybersafety_level: level,
            decision: decision.clone(),
        });
    }

    pub fn applied_decisions(&self) -> Vec<AppliedDecision> {
        self.applied.lock().clone()
    }

    /// The decision applied to a platform item the last time it was shown.
    pub fn item_decision(&self, key: &str) -> Option<InterceptDecision> {
        self.decided_items.lock().get(key).cloned()
    }

    pub fn remember_item(&self, key: &str, decision: InterceptDecision) {
        let mut items = self.decided_items.lock();
        if items.len() >= DECIDED_ITEMS_LIMIT {
            items.clear();
        }
        items.insert(key.to_string(), decision);
    }

    pub fn cybersafety_level(&self) -> CybersafetyLevel {
        self.policy
            .snapshot()
            .map(|p| p.effective_cybersafety(Utc::now()).level)
            .unwrap_or(CybersafetyLevel::L1)
    }

    /// Produces the bytes to upload in place of `original`.
    pub fn transform_upload(
        &self,
        original: &[u8],
        with: Replacement,
        member_id: &str,
        audience: &[AudienceGroup],
    ) -> Result<Vec<u8>, GuardError> {
        match with {
            Replacement::WatermarkOnly => watermark(original, &Watermark::new(&self.household.household_id, member_id, Utc::now())),
            Replacement::ProtectImage => {
                let mut viewers = self.directory.resolve(audience);
                viewers.insert(member_id.to_string());
                Ok(self.guard.protect(original, viewers)?.cover_bytes)
            }
            Replacement::StaticNotice => Ok(cfas_core::imageguard::notice_image().to_vec()),
        }
    }

    /// Feed images carrying a protected payload are opened for the child
    /// when they are in the audience; others see the cover.
    pub fn open_feed_image(&self, served: &[u8]) -> Option<Vec<u8>> {
        if !looks_protected(served) {
            return None;
        }
        match self.guard.unprotect(served, self.child_id()) {
            Unprotected::Original(b) => Some(b),
            Unprotected::Cover(_) => None,
        }
    }

    pub fn tamper_log(&self) -> Vec<TamperEntry> {
        self.guard.tamper_log()
    }

    pub fn register_channel(&self, member_id: &str, channel: Arc<dyn PushChannel>) {
        self.hub.register(member_id, channel);
    }

    pub fn flag(&self, report: FlagReport) -> Result<StoredFlag, IwpError> {
        let policy = self.policy.snapshot()?;
        let sink = self.flag_sink.as_deref();
        Ok(submit_flag(report, &self.dal, &self.household, &policy, &self.settings.salt, sink)?)
    }

    pub fn child_dismissed(&self, exec_id: &str) {
        self.hub.child_dismissed(exec_id);
    }

    /// The evidence portions behind a custodian notification, if the
    /// current policy grants them to `viewer`.
    pub fn evidence(&self, viewer: &str, exec_id: &str) -> Result<EvidenceView, IwpError> {
        if self.role_of(viewer) != Some(Role::Custodian) {
            return Err(IwpError::Forbidden("evidence is for custodians".into()));
        }
        let exec = ExecId(exec_id.to_string());
        let view = self
            .dal
            .fetch_results(&exec)
            .map_err(|_| IwpError::NotFound(format!("exec id {exec_id}")))?;
        let (Some(result), Some(decision)) = (view.result, view.decision) else {
            return Err(IwpError::NotFound("no decided result".into()));
        };
        let policy = self.policy.snapshot()?;
        let now = Utc::now();
        let granted = decision
            .intents
            .iter()
            .filter(|i| i.audience == Audience::Custodian)
            .flat_map(|i| render(i, &policy, &self.household.child().display_name, now))
            .any(|r| r.evidence_access == EvidenceAccess::PortionsLink);
        if !granted {
            return Err(IwpError::Forbidden("policy does not grant evidence access".into()));
        }
        let snapshot = self.dal.snapshot_of(&exec)?;
        let items = if snapshot.window.is_empty() {
            let text = snapshot.event.text().unwrap_or_default();
            result
                .evidence
                .iter()
                .map(|e| EvidenceItem {
                    index: None,
                    from: None,
                    direction: None,
                    text: text.get(e.start..e.end).unwrap_or(&e.snippet).to_string(),
                })
                .collect()
        } else {
            evidence_portions(&snapshot.window, &result.evidence)
                .into_iter()
                .map(|(i, line)| EvidenceItem {
                    index: Some(i),
                    from: Some(line.from),
                    direction: Some(line.direction),
                    text: line.text,
                })
                .collect()
        };
        Ok(EvidenceView {
            exec_id: exec_id.to_string(),
            mechanism: view.job.mechanism,
            data_class: job_class(&view.job),
            items,
        })
    }

    pub fn heartbeat(&self, now: Timestamp) {
        let t = self.heartbeat.lock().beat(now);
        self.on_transition(t);
    }

    pub fn check_liveness(&self, now: Timestamp) -> Liveness {
        let t = self.heartbeat.lock().check(now);
        self.on_transition(t);
        self.heartbeat.lock().status()
    }

    pub fn liveness(&self) -> Liveness {
        self.heartbeat.lock().status()
    }

    fn on_transition(&self, t: Option<Transition>) {
        let child = &self.household.child().display_name;
        let text = match t {
            None => return,
            Some(Transition::WentUnresponsive) => {
                format!("{child}'s Guardian Avatar is not responding. It may have been switched off.")
            }
            Some(Transition::Recovered) => format!("{child}'s Guardian Avatar is responding again."),
        };
        for c in self.household.custodians() {
            self.hub.push(
                &c.member_id,
                PushMessage {
                    seq: 0,
                    recipient: Audience::Custodian,
                    text: text.clone(),
                    evidence_access: EvidenceAccess::None,
                    evidence_url: None,
                    kind: MessageKind::Incident,
                    exec_id: None,
                    record: None,
                },
            );
        }
    }
}

//! Back-end services: IWP registration, bundle distribution, consent-gated
//! intake, the image key vault and the delete-after fallback analysis.
//!
//! Transport-agnostic; the HTTP layer lives in the network crate.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use chrono::Utc;
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundle::{bump_version, sha256_hex, DetectorBundle};
use crate::dal::{AuditLog, Dal, DalConfig, DetectorSet, InterceptDecision, Submission};
use crate::detectors::{detect_pii, lexicon, Lexicon, RuleTables};
use crate::event::{EventKind, EventPayload, Platform, TrafficEvent};
use crate::imageguard::{KeyService, KeyServiceError};
use crate::model::{
    backend_scope, scope_check, BackendVisibility, DataClass, Destination, Household, PolicyState,
    ScopeDecision, Timestamp,
};
use crate::notify::{render, Audience, FlagClaim, FlagDirection};
use crate::store::{DocumentStore, MemoryStore, StoreError};

pub const INTAKE: &str = "intake";
pub const KEYS: &str = "keys";
pub const REGISTRATIONS: &str = "registrations";

const ANON_PREFIX: &str = "anon:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub claim: FlagClaim,
    pub direction: FlagDirection,
}

/// Transmittable view of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakePayload {
    pub kind: EventKind,
    pub platform: Platform,
    pub member_id: String,
    #[serde(default)]
    pub counterpart: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub flag: Option<FlagSummary>,
    #[serde(default)]
    pub anonymized: bool,
}

impl IntakePayload {
    pub fn from_event(event: &TrafficEvent) -> Self {
        Self {
            kind: event.kind,
            platform: event.platform,
            member_id: event.member_id.clone(),
            counterpart: event.counterpart().map(str::to_string),
            text: match &event.payload {
                EventPayload::Video { video_id } => Some(video_id.clone()),
                _ => event.text().map(str::to_string),
            },
            image_ref: event.image_ref().map(str::to_string),
            flag: None,
            anonymized: false,
        }
    }
}

/// What the IWP asserts about consent when sending data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsentProof {
    pub household_id: String,
    pub policy_version: u64,
    /// The effective back-end option at send time.
    pub backend: BackendVisibility,
    pub scope: ScopeDecision,
    pub issued_at: Timestamp,
}

impl ConsentProof {
    pub fn from_policy(policy: &PolicyState, class: DataClass, now: Timestamp) -> Self {
        Self {
            household_id: policy.household_id.clone(),
            policy_version: policy.version,
            backend: policy.effective_backend(now),
            scope: scope_check(policy, class, Destination::Backend, now),
            issued_at: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakeRecord {
    pub data_class: DataClass,
    pub payload: IntakePayload,
    #[serde(default)]
    pub proof: Option<ConsentProof>,
    #[serde(default)]
    pub received_at: Option<Timestamp>,
}

/// Where the IWP sends consented data.
pub trait IntakeSink: Send + Sync {
    fn send(&self, record: IntakeRecord) -> Result<(), String>;
}

fn hash_id(salt: &[u8], id: &str) -> String {
    if id.starts_with(ANON_PREFIX) {
        return id.to_string();
    }
    let mut h = Sha256::new();
    h.update(salt);
    h.update(id.as_bytes());
    format!("{ANON_PREFIX}{}", &hex::encode(h.finalize())[..16])
}

fn redact_text(text: &str, names: &[String]) -> String {
    let mut out = text.to_string();
    let mut findings = detect_pii(&out);
    findings.sort_by_key(|f| std::cmp::Reverse(f.start));
    for f in findings {
        out.replace_range(f.start..f.end, &f.category.placeholder());
    }
    for name in names.iter().filter(|n| !n.trim().is_empty()) {
        let re = Regex::new(&format!(r"(?i)\b{}\b", regex::escape(name))).expect("escaped name");
        out = re.replace_all(&out, "[NAME]").into_owned();
    }
    out
}

/// Replaces member identifiers by salted hashes, roster names by `[NAME]`
/// and PII by category placeholders. Deterministic per salt and idempotent.
pub fn anonymize(payload: &IntakePayload, household: &Household, salt: &[u8]) -> IntakePayload {
    let mut names: Vec<String> = household
        .members
        .iter()
        .flat_map(|m| [m.display_name.clone(), m.member_id.clone()])
        .collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    anonymize_with(payload, &names, salt)
}

fn anonymize_with(payload: &IntakePayload, names: &[String], salt: &[u8]) -> IntakePayload {
    IntakePayload {
        member_id: hash_id(salt, &payload.member_id),
        counterpart: payload.counterpart.as_deref().map(|c| hash_id(salt, c)),
        text: payload.text.as_deref().map(|t| redact_text(t, names)),
        anonymized: true,
        ..payload.clone()
    }
}

/// True when ids are hashed and no PII remains in the text.
pub fn is_anonymized(payload: &IntakePayload) -> bool {
    payload.member_id.starts_with(ANON_PREFIX)
        && payload
            .counterpart
            .as_deref()
            .is_none_or(|c| c.starts_with(ANON_PREFIX))
        && payload.text.as_deref().is_none_or(|t| detect_pii(t).is_empty())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("unknown or already used enrollment code")]
    BadEnrollment,
    #[error("not registered")]
    Unregistered,
    #[error("not authorized to publish")]
    Unauthorized,
    #[error("intake rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bundle: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IwpRegistration {
    pub iwp_id: String,
    pub household_id: String,
    /// SHA-256 of the bearer token issued at enrollment.
    pub token_hash: String,
    pub last_seen: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakeAudit {
    pub at: Timestamp,
    pub iwp_id: String,
    pub data_class: DataClass,
    pub outcome: String,
}

#[derive(Debug, Clone)]
pub struct PublishedBundle {
    pub version: String,
    pub sha256: String,
    pub zip: Arc<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub enum SyncResponse {
    NotModified,
    Bundle(PublishedBundle),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeyEntry {
    key_ref: String,
    audience: BTreeSet<String>,
    sealed: String,
}

/// Image keys sealed at rest under a master key.
pub struct KeyVault {
    store: Arc<dyn DocumentStore>,
    master: [u8; 32],
    lock: Mutex<()>,
}

impl KeyVault {
    pub fn new(store: Arc<dyn DocumentStore>, master: [u8; 32]) -> Self {
        Self {
            store,
            master,
            lock: Mutex::new(()),
        }
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.master))
    }

    fn entries(&self, fp: &str) -> Result<Vec<KeyEntry>, KeyServiceError> {
        match self.store.get(KEYS, fp) {
            Ok(Some(doc)) => serde_json::from_slice(&doc.body)
                .map_err(|e| KeyServiceError::Unavailable(e.to_string())),
            Ok(None) => Ok(Vec::new()),
            Err(e) => Err(KeyServiceError::Unavailable(e.to_string())),
        }
    }
}

impl KeyService for KeyVault {
    fn register(&self, image_fp: &str, audience: &BTreeSet<String>, key: &[u8; 32]) -> Result<String, KeyServiceError> {
        if image_fp.len() != 64 || !image_fp.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(KeyServiceError::Rejected("image_fp must be 64 hex chars".into()));
        }
        let mut nonce = [0u8; 12];
        rand::thread_rng().fill_bytes(&mut nonce);
        let ct = self
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), key.as_slice())
            .map_err(|_| KeyServiceError::Unavailable("seal failed".into()))?;
        let mut sealed = nonce.to_vec();
        sealed.extend(ct);
        let _guard = self.lock.lock();
        let mut entries = self.entries(image_fp)?;
        let key_ref = format!("{image_fp}:{}", entries.len() + 1);
        entries.push(KeyEntry {
            key_ref: key_ref.clone(),
            audience: audience.clone(),
            sealed: hex::encode(sealed),
        });
        self.store
            .put(KEYS, image_fp, serde_json::to_vec(&entries).expect("keys serialize"))
            .map_err(|e| KeyServiceError::Unavailable(e.to_string()))?;
        Ok(key_ref)
    }

    fn fetch(&self, image_fp: &str, viewer: &str) -> Result<Vec<[u8; 32]>, KeyServiceError> {
        let mut out = Vec::new();
        for e in self.entries(image_fp)? {
            if !e.audience.contains(viewer) {
                continue;
            }
            let sealed = hex::decode(&e.sealed).map_err(|e| KeyServiceError::Unavailable(e.to_string()))?;
            if sealed.len() < 12 {
                continue;
            }
            let (nonce, ct) = sealed.split_at(12);
            let key = self
                .cipher()
                .decrypt(Nonce::from_slice(nonce), ct)
                .map_err(|_| KeyServiceError::Unavailable("key unseal failed".into()))?;
            if let Ok(k) = <[u8; 32]>::try_from(key.as_slice()) {
                out.push(k);
            }
        }
        Ok(out)
    }
}

/// Fallback request from an add-on whose IWP is unreachable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FallbackRequest {
    pub event: TrafficEvent,
    pub policy: PolicyState,
    pub child_name: String,
    #[serde(default, with = "opt_hex")]
    pub image: Option<Vec<u8>>,
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackResponse {
    pub triggered: bool,
    pub decision: InterceptDecision,
    pub child_notifications: Vec<String>,
}

impl FallbackResponse {
    fn safe() -> Self {
        Self {
            triggered: false,
            decision: InterceptDecision::Pass,
            child_notifications: vec![
                "I couldn't check this right now. Take care with what you share.".into(),
            ],
        }
    }
}

static STOPWORDS: LazyLock<HashSet<String>> = LazyLock::new(|| {
    include_str!("../data/rules/stopwords.txt")
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
});

pub const RETRAIN_MIN_COUNT: usize = 3;

/// Frequency-rule update of the insult lexicon from flagged intake.
///
/// A term in at least three missed-detection flags joins
/// `bullying_insults.tsv`; an existing term in at least three
/// wrong-detection flags has its weight halved. Each term counts once per
/// flag. The version is always bumped.
pub fn retrain_stub(current: &DetectorBundle, corpus: &[IntakeRecord]) -> Result<DetectorBundle, BackendError> {
    const TABLE: &str = "bullying_insults.tsv";
    let mut insults: Lexicon = current
        .tables
        .lexicon(TABLE)
        .map_err(|e| BackendError::Bundle(e.to_string()))?;
    let mut missed: BTreeMap<String, usize> = BTreeMap::new();
    let mut wrong: BTreeMap<String, usize> = BTreeMap::new();
    for rec in corpus {
        let (Some(flag), Some(text)) = (&rec.payload.flag, &rec.payload.text) else {
            continue;
        };
        let terms: BTreeSet<String> = lexicon::tokens(text)
            .into_iter()
            .filter(|t| t.chars().count() >= 3 && !STOPWORDS.contains(t) && !t.starts_with("anon"))
            .collect();
        let counts = match flag.direction {
            FlagDirection::MissedDetection => &mut missed,
            FlagDirection::WrongDetection => &mut wrong,
        };
        for t in terms {
            *counts.entry(t).or_default() += 1;
        }
    }
    for (term, n) in &missed {
        if *n >= RETRAIN_MIN_COUNT && !insults.contains(term) {
            insults.insert(term, 1.0);
        }
    }
    for (term, n) in &wrong {
        if *n >= RETRAIN_MIN_COUNT {
            if let Some(w) = insults.weight(term) {
                insults.insert(term, w / 2.0);
            }
        }
    }
    let mut tables: RuleTables = current.tables.clone();
    tables.set(TABLE, insults.to_tsv());
    Ok(DetectorBundle::new(&bump_version(&current.version), tables))
}

pub struct BackendConfig {
    pub publisher_token: String,
    pub master_key: [u8; 32],
    pub fallback_wait: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            publisher_token: hex::encode(rand::random::<[u8; 16]>()),
            master_key: rand::random(),
            fallback_wait: Duration::from_secs(30),
        }
    }
}

pub struct Backend {
    store: Arc<dyn DocumentStore>,
    config: BackendConfig,
    codes: Mutex<HashMap<String, String>>,
    registrations: RwLock<HashMap<String, IwpRegistration>>,
    latest: RwLock<Option<(DetectorBundle, PublishedBundle)>>,
    vault: Arc<KeyVault>,
    fallback_store: Arc<MemoryStore>,
    fallback: Dal,
    audit: Mutex<Vec<IntakeAudit>>,
}

fn token_hash(token: &str) -> String {
    sha256_hex(token.as_bytes())
}

impl Backend {
    pub fn new(store: Arc<dyn DocumentStore>, config: BackendConfig, initial: DetectorBundle) -> Result<Self, BackendError> {
        let set = initial
            .detector_set(&Default::default())
            .map_err(|e| BackendError::Bundle(e.to_string()))?;
        let fallback_store = Arc::new(MemoryStore::new());
        let fallback = Dal::new(
            fallback_store.clone(),
            set,
            Arc::new(AuditLog::memory()),
            DalConfig {
                workers: 2,
                ..DalConfig::default()
            },
        );
        let mut registrations = HashMap::new();
        for key in store.keys(REGISTRATIONS)? {
            if let Some(doc) = store.get(REGISTRATIONS, &key)? {
                if let Ok(r) = serde_json::from_slice::<IwpRegistration>(&doc.body) {
                    registrations.insert(r.token_hash.clone(), r);
                }
            }
        }
        let vault = Arc::new(KeyVault::new(store.clone(), config.master_key));
        let backend = Self {
            store,
            config,
            codes: Mutex::new(HashMap::new()),
            registrations: RwLock::new(registrations),
            latest: RwLock::new(None),
            vault,
            fallback_store,
            fallback,
            audit: Mutex::new(Vec::new()),
        };
        backend.install_bundle(initial);
        Ok(backend)
    }

    pub fn store(&self) -> &Arc<dyn DocumentStore> {
        &self.store
    }

    pub fn fallback_store(&self) -> &Arc<MemoryStore> {
        &self.fallback_store
    }

    pub fn key_vault(&self) -> Arc<KeyVault> {
        self.vault.clone()
    }

    pub fn publisher_token(&self) -> &str {
        &self.config.publisher_token
    }

    /// One-time enrollment code bound to a household.
    pub fn issue_enrollment_code(&self, household_id: &str) -> String {
        let code = format!("{:06}", rand::random::<u32>() % 1_000_000);
        let code = format!("{code}-{}", &hex::encode(rand::random::<[u8; 4]>()));
        self.codes.lock().insert(code.clone(), household_id.to_string());
        code
    }

    /// Consumes `code` and returns the IWP's bearer token.
    pub fn register(&self, code: &str, iwp_id: &str) -> Result<String, BackendError> {
        let household_id = self.codes.lock().remove(code).ok_or(BackendError::BadEnrollment)?;
        let token = hex::encode(rand::random::<[u8; 24]>());
        let reg = IwpRegistration {
            iwp_id: iwp_id.to_string(),
            household_id,
            token_hash: token_hash(&token),
            last_seen: Utc::now(),
        };
        self.store.put(
            REGISTRATIONS,
            iwp_id,
            serde_json::to_vec(&reg).expect("registration serializes"),
        )?;
        self.registrations.write().insert(reg.token_hash.clone(), reg);
        Ok(token)
    }

    pub fn authenticate(&self, token: &str) -> Result<IwpRegistration, BackendError> {
        let mut regs = self.registrations.write();
        let reg = regs.get_mut(&token_hash(token)).ok_or(BackendError::Unregistered)?;
        reg.last_seen = Utc::now();
        Ok(reg.clone())
    }

    fn install_bundle(&self, bundle: DetectorBundle) -> PublishedBundle {
        let zip = bundle.to_zip();
        let published = PublishedBundle {
            version: bundle.version.clone(),
            sha256: sha256_hex(&zip),
            zip: Arc::new(zip),
        };
        *self.latest.write() = Some((bundle, published.clone()));
        published
    }

    pub fn publish_bundle(&self, publisher_token: &str, bundle: DetectorBundle) -> Result<String, BackendError> {
        if publisher_token != self.config.publisher_token {
            return Err(BackendError::Unauthorized);
        }
        bundle
            .detector_set(&Default::default())
            .map_err(|e| BackendError::Bundle(e.to_string()))?;
        let published = self.install_bundle(bundle);
        tracing::info!(version = %published.version, sha256 = %published.sha256, "bundle published");
        Ok(published.version)
    }

    pub fn latest_bundle(&self) -> DetectorBundle {
        self.latest.read().as_ref().expect("a bundle is installed").0.clone()
    }

    pub fn sync_bundles(&self, token: &str, have_version: Option<&str>) -> Result<SyncResponse, BackendError> {
        self.authenticate(token)?;
        let latest = self.latest.read();
        let (_, published) = latest.as_ref().expect("a bundle is installed");
        if have_version == Some(published.version.as_str()) {
            return Ok(SyncResponse::NotModified);
        }
        Ok(SyncResponse::Bundle(published.clone()))
    }

    fn audit_intake(&self, iwp_id: &str, class: DataClass, outcome: &str) {
        tracing::info!(iwp_id, ?class, outcome, "intake");
        self.audit.lock().push(IntakeAudit {
            at: Utc::now(),
            iwp_id: iwp_id.to_string(),
            data_class: class,
            outcome: outcome.to_string(),
        });
    }

    pub fn intake_audit(&self) -> Vec<IntakeAudit> {
        self.audit.lock().clone()
    }

    /// Stores `record` only under a valid consent proof. The scope is
    /// recomputed from the proof's back-end option rather than trusted.
    pub fn intake(&self, token: &str, mut record: IntakeRecord) -> Result<String, BackendError> {
        let reg = self.authenticate(token)?;
        let now = Utc::now();
        let reject = |why: &str| {
            self.audit_intake(&reg.iwp_id, record.data_class, &format!("rejected: {why}"));
            Err(BackendError::Rejected(why.to_string()))
        };
        let Some(proof) = record.proof.clone() else {
            return reject("missing consent proof");
        };
        if proof.household_id != reg.household_id {
            return reject("proof is for another household");
        }
        if proof.backend.expires_at.is_some_and(|e| e <= now) {
            return reject("consent expired");
        }
        if record.payload.kind.data_class() != record.data_class {
            return reject("data class does not match payload");
        }
        let scope = backend_scope(&proof.backend, record.data_class);
        if scope != proof.scope {
            return reject("scope does not match the consented option");
        }
        match scope {
            ScopeDecision::Deny => return reject("back-end visibility does not cover this data"),
            ScopeDecision::AllowAnonymized => {
                if !record.payload.anonymized || !is_anonymized(&record.payload) {
                    let salt = sha256_hex(format!("{}:{}", reg.household_id, self.config.publisher_token).as_bytes());
                    record.payload = anonymize_with(&record.payload, &[], salt.as_bytes());
                }
                if !is_anonymized(&record.payload) {
                    return reject("anonymization could not be verified");
                }
            }
            ScopeDecision::Allow => {}
        }
        record.received_at = Some(now);
        let id = uuid::Uuid::new_v4().to_string();
        let key = format!("{}/{id}", reg.household_id);
        self.store
            .insert(INTAKE, &key, serde_json::to_vec(&record).expect("intake serializes"))?;
        self.audit_intake(&reg.iwp_id, record.data_class, "stored");
        Ok(id)
    }

    pub fn intake_records(&self, household_id: Option<&str>) -> Result<Vec<IntakeRecord>, BackendError> {
        let mut out = Vec::new();
        for key in self.store.keys(INTAKE)? {
            if household_id.is_some_and(|h| !key.starts_with(&format!("{h}/"))) {
                continue;
            }
            if let Some(doc) = self.store.get(INTAKE, &key)? {
                if let Ok(r) = serde_json::from_slice(&doc.body) {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    /// Custodian-initiated removal of all intake for the caller's household.
    pub fn delete_intake(&self, token: &str) -> Result<usize, BackendError> {
        let reg = self.authenticate(token)?;
        let prefix = format!("{}/", reg.household_id);
        let mut n = 0;
        for key in self.store.keys(INTAKE)? {
            if key.starts_with(&prefix) && self.store.delete(INTAKE, &key)? {
                n += 1;
            }
        }
        Ok(n)
    }

    /// Runs the event through the back end's own data access layer and
    /// deletes every artifact before returning, detection or not.
    pub fn fallback_analyze(&self, token: &str, req: FallbackRequest) -> Result<FallbackResponse, BackendError> {
        self.authenticate(token)?;
        let event = req.event.clone();
        let now = Utc::now();
        let response = match self.fallback.submit_at(req.event, req.image.as_deref(), &req.policy, now) {
            Ok(sub) => self.fallback_response(&sub, &req.policy, &req.child_name),
            Err(err) => {
                tracing::warn!(%err, "fallback analysis failed");
                FallbackResponse::safe()
            }
        };
        if let Err(err) = self.fallback.purge_event(&event) {
            tracing::error!(%err, "fallback purge failed");
        }
        Ok(response)
    }

    fn fallback_response(&self, sub: &Submission, policy: &PolicyState, child_name: &str) -> FallbackResponse {
        let outcomes = sub.wait(self.config.fallback_wait);
        if outcomes.len() < sub.jobs.len() {
            return FallbackResponse::safe();
        }
        let now = Utc::now();
        let mut texts = Vec::new();
        for o in &outcomes {
            for intent in o.decision.intents.iter().filter(|i| i.audience == Audience::Child) {
                texts.extend(render(intent, policy, child_name, now).into_iter().map(|r| r.text));
            }
        }
        FallbackResponse {
            triggered: outcomes.iter().any(|o| o.decision.triggered),
            decision: Submission::intercept(&outcomes),
            child_notifications: texts,
        }
    }

    /// Adopts a newly published bundle for the fallback path.
    pub fn refresh_fallback(&self) -> Result<(), BackendError> {
        let set: DetectorSet = self
            .latest_bundle()
            .detector_set(&Default::default())
            .map_err(|e| BackendError::Bundle(e.to_string()))?;
        self.fallback.install(set);
        Ok(())
    }
}

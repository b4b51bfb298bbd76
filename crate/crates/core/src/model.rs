//! Household roster, visibility and cybersafety options, and the consent
//! state machine.
//!
//! Every option change is a [`ConsentRecord`] proposed by a custodian and
//! decided by the child. An option is only ever applied by an approval, and
//! an approved option lapses 183 days after the decision, reverting to the
//! most restrictive default.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{DocumentStore, StoreError};

pub type Timestamp = DateTime<Utc>;

/// Fixed consent lifetime ("six months").
pub const CONSENT_LIFETIME_DAYS: i64 = 183;

pub const POLICY_SCHEMA: &str = "policy.v1";

const POLICY_COLLECTION: &str = "policy";

pub fn consent_lifetime() -> Duration {
    Duration::days(CONSENT_LIFETIME_DAYS)
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("member `{0}` is not part of the household")]
    UnknownMember(String),
    #[error("member `{0}` is not a custodian")]
    NotCustodian(String),
    #[error("member `{0}` is not the child")]
    NotChild(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("unknown consent record `{0}`")]
    UnknownRecord(String),
    #[error("consent record is {0:?}, not pending")]
    NotPending(ConsentState),
    #[error("consent record expired")]
    Expired,
    #[error("invalid household: {0}")]
    InvalidHousehold(String),
    #[error("policy version conflict: expected {expected}, found {found}")]
    VersionConflict { expected: u64, found: u64 },
    #[error("policy store: {0}")]
    Store(String),
}

impl From<StoreError> for PolicyError {
    fn from(err: StoreError) -> Self {
        match err {
            StoreError::VersionConflict { expected, found } => PolicyError::VersionConflict {
                expected: expected.unwrap_or(0),
                found: found.unwrap_or(0),
            },
            other => PolicyError::Store(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Child,
    Custodian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HouseholdMember {
    pub member_id: String,
    pub role: Role,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avatar_choice: Option<String>,
    /// Audience groups this member belongs to (family, friends, ...).
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub groups: BTreeSet<String>,
}

impl HouseholdMember {
    pub fn child(id: &str, name: &str, avatar: &str) -> Self {
        Self {
            member_id: id.to_string(),
            role: Role::Child,
            display_name: name.to_string(),
            avatar_choice: Some(avatar.to_string()),
            groups: BTreeSet::new(),
        }
    }

    pub fn custodian(id: &str, name: &str) -> Self {
        Self {
            member_id: id.to_string(),
            role: Role::Custodian,
            display_name: name.to_string(),
            avatar_choice: None,
            groups: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Household {
    pub household_id: String,
    pub members: Vec<HouseholdMember>,
}

impl Household {
    pub fn new(household_id: &str, members: Vec<HouseholdMember>) -> Result<Self, PolicyError> {
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(m.member_id.as_str()) {
                return Err(PolicyError::InvalidHousehold(format!(
                    "duplicate member id `{}`",
                    m.member_id
                )));
            }
            if m.role == Role::Custodian && m.avatar_choice.is_some() {
                return Err(PolicyError::InvalidHousehold(
                    "only the child chooses an avatar".into(),
                ));
            }
        }
        if !members.iter().any(|m| m.role == Role::Child) {
            return Err(PolicyError::InvalidHousehold("no child member".into()));
        }
        if !members.iter().any(|m| m.role == Role::Custodian) {
            return Err(PolicyError::InvalidHousehold("no custodian member".into()));
        }
        Ok(Self {
            household_id: household_id.to_string(),
            members,
        })
    }

    pub fn member(&self, member_id: &str) -> Option<&HouseholdMember> {
        self.members.iter().find(|m| m.member_id == member_id)
    }

    /// The protected child (one child profile per add-on instance).
    pub fn child(&self) -> &HouseholdMember {
        self.members
            .iter()
            .find(|m| m.role == Role::Child)
            .expect("household invariant: at least one child")
    }

    pub fn custodians(&self) -> impl Iterator<Item = &HouseholdMember> {
        self.members.iter().filter(|m| m.role == Role::Custodian)
    }

    fn require_role(&self, member_id: &str, role: Role) -> Result<(), PolicyError> {
        let member = self
            .member(member_id)
            .ok_or_else(|| PolicyError::UnknownMember(member_id.to_string()))?;
        if member.role != role {
            return Err(match role {
                Role::Custodian => PolicyError::NotCustodian(member_id.to_string()),
                Role::Child => PolicyError::NotChild(member_id.to_string()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VisibilityLevel {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CybersafetyLevel {
    L1,
    L2,
}

/// Data the custodian may opt into at parental level 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentalSelection {
    TwitterProfiles,
    YoutubeVideos,
    FbWall,
    FbPhotos,
    FbFriends,
}

impl ParentalSelection {
    pub const ALL: [ParentalSelection; 5] = [
        Self::TwitterProfiles,
        Self::YoutubeVideos,
        Self::FbWall,
        Self::FbPhotos,
        Self::FbFriends,
    ];

    pub fn data_class(self) -> DataClass {
        match self {
            Self::TwitterProfiles => DataClass::TwitterProfiles,
            Self::YoutubeVideos => DataClass::YoutubeVideos,
            Self::FbWall => DataClass::Wall,
            Self::FbPhotos => DataClass::Photos,
            Self::FbFriends => DataClass::Friends,
        }
    }
}

/// Data classes that may leave the home at back-end level 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSelection {
    ChildWall,
    FriendsWall,
    FriendsProfiles,
}

impl BackendSelection {
    pub const ALL: [BackendSelection; 3] =
        [Self::ChildWall, Self::FriendsWall, Self::FriendsProfiles];

    pub fn data_class(self) -> DataClass {
        match self {
            Self::ChildWall => DataClass::Wall,
            Self::FriendsWall => DataClass::FriendsWall,
            Self::FriendsProfiles => DataClass::Friends,
        }
    }
}

/// Class of OSN data, used for every visibility decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    Chat,
    Wall,
    FriendsWall,
    Photos,
    Friends,
    TwitterProfiles,
    YoutubeVideos,
}

impl DataClass {
    pub const ALL: [DataClass; 7] = [
        Self::Chat,
        Self::Wall,
        Self::FriendsWall,
        Self::Photos,
        Self::Friends,
        Self::TwitterProfiles,
        Self::YoutubeVideos,
    ];

    /// Noun used in "Click here to see the suspicious ..." links.
    pub fn noun(self) -> &'static str {
        match self {
            Self::Chat => "chat",
            Self::Wall | Self::FriendsWall => "post",
            Self::Photos => "photo",
            Self::Friends | Self::TwitterProfiles => "profile",
            Self::YoutubeVideos => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Grooming,
    Cyberbullying,
    Distress,
    FakeActivity,
    PiiExposure,
    HatefulMeme,
    DisturbingVideo,
    SensitiveImage,
    AbusiveAccount,
    BotAccount,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 10] = [
        Self::Grooming,
        Self::Cyberbullying,
        Self::Distress,
        Self::FakeActivity,
        Self::PiiExposure,
        Self::HatefulMeme,
        Self::DisturbingVideo,
        Self::SensitiveImage,
        Self::AbusiveAccount,
        Self::BotAccount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Grooming => "grooming",
            Self::Cyberbullying => "cyberbullying",
            Self::Distress => "distress",
            Self::FakeActivity => "fake_activity",
            Self::PiiExposure => "pii_exposure",
            Self::HatefulMeme => "hateful_meme",
            Self::DisturbingVideo => "disturbing_video",
            Self::SensitiveImage => "sensitive_image",
            Self::AbusiveAccount => "abusive_account",
            Self::BotAccount => "bot_account",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentalVisibility {
    pub level: VisibilityLevel,
    #[serde(default)]
    pub l2_selections: BTreeSet<ParentalSelection>,
    pub set_at: Option<Timestamp>,
    pub expires_at: Option<Timestamp>,
}

impl Default for ParentalVisibility {
    fn default() -> Self {
        Self {
            level: VisibilityLevel::L1,
            l2_selections: BTreeSet::new(),
            set_at: None,
            expires_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendVisibility {
    pub level: VisibilityLevel,
    #[serde(default)]
    pub l2_selections: BTreeSet<BackendSelection>,
    pub anonymize: bool,
    pub set_at: Option<Timestamp>,
    pub expires_at: Option<Timestamp>,
}

impl Default for BackendVisibility {
    fn default() -> Self {
        Self {
            level: VisibilityLevel::L1,
            l2_selections: BTreeSet::new(),
            anonymize: false,
            set_at: None,
            expires_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CybersafetyConfig {
    pub level: CybersafetyLevel,
    pub enabled_mechanisms: BTreeSet<MechanismKind>,
    #[serde(default)]
    pub enforce_mechanisms: BTreeSet<MechanismKind>,
    pub set_at: Option<Timestamp>,
    pub expires_at: Option<Timestamp>,
}

impl Default for CybersafetyConfig {
    /// Notify-only with every mechanism's notifications enabled.
    fn default() -> Self {
        Self {
            level: CybersafetyLevel::L1,
            enabled_mechanisms: MechanismKind::ALL.into_iter().collect(),
            enforce_mechanisms: BTreeSet::new(),
            set_at: None,
            expires_at: None,
        }
    }
}

impl CybersafetyConfig {
    pub fn enforces(&self, mechanism: MechanismKind) -> bool {
        self.level == CybersafetyLevel::L2 && self.enforce_mechanisms.contains(&mechanism)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Parental,
    Backend,
    Cybersafety,
}

/// A proposed value for one of the three option groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "option", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptionChange {
    Parental {
        level: VisibilityLevel,
        #[serde(default)]
        selections: BTreeSet<ParentalSelection>,
    },
    Backend {
        level: VisibilityLevel,
        #[serde(default)]
        selections: BTreeSet<BackendSelection>,
        #[serde(default)]
        anonymize: bool,
    },
    Cybersafety {
        level: CybersafetyLevel,
        enabled: BTreeSet<MechanismKind>,
        #[serde(default)]
        enforce: BTreeSet<MechanismKind>,
    },
}

impl OptionChange {
    pub fn kind(&self) -> OptionKind {
        match self {
            Self::Parental { .. } => OptionKind::Parental,
            Self::Backend { .. } => OptionKind::Backend,
            Self::Cybersafety { .. } => OptionKind::Cybersafety,
        }
    }

    /// The option shown to a freshly enrolled household: parental level 3.
    pub fn initial_parental_proposal() -> Self {
        Self::Parental {
            level: VisibilityLevel::L3,
            selections: BTreeSet::new(),
        }
    }

    /// Checks structural rules and returns the canonical form.
    pub fn validate(&self) -> Result<OptionChange, PolicyError> {
        match self {
            Self::Parental { level, selections } => {
                let selections = match level {
                    VisibilityLevel::L1 if !selections.is_empty() => {
                        return Err(PolicyError::InvalidOption(
                            "parental level 1 takes no selections".into(),
                        ))
                    }
                    VisibilityLevel::L2 if selections.is_empty() => {
                        return Err(PolicyError::InvalidOption(
                            "parental level 2 needs at least one selection".into(),
                        ))
                    }
                    VisibilityLevel::L2 => selections.clone(),
                    // L3 covers every level-2 class plus chat.
                    _ => BTreeSet::new(),
                };
                Ok(Self::Parental {
                    level: *level,
                    selections,
                })
            }
            Self::Backend {
                level,
                selections,
                anonymize,
            } => {
                let (selections, anonymize) = match level {
                    VisibilityLevel::L1 if !selections.is_empty() => {
                        return Err(PolicyError::InvalidOption(
                            "back-end level 1 takes no selections".into(),
                        ))
                    }
                    VisibilityLevel::L1 => (BTreeSet::new(), false),
                    VisibilityLevel::L2 if selections.is_empty() => {
                        return Err(PolicyError::InvalidOption(
                            "back-end level 2 needs at least one selection".into(),
                        ))
                    }
                    VisibilityLevel::L2 => (selections.clone(), *anonymize),
                    VisibilityLevel::L3 => (BTreeSet::new(), *anonymize),
                };
                Ok(Self::Backend {
                    level: *level,
                    selections,
                    anonymize,
                })
            }
            Self::Cybersafety {
                level,
                enabled,
                enforce,
            } => {
                if !enforce.is_subset(enabled) {
                    return Err(PolicyError::InvalidOption(
                        "enforced mechanisms must also be enabled".into(),
                    ));
                }
                match level {
                    CybersafetyLevel::L1 if !enforce.is_empty() => Err(PolicyError::InvalidOption(
                        "cybersafety level 1 never enforces".into(),
                    )),
                    CybersafetyLevel::L2 if enforce.is_empty() => Err(PolicyError::InvalidOption(
                        "cybersafety level 2 needs at least one enforced mechanism".into(),
                    )),
                    _ => Ok(self.clone()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentState {
    Pending,
    Approved,
    Rejected,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub record_id: String,
    pub option: OptionChange,
    pub proposed_by: String,
    pub proposed_at: Timestamp,
    pub state: ConsentState,
    pub decided_at: Option<Timestamp>,
    /// Pending: proposal lapses at this time. Approved: the option lapses.
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Custodian,
    Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeDecision {
    Deny,
    AllowAnonymized,
    Allow,
}

impl ScopeDecision {
    pub fn permits(self) -> bool {
        self != ScopeDecision::Deny
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyState {
    pub schema: String,
    pub household_id: String,
    pub parental: ParentalVisibility,
    pub backend: BackendVisibility,
    pub cybersafety: CybersafetyConfig,
    pub consents: Vec<ConsentRecord>,
    pub version: u64,
}

impl PolicyState {
    pub fn new(household_id: &str) -> Self {
        Self {
            schema: POLICY_SCHEMA.to_string(),
            household_id: household_id.to_string(),
            parental: ParentalVisibility::default(),
            backend: BackendVisibility::default(),
            cybersafety: CybersafetyConfig::default(),
            consents: Vec::new(),
            version: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, PolicyError> {
        let state: PolicyState =
            serde_json::from_str(raw).map_err(|e| PolicyError::Store(e.to_string()))?;
        if state.schema != POLICY_SCHEMA {
            return Err(PolicyError::Store(format!(
                "unsupported policy schema `{}`",
                state.schema
            )));
        }
        Ok(state)
    }

    /// Fresh state with each change proposed by the first custodian and
    /// approved by the child at `now`.
    pub fn with_approved(
        household: &Household,
        changes: impl IntoIterator<Item = OptionChange>,
        now: Timestamp,
    ) -> Result<Self, PolicyError> {
        let mut state = Self::new(&household.household_id);
        let custodian = household
            .custodians()
            .next()
            .map(|m| m.member_id.clone())
            .ok_or_else(|| PolicyError::InvalidHousehold("no custodian member".into()))?;
        let child = household.child().member_id.clone();
        for change in changes {
            let rec = state.propose(household, &custodian, change, now)?;
            state.decide(household, &child, &rec.record_id, true, now)?;
        }
        Ok(state)
    }

    pub fn record(&self, record_id: &str) -> Option<&ConsentRecord> {
        self.consents.iter().find(|r| r.record_id == record_id)
    }

    pub fn propose(
        &mut self,
        household: &Household,
        custodian_id: &str,
        change: OptionChange,
        now: Timestamp,
    ) -> Result<ConsentRecord, PolicyError> {
        household.require_role(custodian_id, Role::Custodian)?;
        let option = change.validate()?;
        let record = ConsentRecord {
            record_id: uuid::Uuid::new_v4().to_string(),
            option,
            proposed_by: custodian_id.to_string(),
            proposed_at: now,
            state: ConsentState::Pending,
            decided_at: None,
            expires_at: now + consent_lifetime(),
        };
        self.consents.push(record.clone());
        self.version += 1;
        Ok(record)
    }

    pub fn decide(
        &mut self,
        household: &Household,
        child_id: &str,
        record_id: &str,
        approve: bool,
        now: Timestamp,
    ) -> Result<(), PolicyError> {
        household.require_role(child_id, Role::Child)?;
        let idx = self
            .consents
            .iter()
            .position(|r| r.record_id == record_id)
            .ok_or_else(|| PolicyError::UnknownRecord(record_id.to_string()))?;
        let record = &self.consents[idx];
        if record.state != ConsentState::Pending {
            return Err(PolicyError::NotPending(record.state));
        }
        if record.expires_at <= now {
            return Err(PolicyError::Expired);
        }

        if !approve {
            let record = &mut self.consents[idx];
            record.state = ConsentState::Rejected;
            record.decided_at = Some(now);
            self.version += 1;
            return Ok(());
        }

        let kind = record.option.kind();
        let option = record.option.clone();
        // Only one approved record per option group at a time.
        for other in self.consents.iter_mut() {
            if other.state == ConsentState::Approved && other.option.kind() == kind {
                other.state = ConsentState::Expired;
            }
        }
        let expires = now + consent_lifetime();
        let record = &mut self.consents[idx];
        record.state = ConsentState::Approved;
        record.decided_at = Some(now);
        record.expires_at = expires;
        self.apply(&option, now, expires);
        self.version += 1;
        Ok(())
    }

    fn apply(&mut self, option: &OptionChange, set_at: Timestamp, expires_at: Timestamp) {
        match option.clone() {
            OptionChange::Parental { level, selections } => {
                self.parental = ParentalVisibility {
                    level,
                    l2_selections: selections,
                    set_at: Some(set_at),
                    expires_at: Some(expires_at),
                }
            }
            OptionChange::Backend {
                level,
                selections,
                anonymize,
            } => {
                self.backend = BackendVisibility {
                    level,
                    l2_selections: selections,
                    anonymize,
                    set_at: Some(set_at),
                    expires_at: Some(expires_at),
                }
            }
            OptionChange::Cybersafety {
                level,
                enabled,
                enforce,
            } => {
                self.cybersafety = CybersafetyConfig {
                    level,
                    enabled_mechanisms: enabled,
                    enforce_mechanisms: enforce,
                    set_at: Some(set_at),
                    expires_at: Some(expires_at),
                }
            }
        }
    }

    fn reset(&mut self, kind: OptionKind) {
        match kind {
            OptionKind::Parental => self.parental = ParentalVisibility::default(),
            OptionKind::Backend => self.backend = BackendVisibility::default(),
            OptionKind::Cybersafety => self.cybersafety = CybersafetyConfig::default(),
        }
    }

    /// Flips every due record to expired and reverts lapsed options.
    /// Returns the number of records that changed state.
    pub fn expire_consents(&mut self, now: Timestamp) -> usize {
        let mut lapsed = BTreeSet::new();
        let mut count = 0;
        for record in self.consents.iter_mut() {
            let live = matches!(record.state, ConsentState::Approved | ConsentState::Pending);
            if live && record.expires_at <= now {
                if record.state == ConsentState::Approved {
                    lapsed.insert(record.option.kind());
                }
                record.state = ConsentState::Expired;
                count += 1;
            }
        }
        for kind in lapsed {
            self.reset(kind);
        }
        if count > 0 {
            self.version += 1;
        }
        count
    }

    fn approved_for(&self, kind: OptionKind, now: Timestamp) -> Option<&ConsentRecord> {
        self.consents.iter().find(|r| {
            r.state == ConsentState::Approved && r.option.kind() == kind && r.expires_at > now
        })
    }

    fn is_default(&self, kind: OptionKind) -> bool {
        match kind {
            OptionKind::Parental => self.parental == ParentalVisibility::default(),
            OptionKind::Backend => self.backend == BackendVisibility::default(),
            OptionKind::Cybersafety => self.cybersafety == CybersafetyConfig::default(),
        }
    }

    /// Whether option group `kind` is currently backed by live consent.
    /// Defaults need no consent.
    pub fn option_consented(&self, kind: OptionKind, now: Timestamp) -> bool {
        self.is_default(kind) || self.approved_for(kind, now).is_some()
    }

    /// Parental options as they apply at `now` (lapsed options read as default).
    pub fn effective_parental(&self, now: Timestamp) -> ParentalVisibility {
        if self.option_consented(OptionKind::Parental, now) {
            self.parental.clone()
        } else {
            ParentalVisibility::default()
        }
    }

    pub fn effective_backend(&self, now: Timestamp) -> BackendVisibility {
        if self.option_consented(OptionKind::Backend, now) {
            self.backend.clone()
        } else {
            BackendVisibility::default()
        }
    }

    pub fn effective_cybersafety(&self, now: Timestamp) -> CybersafetyConfig {
        if self.option_consented(OptionKind::Cybersafety, now) {
            self.cybersafety.clone()
        } else {
            CybersafetyConfig::default()
        }
    }

    /// Checks that every non-default option matches exactly one approved,
    /// unexpired consent record.
    pub fn check_invariants(&self, now: Timestamp) -> Result<(), String> {
        for kind in [OptionKind::Parental, OptionKind::Backend, OptionKind::Cybersafety] {
            let approved: Vec<_> = self
                .consents
                .iter()
                .filter(|r| r.state == ConsentState::Approved && r.option.kind() == kind)
                .collect();
            if approved.len() > 1 {
                return Err(format!("{kind:?}: {} approved records", approved.len()));
            }
            if self.is_default(kind) {
                continue;
            }
            let Some(record) = approved.first() else {
                return Err(format!("{kind:?} active without approved consent"));
            };
            if record.expires_at <= now {
                return Err(format!("{kind:?} active on expired consent"));
            }
            let mut probe = PolicyState::new(&self.household_id);
            probe.apply(&record.option, now, now);
            let matches = match kind {
                OptionKind::Parental => {
                    probe.parental.level == self.parental.level
                        && probe.parental.l2_selections == self.parental.l2_selections
                }
                OptionKind::Backend => {
                    probe.backend.level == self.backend.level
                        && probe.backend.l2_selections == self.backend.l2_selections
                        && probe.backend.anonymize == self.backend.anonymize
                }
                OptionKind::Cybersafety => {
                    probe.cybersafety.level == self.cybersafety.level
                        && probe.cybersafety.enabled_mechanisms
                            == self.cybersafety.enabled_mechanisms
                        && probe.cybersafety.enforce_mechanisms
                            == self.cybersafety.enforce_mechanisms
                }
            };
            if !matches {
                return Err(format!("{kind:?} differs from its approved record"));
            }
        }
        Ok(())
    }
}

/// Decides whether `class` may flow to `destination` under `policy` at `now`.
///
/// Total and pure: lapsed or never-approved options read as level 1.
pub fn scope_check(
    policy: &PolicyState,
    class: DataClass,
    destination: Destination,
    now: Timestamp,
) -> ScopeDecision {
    match destination {
        Destination::Custodian => {
            let parental = policy.effective_parental(now);
            match parental.level {
                VisibilityLevel::L1 => ScopeDecision::Deny,
                VisibilityLevel::L2 => {
                    if parental
                        .l2_selections
                        .iter()
                        .any(|s| s.data_class() == class)
                    {
                        ScopeDecision::Allow
                    } else {
                        ScopeDecision::Deny
                    }
                }
                VisibilityLevel::L3 => ScopeDecision::Allow,
            }
        }
        Destination::Backend => backend_scope(&policy.effective_backend(now), class),
    }
}

/// Back-end half of [`scope_check`] over an already effective option.
pub fn backend_scope(backend: &BackendVisibility, class: DataClass) -> ScopeDecision {
    let in_scope = match backend.level {
        VisibilityLevel::L1 => false,
        VisibilityLevel::L2 => backend
            .l2_selections
            .iter()
            .any(|s| s.data_class() == class),
        VisibilityLevel::L3 => {
            class == DataClass::Chat || BackendSelection::ALL.iter().any(|s| s.data_class() == class)
        }
    };
    match (in_scope, backend.anonymize) {
        (false, _) => ScopeDecision::Deny,
        (true, true) => ScopeDecision::AllowAnonymized,
        (true, false) => ScopeDecision::Allow,
    }
}

/// Observable result of a policy mutation, for fan-out to the add-on and
/// console.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PolicyEvent {
    ConsentRequested { record: ConsentRecord },
    ConsentDecided { record: ConsentRecord },
    ConsentsExpired { count: usize },
}

/// Single-writer front end over the household's policy document.
///
/// Reads are snapshots; every mutation is a compare-and-swap on `version`.
pub struct PolicyEngine {
    household: Household,
    store: Arc<dyn DocumentStore>,
    writer: Mutex<()>,
}

impl PolicyEngine {
    pub fn open(household: Household, store: Arc<dyn DocumentStore>) -> Result<Self, PolicyError> {
        let engine = Self {
            household,
            store,
            writer: Mutex::new(()),
        };
        if engine.load()?.is_none() {
            let fresh = PolicyState::new(&engine.household.household_id);
            engine.store.compare_and_swap(
                POLICY_COLLECTION,
                &engine.household.household_id,
                None,
                fresh.to_json().into_bytes(),
            )?;
        }
        Ok(engine)
    }

    pub fn household(&self) -> &Household {
        &self.household
    }

    fn load(&self) -> Result<Option<(PolicyState, u64)>, PolicyError> {
        let Some(doc) = self
            .store
            .get(POLICY_COLLECTION, &self.household.household_id)?
        else {
            return Ok(None);
        };
        let raw = String::from_utf8(doc.body).map_err(|e| PolicyError::Store(e.to_string()))?;
        Ok(Some((PolicyState::from_json(&raw)?, doc.version)))
    }

    pub fn snapshot(&self) -> Result<PolicyState, PolicyError> {
        self.load()?
            .map(|(s, _)| s)
            .ok_or_else(|| PolicyError::Store("policy document missing".into()))
    }

    fn mutate<T>(
        &self,
        f: impl FnOnce(&mut PolicyState) -> Result<T, PolicyError>,
    ) -> Result<(T, PolicyState), PolicyError> {
        let _guard = self.writer.lock();
        let (mut state, doc_version) = self
            .load()?
            .ok_or_else(|| PolicyError::Store("policy document missing".into()))?;
        let before = state.version;
        let out = f(&mut state)?;
        if state.version != before {
            self.store.compare_and_swap(
                POLICY_COLLECTION,
                &self.household.household_id,
                Some(doc_version),
                state.to_json().into_bytes(),
            )?;
        }
        Ok((out, state))
    }

    pub fn propose(
        &self,
        custodian_id: &str,
        change: OptionChange,
        now: Timestamp,
    ) -> Result<(ConsentRecord, PolicyEvent), PolicyError> {
        let household = self.household.clone();
        let (record, _) = self.mutate(|s| s.propose(&household, custodian_id, change, now))?;
        let event = PolicyEvent::ConsentRequested {
            record: record.clone(),
        };
        Ok((record, event))
    }

    pub fn decide(
        &self,
        child_id: &str,
        record_id: &str,
        approve: bool,
        now: Timestamp,
    ) -> Result<(PolicyState, PolicyEvent), PolicyError> {
        let household = self.household.clone();
        let (_, state) = self.mutate(|s| s.decide(&household, child_id, record_id, approve, now))?;
        let record = state
            .record(record_id)
            .cloned()
            .expect("decided record is present");
        Ok((state, PolicyEvent::ConsentDecided { record }))
    }

    pub fn expire_consents(&self, now: Timestamp) -> Result<usize, PolicyError> {
        let (count, _) = self.mutate(|s| Ok(s.expire_consents(now)))?;
        Ok(count)
    }
}

/// Human-readable summary of what the custodian and back-end can see; shown
/// to the child.
pub fn visibility_summary(policy: &PolicyState, now: Timestamp) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for class in DataClass::ALL {
        let custodian = scope_check(policy, class, Destination::Custodian, now);
        let backend = scope_check(policy, class, Destination::Backend, now);
        out.insert(
            format!("{class:?}").to_lowercase(),
            format!("custodian={custodian:?}, backend={backend:?}").to_lowercase(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryStore;
    use chrono::TimeZone;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
    }

    fn household() -> Household {
        Household::new(
            "h1",
            vec![
                HouseholdMember::child("kid", "John", "owl"),
                HouseholdMember::custodian("mum", "Mary"),
            ],
        )
        .unwrap()
    }

    fn parental(level: VisibilityLevel, sel: &[ParentalSelection]) -> OptionChange {
        OptionChange::Parental {
            level,
            selections: sel.iter().copied().collect(),
        }
    }

    #[test]
    fn household_needs_child_and_custodian() {
        let err = Household::new("h", vec![HouseholdMember::child("a", "A", "cat")]).unwrap_err();
        assert!(matches!(err, PolicyError::InvalidHousehold(_)));
        let dup = Household::new(
            "h",
            vec![
                HouseholdMember::child("a", "A", "cat"),
                HouseholdMember::custodian("a", "B"),
            ],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn proposal_is_pending_and_inactive() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        assert_eq!(rec.state, ConsentState::Pending);
        assert_eq!(s.parental.level, VisibilityLevel::L1);
        assert_eq!(s.version, 1);
    }

    #[test]
    fn only_custodian_proposes_and_only_child_decides() {
        let h = household();
        let mut s = PolicyState::new("h1");
        assert_eq!(
            s.propose(&h, "kid", parental(VisibilityLevel::L3, &[]), t0()),
            Err(PolicyError::NotCustodian("kid".into()))
        );
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        assert_eq!(
            s.decide(&h, "mum", &rec.record_id, true, t0()),
            Err(PolicyError::NotChild("mum".into()))
        );
    }

    #[test]
    fn cybersafety_l2_requires_enforced_mechanism() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let change = OptionChange::Cybersafety {
            level: CybersafetyLevel::L2,
            enabled: MechanismKind::ALL.into_iter().collect(),
            enforce: BTreeSet::new(),
        };
        assert!(matches!(
            s.propose(&h, "mum", change, t0()),
            Err(PolicyError::InvalidOption(_))
        ));
        assert_eq!(s.version, 0);
    }

    #[test]
    fn enforce_must_be_subset_of_enabled() {
        let change = OptionChange::Cybersafety {
            level: CybersafetyLevel::L2,
            enabled: [MechanismKind::Grooming].into_iter().collect(),
            enforce: [MechanismKind::HatefulMeme].into_iter().collect(),
        };
        assert!(change.validate().is_err());
    }

    #[test]
    fn approve_activates_parental_l2() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(
                &h,
                "mum",
                parental(VisibilityLevel::L2, &[ParentalSelection::FbWall]),
                t0(),
            )
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, t0()).unwrap();
        assert_eq!(s.parental.level, VisibilityLevel::L2);
        assert!(s.parental.l2_selections.contains(&ParentalSelection::FbWall));
        assert_eq!(s.parental.expires_at, Some(t0() + Duration::days(183)));
        s.check_invariants(t0()).unwrap();
    }

    #[test]
    fn reject_leaves_options_untouched() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        let before = s.clone();
        s.decide(&h, "kid", &rec.record_id, false, t0()).unwrap();
        assert_eq!(s.parental, before.parental);
        assert_eq!(s.backend, before.backend);
        assert_eq!(s.cybersafety, before.cybersafety);
        assert_eq!(s.record(&rec.record_id).unwrap().state, ConsentState::Rejected);
        assert!(s.version > before.version);
    }

    #[test]
    fn approving_stale_proposal_is_expired() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        let late = t0() + Duration::days(183) + Duration::seconds(1);
        assert_eq!(
            s.decide(&h, "kid", &rec.record_id, true, late),
            Err(PolicyError::Expired)
        );
        assert_eq!(s.parental.level, VisibilityLevel::L1);
    }

    #[test]
    fn deciding_twice_fails() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, t0()).unwrap();
        assert_eq!(
            s.decide(&h, "kid", &rec.record_id, true, t0()),
            Err(PolicyError::NotPending(ConsentState::Approved))
        );
    }

    #[test]
    fn proposing_current_value_is_noop_on_approval() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let current = OptionChange::Cybersafety {
            level: CybersafetyLevel::L1,
            enabled: MechanismKind::ALL.into_iter().collect(),
            enforce: BTreeSet::new(),
        };
        let rec = s.propose(&h, "mum", current, t0()).unwrap();
        let v = s.version;
        s.decide(&h, "kid", &rec.record_id, true, t0()).unwrap();
        assert_eq!(s.cybersafety.level, CybersafetyLevel::L1);
        assert_eq!(s.cybersafety.enabled_mechanisms.len(), 10);
        assert!(s.version > v);
    }

    #[test]
    fn expire_consents_cases() {
        let h = household();
        let mut s = PolicyState::new("h1");
        assert_eq!(s.expire_consents(t0()), 0);

        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, t0()).unwrap();
        let later = t0() + Duration::days(10);
        let rec2 = s
            .propose(
                &h,
                "mum",
                OptionChange::Backend {
                    level: VisibilityLevel::L3,
                    selections: BTreeSet::new(),
                    anonymize: true,
                },
                later,
            )
            .unwrap();
        s.decide(&h, "kid", &rec2.record_id, true, later).unwrap();

        // Parental record due (expires_at = now - 1s), back-end record not yet.
        let now = t0() + Duration::days(183) + Duration::seconds(1);
        assert_eq!(s.expire_consents(now), 1);
        assert_eq!(s.parental.level, VisibilityLevel::L1);
        assert_eq!(s.backend.level, VisibilityLevel::L3);
        let v = s.version;
        assert_eq!(s.expire_consents(now), 0);
        assert_eq!(s.version, v);
        s.check_invariants(now).unwrap();
    }

    #[test]
    fn newer_approval_supersedes_older() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let a = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        s.decide(&h, "kid", &a.record_id, true, t0()).unwrap();
        let later = t0() + Duration::days(100);
        let b = s
            .propose(
                &h,
                "mum",
                parental(VisibilityLevel::L2, &[ParentalSelection::FbPhotos]),
                later,
            )
            .unwrap();
        s.decide(&h, "kid", &b.record_id, true, later).unwrap();
        // The first approval lapsing must not revert the newer option.
        assert_eq!(s.expire_consents(t0() + Duration::days(184)), 0);
        assert_eq!(s.parental.level, VisibilityLevel::L2);
        s.check_invariants(t0() + Duration::days(184)).unwrap();
    }

    #[test]
    fn scope_examples() {
        let h = household();
        let now = t0();
        let s = PolicyState::new("h1");
        assert_eq!(
            scope_check(&s, DataClass::Chat, Destination::Custodian, now),
            ScopeDecision::Deny
        );

        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(
                &h,
                "mum",
                OptionChange::Backend {
                    level: VisibilityLevel::L3,
                    selections: BTreeSet::new(),
                    anonymize: true,
                },
                now,
            )
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, now).unwrap();
        assert_eq!(
            scope_check(&s, DataClass::Chat, Destination::Backend, now),
            ScopeDecision::AllowAnonymized
        );

        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(
                &h,
                "mum",
                OptionChange::Backend {
                    level: VisibilityLevel::L2,
                    selections: [BackendSelection::ChildWall].into_iter().collect(),
                    anonymize: false,
                },
                now,
            )
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, now).unwrap();
        assert_eq!(
            scope_check(&s, DataClass::Chat, Destination::Backend, now),
            ScopeDecision::Deny
        );
        assert_eq!(
            scope_check(&s, DataClass::Wall, Destination::Backend, now),
            ScopeDecision::Allow
        );
    }

    #[test]
    fn scope_denies_once_consent_lapses_even_before_sweep() {
        let h = household();
        let mut s = PolicyState::new("h1");
        let rec = s
            .propose(&h, "mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        s.decide(&h, "kid", &rec.record_id, true, t0()).unwrap();
        let now = t0() + Duration::days(183);
        assert_eq!(
            scope_check(&s, DataClass::Chat, Destination::Custodian, now),
            ScopeDecision::Deny
        );
    }

    #[test]
    fn policy_document_roundtrip() {
        let s = PolicyState::new("h1");
        let raw = s.to_json();
        assert!(raw.contains("\"schema\":\"policy.v1\""));
        assert_eq!(PolicyState::from_json(&raw).unwrap(), s);
    }

    #[test]
    fn unknown_option_is_rejected_at_parse() {
        let raw = r#"{"option":"telemetry","level":"L2"}"#;
        assert!(serde_json::from_str::<OptionChange>(raw).is_err());
    }

    #[test]
    fn engine_persists_with_version_cas() {
        let store: Arc<dyn DocumentStore> = Arc::new(MemoryStore::new());
        let engine = PolicyEngine::open(household(), store.clone()).unwrap();
        let (rec, ev) = engine
            .propose("mum", parental(VisibilityLevel::L3, &[]), t0())
            .unwrap();
        assert!(matches!(ev, PolicyEvent::ConsentRequested { .. }));
        let (state, _) = engine.decide("kid", &rec.record_id, true, t0()).unwrap();
        assert_eq!(state.parental.level, VisibilityLevel::L3);
        assert_eq!(engine.snapshot().unwrap(), state);

        // Re-opening keeps the stored document.
        let again = PolicyEngine::open(household(), store).unwrap();
        assert_eq!(again.snapshot().unwrap().version, state.version);
    }
}

//! Pluggable detectors.
//!
//! Each [`MechanismKind`] has exactly one registered [`Detector`]. The
//! shipped implementations are deterministic rule/lexicon baselines driven
//! by [`RuleTables`]; a trained model can be dropped in by implementing the
//! trait. External lookups (recent posts, bot verdicts, video metadata) go
//! through the [`TwitterApi`], [`BotApi`] and [`VideoApi`] traits.

pub mod account;
pub mod conversation;
pub mod image_rules;
pub mod lexicon;
pub mod pii;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use account::{classify_account, AccountFeatures, AccountLabel, AccountPost, AccountRules};
pub use conversation::{
    detect_cyberbullying, detect_distress, detect_grooming, AffectLexicon, DistressScores,
    GroomingRules,
};
pub use image_rules::{detect_skin, is_skin, skin_ratio, PerceptualHash};
pub use lexicon::Lexicon;
pub use pii::{detect_pii, luhn_valid, PiiCategory, PiiFinding};

use crate::event::{ChatLine, Direction, EventKind, TrafficEvent};
use crate::model::MechanismKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("rule table `{table}` line {line}: {reason}")]
    Table {
        table: String,
        line: usize,
        reason: String,
    },
    #[error("missing rule table `{0}`")]
    MissingTable(String),
    #[error("image: {0}")]
    Image(String),
    #[error("external api: {0}")]
    Api(String),
}

/// A flagged region of the analyzed data.
///
/// `item` indexes the conversation window (0 for single-text payloads);
/// `start..end` is a byte range inside that item's text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub item: usize,
    pub start: usize,
    pub end: usize,
    pub snippet: String,
}

impl Evidence {
    pub fn whole_message(item: usize, text: &str) -> Self {
        Self {
            item,
            start: 0,
            end: text.len(),
            snippet: text.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub label: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
    pub detector_version: String,
    /// Extra detail for rendering (PII categories, perpetrator, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl DetectionResult {
    pub const ERROR_LABEL: &'static str = "error";

    pub fn new(label: &str, version: &str) -> Self {
        Self {
            label: label.to_string(),
            scores: BTreeMap::new(),
            evidence: Vec::new(),
            detector_version: version.to_string(),
            attributes: BTreeMap::new(),
        }
    }

    /// Sentinel for crashed or timed-out detectors; never triggers.
    pub fn error(version: &str) -> Self {
        Self::new(Self::ERROR_LABEL, version)
    }

    pub fn is_error(&self) -> bool {
        self.label == Self::ERROR_LABEL
    }

    pub fn score(mut self, class: &str, value: f64) -> Self {
        self.scores.insert(class.to_string(), value.clamp(0.0, 1.0));
        self
    }

    pub fn attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attributes.insert(key.to_string(), value.into());
        self
    }

    pub fn with_evidence(mut self, evidence: Vec<Evidence>) -> Self {
        self.evidence = evidence;
        self
    }
}

/// What a detector reads back from the store for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventData {
    pub event: TrafficEvent,
    /// Conversation window ending with this event (chat events only).
    #[serde(default)]
    pub window: Vec<ChatLine>,
    /// Decoded image bytes for image events; resolved from the blob store.
    #[serde(skip)]
    pub image: Option<Vec<u8>>,
}

impl EventData {
    pub fn text_only(event: TrafficEvent) -> Self {
        Self {
            event,
            window: Vec::new(),
            image: None,
        }
    }
}

pub trait Detector: Send + Sync {
    fn mechanism(&self) -> MechanismKind;
    fn version(&self) -> &str;
    fn applies_to(&self, kind: EventKind) -> bool;
    fn analyze(&self, data: &EventData) -> DetectionResult;
}

/// Which event kinds feed each mechanism.
pub fn applicable_kinds(mechanism: MechanismKind) -> &'static [EventKind] {
    use EventKind::*;
    match mechanism {
        MechanismKind::Grooming | MechanismKind::Cyberbullying => &[ChatIn, ChatOut],
        MechanismKind::Distress => &[ChatOut],
        MechanismKind::PiiExposure => &[ChatOut, PostCompose],
        MechanismKind::HatefulMeme => &[FeedImage, ImageUpload],
        MechanismKind::SensitiveImage => &[ImageUpload],
        MechanismKind::AbusiveAccount | MechanismKind::BotAccount | MechanismKind::FakeActivity => {
            &[ProfileVisit]
        }
        MechanismKind::DisturbingVideo => &[VideoVisit],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError(pub String);

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait TwitterApi: Send + Sync {
    fn recent_posts(&self, username: &str) -> Result<AccountFeatures, ApiError>;
}

pub trait BotApi: Send + Sync {
    fn is_bot(&self, username: &str) -> Result<bool, ApiError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoFeatures {
    pub video_id: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub thumbnail_ref: Option<String>,
    #[serde(default)]
    pub upload_date: Option<String>,
    #[serde(default)]
    pub like_count: Option<u64>,
}

pub trait VideoApi: Send + Sync {
    fn features(&self, video_id: &str) -> Result<VideoFeatures, ApiError>;
}

#[derive(Clone, Default)]
pub struct ExternalApis {
    pub twitter: Option<Arc<dyn TwitterApi>>,
    pub bot: Option<Arc<dyn BotApi>>,
    pub video: Option<Arc<dyn VideoApi>>,
}

/// Rule tables shipped with the crate; the contents of a detector bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTables {
    files: BTreeMap<String, String>,
}

macro_rules! table {
    ($name:literal) => {
        ($name, include_str!(concat!("../../data/rules/", $name)))
    };
}

const DEFAULT_TABLES: &[(&str, &str)] = &[
    table!("distress_angry.tsv"),
    table!("distress_frustrated.tsv"),
    table!("distress_sad.tsv"),
    table!("grooming_isolation.tsv"),
    table!("grooming_secrecy.tsv"),
    table!("grooming_personal.tsv"),
    table!("grooming_meeting.tsv"),
    table!("bullying_insults.tsv"),
    table!("profanity.tsv"),
    table!("video_childbait.tsv"),
    table!("video_mature.tsv"),
    table!("meme_blocklist.tsv"),
    table!("thresholds.tsv"),
    table!("params.tsv"),
];

impl Default for RuleTables {
    fn default() -> Self {
        Self {
            files: DEFAULT_TABLES
                .iter()
                .map(|(n, c)| (n.to_string(), c.to_string()))
                .collect(),
        }
    }
}

impl RuleTables {
    pub fn from_files(files: BTreeMap<String, String>) -> Self {
        Self { files }
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn set(&mut self, name: &str, content: String) {
        self.files.insert(name.to_string(), content);
    }

    pub fn raw(&self, name: &str) -> Result<&str, DetectorError> {
        self.files
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| DetectorError::MissingTable(name.to_string()))
    }

    pub fn lexicon(&self, name: &str) -> Result<Lexicon, DetectorError> {
        Lexicon::parse(name, self.raw(name)?)
    }

    /// `name<TAB>number` rows, names kept verbatim.
    pub fn numbers(&self, table: &str) -> Result<BTreeMap<String, f64>, DetectorError> {
        let mut out = BTreeMap::new();
        for (i, line) in self.raw(table)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| DetectorError::Table {
                table: table.to_string(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (name, value) = line.split_once('\t').ok_or_else(|| bad("expected name<TAB>value"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("value is not a number"))?;
            out.insert(name.trim().to_string(), value);
        }
        Ok(out)
    }

    pub fn param(&self, name: &str) -> Result<f64, DetectorError> {
        self.numbers("params.tsv")?
            .get(name)
            .copied()
            .ok_or_else(|| DetectorError::MissingTable(format!("params.tsv:{name}")))
    }

    pub fn meme_blocklist(&self) -> Result<Vec<PerceptualHash>, DetectorError> {
        let raw = self.raw("meme_blocklist.tsv")?;
        let mut out = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let hash = line.split('\t').next().unwrap_or_default();
            out.push(PerceptualHash::from_hex(hash).ok_or_else(|| DetectorError::Table {
                table: "meme_blocklist.tsv".into(),
                line: i + 1,
                reason: format!("bad hash `{hash}`"),
            })?);
        }
        Ok(out)
    }

    pub fn thresholds(&self) -> Result<Thresholds, DetectorError> {
        let rows = self.numbers("thresholds.tsv")?;
        let mut t = Thresholds {
            default: rows.get("default").copied().unwrap_or(0.5),
            per_mechanism: BTreeMap::new(),
        };
        for (name, value) in &rows {
            match MechanismKind::parse(name) {
                Some(m) => {
                    t.per_mechanism.insert(m, *value);
                }
                None if name == "default" => {}
                None => {
                    return Err(DetectorError::Table {
                        table: "thresholds.tsv".into(),
                        line: 0,
                        reason: format!("unknown mechanism `{name}`"),
                    })
                }
            }
        }
        Ok(t)
    }
}

/// Per-mechanism score thresholds; a score must be strictly greater to
/// trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub default: f64,
    pub per_mechanism: BTreeMap<MechanismKind, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        RuleTables::default()
            .thresholds()
            .expect("bundled thresholds parse")
    }
}

impl Thresholds {
    pub fn for_mechanism(&self, m: MechanismKind) -> f64 {
        self.per_mechanism.get(&m).copied().unwrap_or(self.default)
    }
}

fn binary(label_pos: &str, label_neg: &str, class: &str, positive: bool, version: &str) -> DetectionResult {
    DetectionResult::new(if positive { label_pos } else { label_neg }, version).score(
        class,
        if positive { 1.0 } else { 0.0 },
    )
}

struct PiiDetector {
    version: String,
}

impl Detector for PiiDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::PiiExposure
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let text = data.event.text().unwrap_or_default();
        let findings = detect_pii(text);
        let categories: BTreeSet<&str> = findings.iter().map(|f| f.category.as_str()).collect();
        let item = data.window.len().saturating_sub(1);
        let evidence = findings
            .iter()
            .map(|f| Evidence {
                item,
                start: f.start,
                end: f.end,
                snippet: f.matched_text.clone(),
            })
            .collect();
        binary("pii_found", "clean", "pii", !findings.is_empty(), &self.version)
            .with_evidence(evidence)
            .attr(
                "categories",
                categories.into_iter().collect::<Vec<_>>().join(","),
            )
    }
}

struct DistressDetector {
    version: String,
    lexicon: AffectLexicon,
}

impl Detector for DistressDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::Distress
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let outbound: Vec<&str> = data
            .window
            .iter()
            .filter(|l| l.direction == Direction::Outbound)
            .map(|l| l.text.as_str())
            .collect();
        let s = detect_distress(&outbound, &self.lexicon);
        DetectionResult::new("affect", &self.version)
            .score("angry", s.angry)
            .score("frustrated", s.frustrated)
            .score("sad", s.sad)
    }
}

struct GroomingDetector {
    version: String,
    rules: GroomingRules,
}

impl Detector for GroomingDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::Grooming
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let out = detect_grooming(&data.window, &self.rules);
        let mut r = binary("grooming", "benign", "grooming", out.positive, &self.version)
            .attr("stages", out.stages.iter().cloned().collect::<Vec<_>>().join(","));
        if let Some(who) = conversation::likely_perpetrator(&data.window, &out.evidence) {
            r = r.attr("perpetrator", who);
        }
        r.with_evidence(out.evidence)
    }
}

struct BullyingDetector {
    version: String,
    insults: Lexicon,
    min_rate: f64,
}

impl Detector for BullyingDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::Cyberbullying
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let out = detect_cyberbullying(&data.window, &self.insults, self.min_rate);
        let mut r = binary("bullying", "benign", "cyberbullying", out.positive, &self.version)
            .attr("hit_rate", format!("{:.4}", out.hit_rate));
        if let Some(who) = conversation::likely_perpetrator(&data.window, &out.evidence) {
            r = r.attr("perpetrator", who);
        }
        r.with_evidence(out.evidence)
    }
}

struct AccountDetector {
    version: String,
    rules: AccountRules,
    api: Option<Arc<dyn TwitterApi>>,
}

impl Detector for AccountDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::AbusiveAccount
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let Some(username) = data.event.counterpart() else {
            return DetectionResult::new("normal", &self.version).score("abusive", 0.0);
        };
        let features = match &self.api {
            Some(api) => match api.recent_posts(username) {
                Ok(f) => f.truncated(),
                Err(err) => {
                    tracing::warn!(%username, %err, "recent posts unavailable");
                    return DetectionResult::new("indeterminate", &self.version);
                }
            },
            None => return DetectionResult::new("indeterminate", &self.version),
        };
        let label = classify_account(&features, &self.rules);
        DetectionResult::new(label.as_str(), &self.version)
            .score("abusive", if label == AccountLabel::Normal { 0.0 } else { 1.0 })
            .attr("perpetrator", username)
    }
}

/// Bot verdict from the remote bot-check service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BotVerdict {
    Bot,
    Human,
    Indeterminate,
}

pub fn check_bot(api: &dyn BotApi, username: &str) -> BotVerdict {
    match api.is_bot(username) {
        Ok(true) => BotVerdict::Bot,
        Ok(false) => BotVerdict::Human,
        Err(err) => {
            tracing::warn!(%username, %err, "bot check failed");
            BotVerdict::Indeterminate
        }
    }
}

struct BotDetector {
    version: String,
    kind: MechanismKind,
    api: Option<Arc<dyn BotApi>>,
}

impl Detector for BotDetector {
    fn mechanism(&self) -> MechanismKind {
        self.kind
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let (Some(api), Some(username)) = (&self.api, data.event.counterpart()) else {
            return DetectionResult::new("indeterminate", &self.version);
        };
        match check_bot(api.as_ref(), username) {
            BotVerdict::Bot => DetectionResult::new("bot", &self.version)
                .score("bot", 1.0)
                .attr("perpetrator", username),
            BotVerdict::Human => DetectionResult::new("human", &self.version).score("bot", 0.0),
            BotVerdict::Indeterminate => DetectionResult::new("indeterminate", &self.version),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemeLabel {
    Hateful,
    Benign,
}

#[derive(Debug, Clone)]
pub struct MemeRules {
    pub blocklist: Vec<PerceptualHash>,
    pub max_distance: u32,
}

/// Hateful when the image's hash is within `max_distance` bits of a
/// blocklisted hash. Undecodable images are benign.
pub fn classify_meme(bytes: &[u8], rules: &MemeRules) -> MemeLabel {
    let image = match image_rules::decode(bytes) {
        Ok(img) => img,
        Err(err) => {
            tracing::warn!(%err, "undecodable image treated as benign");
            return MemeLabel::Benign;
        }
    };
    let hash = PerceptualHash::of(&image);
    if rules
        .blocklist
        .iter()
        .any(|b| b.distance(hash) <= rules.max_distance)
    {
        MemeLabel::Hateful
    } else {
        MemeLabel::Benign
    }
}

struct MemeDetector {
    version: String,
    rules: MemeRules,
}

impl Detector for MemeDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::HatefulMeme
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let Some(bytes) = &data.image else {
            return binary("hateful", "benign", "hateful", false, &self.version);
        };
        let hateful = classify_meme(bytes, &self.rules) == MemeLabel::Hateful;
        binary("hateful", "benign", "hateful", hateful, &self.version)
    }
}

struct SkinDetector {
    version: String,
}

impl Detector for SkinDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::SensitiveImage
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let ratio = match data.image.as_deref().map(detect_skin) {
            Some(Ok(r)) => r,
            Some(Err(err)) => {
                tracing::warn!(%err, "skin detection failed");
                return DetectionResult::error(&self.version);
            }
            None => return DetectionResult::error(&self.version),
        };
        DetectionResult::new("skin_ratio", &self.version).score("skin_ratio", ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoLabel {
    Inappropriate,
    Appropriate,
}

#[derive(Debug, Clone)]
pub struct VideoRules {
    pub child_bait: Lexicon,
    pub mature: Lexicon,
}

/// Inappropriate when title and tags combine child-bait terms with violent
/// or sexual terms.
pub fn classify_video(features: &VideoFeatures, rules: &VideoRules) -> VideoLabel {
    let mut text = features.title.clone().unwrap_or_default();
    for tag in &features.tags {
        text.push_str(" , ");
        text.push_str(tag);
    }
    if text.trim().is_empty() {
        return VideoLabel::Appropriate;
    }
    if rules.child_bait.hits(&text) && rules.mature.hits(&text) {
        VideoLabel::Inappropriate
    } else {
        VideoLabel::Appropriate
    }
}

struct VideoDetector {
    version: String,
    rules: VideoRules,
    api: Option<Arc<dyn VideoApi>>,
}

impl Detector for VideoDetector {
    fn mechanism(&self) -> MechanismKind {
        MechanismKind::DisturbingVideo
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn applies_to(&self, kind: EventKind) -> bool {
        applicable_kinds(self.mechanism()).contains(&kind)
    }
    fn analyze(&self, data: &EventData) -> DetectionResult {
        let crate::event::EventPayload::Video { video_id } = &data.event.payload else {
            return binary("inappropriate", "appropriate", "inappropriate", false, &self.version);
        };
        let features = match &self.api {
            Some(api) => api.features(video_id).unwrap_or_else(|err| {
                tracing::warn!(%video_id, %err, "video features unavailable");
                VideoFeatures {
                    video_id: video_id.clone(),
                    ..Default::default()
                }
            }),
            None => VideoFeatures {
                video_id: video_id.clone(),
                ..Default::default()
            },
        };
        let bad = classify_video(&features, &self.rules) == VideoLabel::Inappropriate;
        let mut r = binary("inappropriate", "appropriate", "inappropriate", bad, &self.version);
        if let Some(title) = &features.title {
            r = r.attr("title", title.clone());
        }
        r
    }
}

/// Detector set, one per mechanism, stamped with a bundle version.
#[derive(Clone)]
pub struct Registry {
    version: String,
    detectors: BTreeMap<MechanismKind, Arc<dyn Detector>>,
}

impl Registry {
    pub fn empty(version: &str) -> Self {
        Self {
            version: version.to_string(),
            detectors: BTreeMap::new(),
        }
    }

    /// Builds the rule baselines for every mechanism from `tables`.
    pub fn from_tables(
        tables: &RuleTables,
        version: &str,
        apis: &ExternalApis,
    ) -> Result<Self, DetectorError> {
        let v = version.to_string();
        let mut reg = Self::empty(version);
        let insults = tables.lexicon("bullying_insults.tsv")?;
        reg.register(Arc::new(PiiDetector { version: v.clone() }));
        reg.register(Arc::new(DistressDetector {
            version: v.clone(),
            lexicon: AffectLexicon {
                angry: tables.lexicon("distress_angry.tsv")?,
                frustrated: tables.lexicon("distress_frustrated.tsv")?,
                sad: tables.lexicon("distress_sad.tsv")?,
            },
        }));
        let mut stages = Vec::new();
        for stage in ["isolation", "secrecy", "personal", "meeting"] {
            stages.push((
                stage.to_string(),
                tables.lexicon(&format!("grooming_{stage}.tsv"))?,
            ));
        }
        reg.register(Arc::new(GroomingDetector {
            version: v.clone(),
            rules: GroomingRules { stages },
        }));
        reg.register(Arc::new(BullyingDetector {
            version: v.clone(),
            insults: insults.clone(),
            min_rate: tables.param("bullying_hit_rate")?,
        }));
        reg.register(Arc::new(AccountDetector {
            version: v.clone(),
            rules: AccountRules {
                insults,
                profanity: tables.lexicon("profanity.tsv")?,
                duplicate_ratio: tables.param("account_duplicate_ratio")?,
                profanity_rate: tables.param("account_profanity_rate")?,
            },
            api: apis.twitter.clone(),
        }));
        for kind in [MechanismKind::BotAccount, MechanismKind::FakeActivity] {
            reg.register(Arc::new(BotDetector {
                version: v.clone(),
                kind,
                api: apis.bot.clone(),
            }));
        }
        reg.register(Arc::new(MemeDetector {
            version: v.clone(),
            rules: MemeRules {
                blocklist: tables.meme_blocklist()?,
                max_distance: tables.param("meme_hamming_distance")? as u32,
            },
        }));
        reg.register(Arc::new(SkinDetector { version: v.clone() }));
        reg.register(Arc::new(VideoDetector {
            version: v,
            rules: VideoRules {
                child_bait: tables.lexicon("video_childbait.tsv")?,
                mature: tables.lexicon("video_mature.tsv")?,
            },
            api: apis.video.clone(),
        }));
        Ok(reg)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Registers `detector`, replacing any previous one for its mechanism.
    pub fn register(&mut self, detector: Arc<dyn Detector>) {
        self.detectors.insert(detector.mechanism(), detector);
    }

    pub fn get(&self, mechanism: MechanismKind) -> Option<Arc<dyn Detector>> {
        self.detectors.get(&mechanism).cloned()
    }

    /// Enabled mechanisms whose detector accepts `kind`, in enum order.
    pub fn applicable(&self, kind: EventKind, enabled: &BTreeSet<MechanismKind>) -> Vec<MechanismKind> {
        self.detectors
            .iter()
            .filter(|(m, d)| enabled.contains(m) && d.applies_to(kind))
            .map(|(m, _)| *m)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventPayload, Platform};
    use chrono::Utc;

    struct FixedBots;
    impl BotApi for FixedBots {
        fn is_bot(&self, username: &str) -> Result<bool, ApiError> {
            match username {
                "bot_eve" => Ok(true),
                "alice" => Ok(false),
                _ => Err(ApiError("503".into())),
            }
        }
    }

    #[test]
    fn bot_verdicts() {
        assert_eq!(check_bot(&FixedBots, "bot_eve"), BotVerdict::Bot);
        assert_eq!(check_bot(&FixedBots, "alice"), BotVerdict::Human);
        assert_eq!(check_bot(&FixedBots, "down"), BotVerdict::Indeterminate);
    }

    #[test]
    fn default_tables_build_full_registry() {
        let reg = Registry::from_tables(&RuleTables::default(), "v1", &ExternalApis::default()).unwrap();
        for m in MechanismKind::ALL {
            let d = reg.get(m).expect("registered");
            assert_eq!(d.mechanism(), m);
            assert_eq!(d.version(), "v1");
        }
        let all: BTreeSet<_> = MechanismKind::ALL.into_iter().collect();
        assert_eq!(
            reg.applicable(EventKind::ChatOut, &all),
            vec![
                MechanismKind::Grooming,
                MechanismKind::Cyberbullying,
                MechanismKind::Distress,
                MechanismKind::PiiExposure
            ]
        );
        let only_video: BTreeSet<_> = [MechanismKind::DisturbingVideo].into_iter().collect();
        assert_eq!(
            reg.applicable(EventKind::VideoVisit, &only_video),
            vec![MechanismKind::DisturbingVideo]
        );
        assert!(reg.applicable(EventKind::VideoVisit, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn default_thresholds() {
        let t = Thresholds::default();
        assert_eq!(t.for_mechanism(MechanismKind::Distress), 0.65);
        assert_eq!(t.for_mechanism(MechanismKind::SensitiveImage), 0.30);
        assert_eq!(t.for_mechanism(MechanismKind::Grooming), 0.5);
    }

    fn video_rules() -> VideoRules {
        let t = RuleTables::default();
        VideoRules {
            child_bait: t.lexicon("video_childbait.tsv").unwrap(),
            mature: t.lexicon("video_mature.tsv").unwrap(),
        }
    }

    #[test]
    fn video_rule_table() {
        let f = VideoFeatures {
            video_id: "v1".into(),
            title: Some("Peppa Pig FUNNY".into()),
            tags: vec!["kids".into()],
            ..Default::default()
        };
        assert_eq!(classify_video(&f, &video_rules()), VideoLabel::Appropriate);
        let f = VideoFeatures {
            video_id: "v2".into(),
            title: Some("Elsa and Spiderman ZOMBIE blood attack".into()),
            ..Default::default()
        };
        assert_eq!(classify_video(&f, &video_rules()), VideoLabel::Inappropriate);
        assert_eq!(
            classify_video(&VideoFeatures::default(), &video_rules()),
            VideoLabel::Appropriate
        );
    }

    #[test]
    fn detectors_are_deterministic() {
        let reg = Registry::from_tables(&RuleTables::default(), "v1", &ExternalApis::default()).unwrap();
        let event = TrafficEvent::new(
            "kid",
            Platform::FacebookLike,
            EventKind::ChatOut,
            EventPayload::Chat {
                conversation: "c".into(),
                peer: "eve".into(),
                text: "call 555-867-5309".into(),
            },
            Utc::now(),
        )
        .unwrap();
        let data = EventData {
            window: vec![ChatLine::outbound("kid", "call 555-867-5309")],
            event,
            image: None,
        };
        for m in reg.applicable(EventKind::ChatOut, &MechanismKind::ALL.into_iter().collect()) {
            let d = reg.get(m).unwrap();
            assert_eq!(d.analyze(&data), d.analyze(&data));
        }
        let pii = reg.get(MechanismKind::PiiExposure).unwrap().analyze(&data);
        assert_eq!(pii.label, "pii_found");
        assert_eq!(pii.evidence.len(), 1);
        assert_eq!(pii.evidence[0].snippet, "555-867-5309");
    }
}

//! Turns intercepted request and response bodies into traffic events.
//!
//! What to extract is data: a table of rules keyed by host, method, path
//! pattern and body format. Unknown markup yields no events, never an error.

use std::collections::BTreeMap;

use cfas_core::event::content_address;
use cfas_core::{EventKind, EventPayload, Platform, TrafficEvent};
use chrono::Utc;
use regex::Regex;
use scraper::{Html, Selector};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Request,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Html,
    Image,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub host: String,
    pub platform: Platform,
    pub kind: String,
    pub source: Source,
    pub method: String,
    pub path: String,
    pub format: Format,
    #[serde(default)]
    pub selector: Option<String>,
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RuleFile {
    rule: Vec<RuleSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule file: {0}")]
    Parse(String),
    #[error("rule {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

struct Rule {
    spec: RuleSpec,
    kind: EventKind,
    path: Regex,
    selector: Option<Selector>,
}

/// One extracted event plus what the proxy needs to act on it.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub event: TrafficEvent,
    pub image: Option<Vec<u8>>,
    /// Platform id of the item (chat message id), for de-duplication.
    pub item_id: Option<String>,
}

pub struct Extractor {
    rules: Vec<Rule>,
}

impl Extractor {
    pub fn builtin() -> Self {
        Self::from_toml(include_str!("../data/extract_rules.toml")).expect("bundled rules parse")
    }

    pub fn from_toml(raw: &str) -> Result<Self, RuleError> {
        let file: RuleFile = toml::from_str(raw).map_err(|e| RuleError::Parse(e.to_string()))?;
        let mut rules = Vec::new();
        for (index, spec) in file.rule.into_iter().enumerate() {
            let invalid = |reason: String| RuleError::Invalid { index, reason };
            let kind = EventKind::parse(&spec.kind).ok_or_else(|| invalid(format!("unknown kind {}", spec.kind)))?;
            let path = Regex::new(&spec.path).map_err(|e| invalid(e.to_string()))?;
            let selector = match (&spec.selector, spec.format) {
                (Some(s), Format::Html) => {
                    Some(Selector::parse(s).map_err(|e| invalid(format!("selector: {e}")))?)
                }
                (None, Format::Html) => return Err(invalid("html rule without selector".into())),
                _ => None,
            };
            rules.push(Rule {
                spec,
                kind,
                path,
                selector,
            });
        }
        Ok(Self { rules })
    }

    pub fn hosts(&self) -> Vec<&str> {
        let mut h: Vec<&str> = self.rules.iter().map(|r| r.spec.host.as_str()).collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Whether any response rule for this exchange could produce events.
    pub fn wants_response(&self, host: &str, method: &str, path: &str) -> bool {
        self.matching(host, method, path, Source::Response).next().is_some()
    }

    fn matching<'a>(
        &'a self,
        host: &'a str,
        method: &'a str,
        path: &'a str,
        source: Source,
    ) -> impl Iterator<Item = &'a Rule> + 'a {
        self.rules.iter().filter(move |r| {
            r.spec.source == source
                && r.spec.host.eq_ignore_ascii_case(host)
                && r.spec.method.eq_ignore_ascii_case(method)
                && r.path.is_match(path)
        })
    }

    pub fn extract(
        &self,
        source: Source,
        host: &str,
        method: &str,
        path: &str,
        body: &[u8],
        member_id: &str,
    ) -> Vec<Extracted> {
        let mut out = Vec::new();
        for rule in self.matching(host, method, path, source) {
            let found = match rule.spec.format {
                Format::Json => json_events(rule, body, member_id),
                Format::Html => match std::str::from_utf8(body) {
                    Ok(text) => html_events(rule, &Html::parse_document(text), member_id),
                    Err(_) => {
                        tracing::warn!(host, path, "html body is not utf-8, dropped");
                        Vec::new()
                    }
                },
                Format::Image => image_event(rule, body, member_id).into_iter().collect(),
            };
            out.extend(found);
        }
        out
    }

    /// Runs every HTML rule of `platform` over a parsed page, regardless of
    /// the path it came from.
    pub fn extract_document(&self, platform: Platform, html: &str, member_id: &str) -> Vec<TrafficEvent> {
        let doc = Html::parse_document(html);
        self.rules
            .iter()
            .filter(|r| r.spec.platform == platform && r.spec.format == Format::Html)
            .flat_map(|r| html_events(r, &doc, member_id))
            .map(|e| e.event)
            .collect()
    }
}

fn build(rule: &Rule, member_id: &str, fields: &BTreeMap<String, String>) -> Option<TrafficEvent> {
    let get = |k: &str| fields.get(k).filter(|v| !v.is_empty()).cloned();
    let payload = match rule.kind {
        EventKind::ChatIn | EventKind::ChatOut => {
            let peer = get("peer")?;
            EventPayload::Chat {
                conversation: get("conversation").unwrap_or_else(|| peer.clone()),
                peer,
                text: get("text")?,
            }
        }
        EventKind::PostCompose => EventPayload::Text { text: get("text")? },
        EventKind::ProfileVisit => EventPayload::Username {
            username: get("username")?,
        },
        EventKind::VideoVisit => EventPayload::Video {
            video_id: get("video_id")?,
        },
        EventKind::ImageUpload | EventKind::FeedImage => return None,
    };
    TrafficEvent::new(member_id, rule.spec.platform, rule.kind, payload, Utc::now()).ok()
}

fn json_events(rule: &Rule, body: &[u8], member_id: &str) -> Vec<Extracted> {
    let Ok(serde_json::Value::Object(obj)) = serde_json::from_slice::<serde_json::Value>(body) else {
        tracing::warn!(kind = rule.kind.as_str(), "malformed json body, event dropped");
        return Vec::new();
    };
    let fields: BTreeMap<String, String> = rule
        .spec
        .fields
        .iter()
        .filter_map(|(name, key)| Some((name.clone(), obj.get(key)?.as_str()?.to_string())))
        .collect();
    build(rule, member_id, &fields)
        .map(|event| Extracted {
            event,
            image: None,
            item_id: fields.get("id").cloned(),
        })
        .into_iter()
        .collect()
}

fn html_events(rule: &Rule, doc: &Html, member_id: &str) -> Vec<Extracted> {
    let Some(selector) = &rule.selector else {
        return Vec::new();
    };
    doc.select(selector)
        .filter_map(|el| {
            let fields: BTreeMap<String, String> = rule
                .spec
                .fields
                .iter()
                .filter_map(|(name, src)| {
                    let v = if src == "text()" {
                        el.text().collect::<String>().trim().to_string()
                    } else {
                        el.value().attr(src.strip_prefix('@')?)?.to_string()
                    };
                    Some((name.clone(), v))
                })
                .collect();
            let event = build(rule, member_id, &fields)?;
            Some(Extracted {
                event,
                image: None,
                item_id: fields.get("id").cloned(),
            })
        })
        .collect()
}

fn image_event(rule: &Rule, body: &[u8], member_id: &str) -> Option<Extracted> {
    if body.is_empty() {
        return None;
    }
    if image::guess_format(body).is_err() {
        tracing::warn!(kind = rule.kind.as_str(), "body is not an image, event dropped");
        return None;
    }
    let event = TrafficEvent::new(
        member_id,
        rule.spec.platform,
        rule.kind,
        EventPayload::Image {
            image_ref: content_address(body),
        },
        Utc::now(),
    )
    .ok()?;
    Some(Extracted {
        event,
        image: Some(body.to_vec()),
        item_id: None,
    })
}

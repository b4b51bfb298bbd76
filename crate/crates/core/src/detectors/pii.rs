//! Personal-information finder for text the child is about to publish.
//!
//! Each category has its own rule; credit-card candidates must also pass
//! the Luhn checksum. Formats are en-US. Spans are byte ranges into the
//! input (always on `char` boundaries).

use std::net::Ipv6Addr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiiCategory {
    Date,
    Time,
    Phone,
    Link,
    Email,
    Ip,
    Ipv6,
    Price,
    CreditCard,
    StreetAddress,
    ZipCode,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 11] = [
        Self::Date,
        Self::Time,
        Self::Phone,
        Self::Link,
        Self::Email,
        Self::Ip,
        Self::Ipv6,
        Self::Price,
        Self::CreditCard,
        Self::StreetAddress,
        Self::ZipCode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Date => "date",
            Self::Time => "time",
            Self::Phone => "phone",
            Self::Link => "link",
            Self::Email => "email",
            Self::Ip => "ip",
            Self::Ipv6 => "ipv6",
            Self::Price => "price",
            Self::CreditCard => "credit_card",
            Self::StreetAddress => "street_address",
            Self::ZipCode => "zip_code",
        }
    }

    /// Redaction placeholder, e.g. `[PHONE]`.
    pub fn placeholder(self) -> String {
        format!("[{}]", self.as_str().to_uppercase())
    }

    /// Lower rank wins when two findings of different categories overlap.
    fn rank(self) -> u8 {
        match self {
            Self::Email => 0,
            Self::Link => 1,
            Self::CreditCard => 2,
            Self::Ipv6 => 3,
            Self::Ip => 4,
            Self::Phone => 5,
            Self::StreetAddress => 6,
            Self::Date => 7,
            Self::Time => 8,
            Self::Price => 9,
            Self::ZipCode => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiFinding {
    pub category: PiiCategory,
    pub start: usize,
    pub end: usize,
    pub matched_text: String,
}

fn re(pattern: &str) -> Regex {
    Regex::new(pattern).expect("pii pattern compiles")
}

static EMAIL: LazyLock<Regex> =
    LazyLock::new(|| re(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}"));
static LINK: LazyLock<Regex> =
    LazyLock::new(|| re(r#"(?i)\b(?:https?://|www\.)[^\s<>"']+"#));
static IPV4: LazyLock<Regex> = LazyLock::new(|| {
    re(r"\b(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)(?:\.(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)){3}\b")
});
static IPV6_CANDIDATE: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?i)[0-9a-f]{0,4}(?::[0-9a-f]{0,4}){2,7}"));
static PHONE: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)(?:\+?1[-.\s]?)?(?:\(\d{3}\)\s?|\d{3}[-.\s]?)\d{3}[-.\s]?\d{4}(?:\s*(?:ext\.?|x|extension)\s*\d{1,5})?|\b\d{3}[-.]\d{4}\b")
});
static CARD_CANDIDATE: LazyLock<Regex> = LazyLock::new(|| re(r"\b\d(?:[ -]?\d){12,18}\b"));
static PRICE: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)[$€£]\s?\d{1,3}(?:,\d{3})*(?:\.\d{1,2})?\b|[$€£]\s?\d+(?:\.\d{1,2})?\b|\b\d+(?:\.\d{1,2})?\s?(?:dollars|usd|bucks)\b")
});
static DATE: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:\d{1,2}/\d{1,2}/(?:\d{4}|\d{2})|\d{4}-\d{2}-\d{2}|(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|jun(?:e)?|jul(?:y)?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\.?\s+\d{1,2}(?:st|nd|rd|th)?(?:,?\s+\d{4})?|\d{1,2}(?:st|nd|rd|th)?\s+(?:of\s+)?(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|jun(?:e)?|jul(?:y)?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\b(?:,?\s+\d{4})?)")
});
static TIME: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:[01]?\d|2[0-3]):[0-5]\d(?::[0-5]\d)?(?:\s?[ap]\.?m\b\.?)?|\b(?:1[0-2]|0?[1-9])\s?[ap]\.?m\b\.?")
});
static STREET: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b\d{1,5}\s+(?:[A-Za-z][A-Za-z'.-]*\s+){1,3}(?:street|st|avenue|ave|road|rd|boulevard|blvd|lane|ln|drive|dr|court|ct|way|place|pl|terrace|circle)\b\.?")
});
static ZIP: LazyLock<Regex> = LazyLock::new(|| re(r"\b\d{5}(?:-\d{4})?\b"));

/// Luhn checksum over the digits of `number`; non-digits are ignored.
pub fn luhn_valid(number: &str) -> bool {
    let digits: Vec<u32> = number.chars().filter_map(|c| c.to_digit(10)).collect();
    if digits.len() < 2 {
        return false;
    }
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let doubled = d * 2;
                if doubled > 9 {
                    doubled - 9
                } else {
                    doubled
                }
            } else {
                d
            }
        })
        .sum();
    sum % 10 == 0
}

/// True when the span continues a longer run of digit groups
/// (e.g. part of a card number), which disqualifies phone and zip matches.
fn inside_digit_run(text: &str, start: usize, end: usize) -> bool {
    let bytes = text.as_bytes();
    let is_sep = |b: u8| b == b' ' || b == b'-' || b == b'.';
    let before = |i: usize| (i > 0).then(|| bytes[i - 1]);
    let after = |i: usize| bytes.get(i).copied();
    match before(start) {
        Some(b) if b.is_ascii_digit() => return true,
        Some(b) if is_sep(b) => {
            if matches!(before(start - 1), Some(d) if d.is_ascii_digit()) {
                return true;
            }
        }
        _ => {}
    }
    match after(end) {
        Some(b) if b.is_ascii_digit() => true,
        Some(b) if is_sep(b) => matches!(after(end + 1), Some(d) if d.is_ascii_digit()),
        _ => false,
    }
}

fn push(out: &mut Vec<PiiFinding>, text: &str, category: PiiCategory, start: usize, end: usize) {
    out.push(PiiFinding {
        category,
        start,
        end,
        matched_text: text[start..end].to_string(),
    });
}

fn candidates(text: &str) -> Vec<PiiFinding> {
    let mut out = Vec::new();
    for m in EMAIL.find_iter(text) {
        push(&mut out, text, PiiCategory::Email, m.start(), m.end());
    }
    for m in LINK.find_iter(text) {
        // Trailing sentence punctuation is not part of the link.
        let trimmed = m.as_str().trim_end_matches(['.', ',', '!', '?', ')', ';', ':']);
        push(&mut out, text, PiiCategory::Link, m.start(), m.start() + trimmed.len());
    }
    for m in CARD_CANDIDATE.find_iter(text) {
        let digits = m.as_str().chars().filter(char::is_ascii_digit).count();
        if (13..=19).contains(&digits) && luhn_valid(m.as_str()) {
            push(&mut out, text, PiiCategory::CreditCard, m.start(), m.end());
        }
    }
    for m in IPV6_CANDIDATE.find_iter(text) {
        let s = m.as_str();
        if s.matches(':').count() >= 2 && s.parse::<Ipv6Addr>().is_ok() {
            push(&mut out, text, PiiCategory::Ipv6, m.start(), m.end());
        }
    }
    for m in IPV4.find_iter(text) {
        let next = text[m.end()..].chars().next();
        let prev = text[..m.start()].chars().next_back();
        if next == Some('.') && text[m.end() + 1..].starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        if prev == Some('.') {
            continue;
        }
        push(&mut out, text, PiiCategory::Ip, m.start(), m.end());
    }
    for m in PHONE.find_iter(text) {
        if !inside_digit_run(text, m.start(), m.end()) {
            push(&mut out, text, PiiCategory::Phone, m.start(), m.end());
        }
    }
    for m in STREET.find_iter(text) {
        push(&mut out, text, PiiCategory::StreetAddress, m.start(), m.end());
    }
    for m in DATE.find_iter(text) {
        push(&mut out, text, PiiCategory::Date, m.start(), m.end());
    }
    for m in TIME.find_iter(text) {
        push(&mut out, text, PiiCategory::Time, m.start(), m.end());
    }
    for m in PRICE.find_iter(text) {
        push(&mut out, text, PiiCategory::Price, m.start(), m.end());
    }
    for m in ZIP.find_iter(text) {
        if !inside_digit_run(text, m.start(), m.end()) {
            push(&mut out, text, PiiCategory::ZipCode, m.start(), m.end());
        }
    }
    out
}

fn overlaps(a: &PiiFinding, b: &PiiFinding) -> bool {
    a.start < b.end && b.start < a.end
}

/// Finds every PII category in `text`.
///
/// Findings are sorted by position. Within a category spans never overlap;
/// across categories the more specific rule wins an overlap.
pub fn detect_pii(text: &str) -> Vec<PiiFinding> {
    let mut all = candidates(text);
    // Most specific first, then earliest, then longest.
    all.sort_by(|a, b| {
        a.category
            .rank()
            .cmp(&b.category.rank())
            .then(a.start.cmp(&b.start))
            .then((b.end - b.start).cmp(&(a.end - a.start)))
    });
    let mut kept: Vec<PiiFinding> = Vec::new();
    for f in all {
        if kept.iter().any(|k| overlaps(k, &f)) {
            continue;
        }
        kept.push(f);
    }
    kept.sort_by_key(|f| (f.start, f.end));
    kept
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::lexicon::Lexicon;

pub const MAX_RECENT_POSTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountPost {
    pub text: String,
    #[serde(default)]
    pub retweet: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub followers: u64,
    pub posts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountFeatures {
    pub username: String,
    pub recent_posts: Vec<AccountPost>,
    #[serde(default)]
    pub profile_meta: ProfileMeta,
}

impl AccountFeatures {
    /// Keeps only the most recent [`MAX_RECENT_POSTS`] posts (list is newest first).
    pub fn truncated(mut self) -> Self {
        self.recent_posts.truncate(MAX_RECENT_POSTS);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountLabel {
    Aggressive,
    Bully,
    Spam,
    Normal,
}

impl AccountLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Aggressive => "aggressive",
            Self::Bully => "bully",
            Self::Spam => "spam",
            Self::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AccountRules {
    pub insults: Lexicon,
    pub profanity: Lexicon,
    pub duplicate_ratio: f64,
    pub profanity_rate: f64,
}

fn addressees(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .filter_map(|w| w.strip_prefix('@'))
        .map(|w| {
            w.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '_')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Rule baseline; priority spam > bully > aggressive > normal.
pub fn classify_account(features: &AccountFeatures, rules: &AccountRules) -> AccountLabel {
    let posts = &features.recent_posts[..features.recent_posts.len().min(MAX_RECENT_POSTS)];
    if posts.is_empty() {
        return AccountLabel::Normal;
    }
    let n = posts.len() as f64;

    let distinct: BTreeSet<String> = posts
        .iter()
        .map(|p| p.text.trim().to_lowercase())
        .collect();
    let duplicate_ratio = 1.0 - distinct.len() as f64 / n;
    if duplicate_ratio > rules.duplicate_ratio {
        return AccountLabel::Spam;
    }

    let mut targets: BTreeMap<String, usize> = BTreeMap::new();
    for p in posts.iter().filter(|p| rules.insults.hits(&p.text)) {
        for who in addressees(&p.text) {
            *targets.entry(who).or_default() += 1;
        }
    }
    if targets.values().any(|&c| c >= 2) {
        return AccountLabel::Bully;
    }

    let abusive = posts
        .iter()
        .filter(|p| rules.profanity.hits(&p.text) || rules.insults.hits(&p.text))
        .count() as f64;
    if abusive / n > rules.profanity_rate {
        return AccountLabel::Aggressive;
    }
    AccountLabel::Normal
}

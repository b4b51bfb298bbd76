//! Chat-window detectors: distress (child's outbound lines), grooming
//! (both sides) and cyberbullying (inbound lines).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::lexicon::{tokens, Lexicon};
use super::Evidence;
use crate::event::{ChatLine, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistressScores {
    pub angry: f64,
    pub frustrated: f64,
    pub sad: f64,
}

#[derive(Debug, Clone)]
pub struct AffectLexicon {
    pub angry: Lexicon,
    pub frustrated: Lexicon,
    pub sad: Lexicon,
}

/// Scores each affect as matched-token weight mass over the total token
/// count of the window, clamped to `[0, 1]`.
pub fn detect_distress<S: AsRef<str>>(window: &[S], lexicon: &AffectLexicon) -> DistressScores {
    let toks: Vec<String> = window.iter().flat_map(|m| tokens(m.as_ref())).collect();
    if toks.is_empty() {
        return DistressScores::default();
    }
    let total = toks.len() as f64;
    let mass = |lx: &Lexicon| -> f64 {
        let sum: f64 = toks.iter().filter_map(|t| lx.weight(t)).sum();
        (sum / total).clamp(0.0, 1.0)
    };
    DistressScores {
        angry: mass(&lexicon.angry),
        frustrated: mass(&lexicon.frustrated),
        sad: mass(&lexicon.sad),
    }
}

/// The four grooming stages, each a phrase class.
#[derive(Debug, Clone)]
pub struct GroomingRules {
    pub stages: Vec<(String, Lexicon)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroomingOutcome {
    pub positive: bool,
    pub stages: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
}

/// Positive when at least two distinct stages match somewhere in the
/// window. Evidence lists only the matching messages.
pub fn detect_grooming(window: &[ChatLine], rules: &GroomingRules) -> GroomingOutcome {
    let mut stages = BTreeSet::new();
    let mut evidence = Vec::new();
    for (idx, line) in window.iter().enumerate() {
        let mut hit = false;
        for (stage, lx) in &rules.stages {
            if lx.hits(&line.text) {
                stages.insert(stage.clone());
                hit = true;
            }
        }
        if hit {
            evidence.push(Evidence::whole_message(idx, &line.text));
        }
    }
    let positive = stages.len() >= 2;
    GroomingOutcome {
        positive,
        stages,
        evidence: if positive { evidence } else { Vec::new() },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BullyingOutcome {
    pub positive: bool,
    pub hit_rate: f64,
    pub evidence: Vec<Evidence>,
}

/// Hit rate = inbound messages containing an insult or threat phrase over
/// all inbound messages in the window; positive when `>= min_rate`.
pub fn detect_cyberbullying(window: &[ChatLine], insults: &Lexicon, min_rate: f64) -> BullyingOutcome {
    let inbound: Vec<(usize, &ChatLine)> = window
        .iter()
        .enumerate()
        .filter(|(_, l)| l.direction == Direction::Inbound)
        .collect();
    if inbound.is_empty() {
        return BullyingOutcome {
            positive: false,
            hit_rate: 0.0,
            evidence: Vec::new(),
        };
    }
    let hits: Vec<Evidence> = inbound
        .iter()
        .filter(|(_, l)| insults.hits(&l.text))
        .map(|(i, l)| Evidence::whole_message(*i, &l.text))
        .collect();
    let hit_rate = hits.len() as f64 / inbound.len() as f64;
    let positive = !hits.is_empty() && hit_rate >= min_rate;
    BullyingOutcome {
        positive,
        hit_rate,
        evidence: if positive { hits } else { Vec::new() },
    }
}

/// Most frequent inbound author among the evidence messages.
pub fn likely_perpetrator(window: &[ChatLine], evidence: &[Evidence]) -> Option<String> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for e in evidence {
        if let Some(line) = window.get(e.item) {
            if line.direction == Direction::Inbound {
                *counts.entry(line.from.as_str()).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by_key(|(_, c)| *c)
        .map(|(who, _)| who.to_string())
}

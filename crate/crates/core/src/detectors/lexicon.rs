use std::collections::BTreeMap;

use super::DetectorError;

/// A `term<TAB>weight` table. Terms may be multi-word phrases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, f64>,
}

impl Lexicon {
    pub fn parse(name: &str, raw: &str) -> Result<Self, DetectorError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (term, weight) = match line.split_once('\t') {
                Some((t, w)) => {
                    let w: f64 = w.trim().parse().map_err(|_| DetectorError::Table {
                        table: name.to_string(),
                        line: lineno + 1,
                        reason: format!("bad weight `{w}`"),
                    })?;
                    (t, w)
                }
                None => (line, 1.0),
            };
            let term = normalize(term);
            if term.is_empty() {
                continue;
            }
            entries.insert(term, weight);
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(t, w)| (normalize(t), w))
                .collect(),
        }
    }

    pub fn weight(&self, term: &str) -> Option<f64> {
        self.entries.get(term).copied()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.entries.contains_key(term)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn insert(&mut self, term: &str, weight: f64) {
        self.entries.insert(normalize(term), weight);
    }

    /// Phrases occurring in `text` on word boundaries.
    pub fn matches(&self, text: &str) -> Vec<&str> {
        let padded = format!(" {} ", normalize(text));
        self.entries
            .keys()
            .filter(|phrase| padded.contains(&format!(" {phrase} ")))
            .map(String::as_str)
            .collect()
    }

    pub fn hits(&self, text: &str) -> bool {
        !self.matches(text).is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (term, weight) in &self.entries {
            out.push_str(&format!("{term}\t{weight}\n"));
        }
        out
    }
}

/// Lowercases, maps every character other than alphanumerics and
/// apostrophes to a space, and collapses runs of spaces.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tsv_and_skips_comments() {
        let lx = Lexicon::parse("t", "# c\nHate\t1.0\n\nmad\t0.5\nshut up\t1\n").unwrap();
        assert_eq!(lx.len(), 3);
        assert_eq!(lx.weight("hate"), Some(1.0));
        assert_eq!(lx.weight("mad"), Some(0.5));
    }

    #[test]
    fn rejects_bad_weight() {
        assert!(Lexicon::parse("t", "x\tabc\n").is_err());
    }

    #[test]
    fn phrase_match_respects_word_boundaries() {
        let lx = Lexicon::from_pairs([("meet me", 1.0), ("ass", 1.0)]);
        assert_eq!(lx.matches("ok, MEET me at 5!"), vec!["meet me"]);
        assert!(lx.matches("this is a class assignment").is_empty());
    }
}

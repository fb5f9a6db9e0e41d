//! DATIS message cleaning, sentence segmentation and corpus building.

mod rules;
mod segment;

use std::collections::HashSet;

use thiserror::Error;

pub use rules::{parse_rule_table, write_rule_table, CleaningRule, RuleCategory, RuleSet, DEFAULT_RULES_TSV};
pub use segment::segment_sentences;

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("rule `{id}` has a malformed pattern: {reason}")]
    BadPattern { id: String, reason: String },
    #[error("duplicate rule id `{0}`")]
    DuplicateRule(String),
    #[error("rule table line {line}: {reason}")]
    RuleTable { line: usize, reason: String },
    #[error("raw message body is empty")]
    EmptyMessage,
}

/// A message as received from the feed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMessage {
    body: String,
    pub source_id: Option<String>,
    /// Receive time as an RFC 3339 UTC string.
    pub received_at: Option<String>,
}

impl RawMessage {
    pub fn new(body: impl Into<String>) -> Result<Self, NormalizeError> {
        let body = body.into();
        if body.is_empty() {
            return Err(NormalizeError::EmptyMessage);
        }
        Ok(RawMessage { body, source_id: None, received_at: None })
    }

    pub fn body(&self) -> &str {
        &self.body
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanMessage {
    pub body: String,
    /// Ids of the rules that changed the text, in application order.
    pub applied_rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SentenceCorpus {
    pub sentences: Vec<String>,
    pub deduplicated: bool,
}

impl SentenceCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// One sentence per line, LF endings.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Self {
        SentenceCorpus {
            sentences: text
                .lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
            deduplicated: false,
        }
    }
}

/// Applies every rule once, in order. Rules that leave the text unchanged are
/// not recorded in `applied_rule_ids`.
pub fn clean_message(raw: &RawMessage, rules: &RuleSet) -> CleanMessage {
    let mut body = raw.body.clone();
    let mut applied = Vec::new();
    for rule in &rules.rules {
        let next = rule.regex.replace_all(&body, rule.replacement.as_str());
        if next != body {
            body = next.into_owned();
            applied.push(rule.id.clone());
        }
    }
    // The rule table is editable, so the output invariants are enforced here too.
    let body = enforce_clean_invariants(body);
    CleanMessage { body, applied_rule_ids: applied }
}

fn enforce_clean_invariants(body: String) -> String {
    if !body.contains(['\r', '\n']) && !body.contains("  ") && body.trim() == body {
        return body;
    }
    body.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Builds a one-sentence-per-line corpus, keeping first-occurrence order.
pub fn build_corpus(messages: &[CleanMessage], dedup: bool) -> SentenceCorpus {
    let mut seen: HashSet<String> = HashSet::new();
    let mut sentences = Vec::new();
    for msg in messages {
        for sentence in segment_sentences(msg) {
            if dedup && !seen.insert(sentence.clone()) {
                continue;
            }
            sentences.push(sentence);
        }
    }
    SentenceCorpus { sentences, deduplicated: dedup }
}

/// Splits a raw feed file into records. Records are separated by one or more
/// empty LF-terminated lines; CRLF pairs inside a record are kept verbatim.
pub fn split_raw_records(text: &str) -> Vec<String> {
    let mut records = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        if line == "\n" {
            if !current.is_empty() {
                records.push(std::mem::take(&mut current));
            }
        } else {
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        records.push(current);
    }
    records
}

pub fn read_raw_messages(text: &str) -> Vec<RawMessage> {
    split_raw_records(text).into_iter().filter_map(|body| RawMessage::new(body).ok()).collect()
}

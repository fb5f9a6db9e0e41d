//! Cleaning rule tables.
//!
//! Rules are shipped as TSV data (`data/datis_rules.tsv`) and compiled once.
//! Each rule is a regular expression plus a replacement template in the
//! `regex` crate's `${n}` syntax. The replacement column understands the
//! escapes `\r`, `\n`, `\t` and `\\`.

use std::fmt;
use std::str::FromStr;

use regex::Regex;

use super::NormalizeError;

/// The rule table compiled into the binary.
pub const DEFAULT_RULES_TSV: &str = include_str!("../../data/datis_rules.tsv");

const HEADER: [&str; 5] = ["id", "category", "order", "pattern", "replacement"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleCategory {
    Structural,
    Abbreviation,
    WeatherCode,
    Punctuation,
    Relocation,
}

impl RuleCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleCategory::Structural => "structural",
            RuleCategory::Abbreviation => "abbreviation",
            RuleCategory::WeatherCode => "weather-code",
            RuleCategory::Punctuation => "punctuation",
            RuleCategory::Relocation => "relocation",
        }
    }
}

impl fmt::Display for RuleCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structural" => Ok(RuleCategory::Structural),
            "abbreviation" => Ok(RuleCategory::Abbreviation),
            "weather-code" => Ok(RuleCategory::WeatherCode),
            "punctuation" => Ok(RuleCategory::Punctuation),
            "relocation" => Ok(RuleCategory::Relocation),
            other => Err(format!("unknown rule category `{other}`")),
        }
    }
}

/// One uncompiled row of a rule table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleaningRule {
    pub id: String,
    pub category: RuleCategory,
    pub pattern: String,
    pub replacement: String,
    pub order: u32,
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledRule {
    pub(crate) id: String,
    pub(crate) category: RuleCategory,
    pub(crate) regex: Regex,
    pub(crate) replacement: String,
}

/// An immutable, validated and order-sorted set of cleaning rules.
#[derive(Debug, Clone)]
pub struct RuleSet {
    pub(crate) rules: Vec<CompiledRule>,
}

impl RuleSet {
    /// Compiles `rules`, sorting them by ascending `order` (table position
    /// breaks ties).
    pub fn compile(rules: &[CleaningRule]) -> Result<Self, NormalizeError> {
        let mut seen = std::collections::HashSet::new();
        for rule in rules {
            if !seen.insert(rule.id.as_str()) {
                return Err(NormalizeError::DuplicateRule(rule.id.clone()));
            }
        }
        let mut sorted: Vec<&CleaningRule> = rules.iter().collect();
        sorted.sort_by_key(|r| r.order);
        let compiled = sorted
            .into_iter()
            .map(|rule| {
                let regex = Regex::new(&rule.pattern)
                    .map_err(|e| NormalizeError::BadPattern { id: rule.id.clone(), reason: e.to_string() })?;
                Ok(CompiledRule {
                    id: rule.id.clone(),
                    category: rule.category,
                    regex,
                    replacement: rule.replacement.clone(),
                })
            })
            .collect::<Result<Vec<_>, NormalizeError>>()?;
        Ok(RuleSet { rules: compiled })
    }

    /// Parses and compiles a TSV rule table.
    pub fn from_tsv(text: &str) -> Result<Self, NormalizeError> {
        Self::compile(&parse_rule_table(text)?)
    }

    /// The shipped canonical table.
    pub fn canonical() -> Self {
        Self::from_tsv(DEFAULT_RULES_TSV).expect("shipped rule table is valid")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rule ids and categories in application order.
    pub fn ordered_ids(&self) -> Vec<(&str, RuleCategory)> {
        self.rules.iter().map(|r| (r.id.as_str(), r.category)).collect()
    }
}

/// Parses a rule table with header `id category order pattern replacement`.
pub fn parse_rule_table(text: &str) -> Result<Vec<CleaningRule>, NormalizeError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) =
        lines.next().ok_or_else(|| NormalizeError::RuleTable { line: 1, reason: "empty rule table".into() })?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != HEADER {
        return Err(NormalizeError::RuleTable { line: 1, reason: format!("expected header `{}`", HEADER.join("\\t")) });
    }
    let mut rules = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(NormalizeError::RuleTable {
                line: line_no,
                reason: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let category = fields[1]
            .trim()
            .parse::<RuleCategory>()
            .map_err(|reason| NormalizeError::RuleTable { line: line_no, reason })?;
        let order = fields[2].trim().parse::<u32>().map_err(|e| NormalizeError::RuleTable {
            line: line_no,
            reason: format!("bad order `{}`: {e}", fields[2]),
        })?;
        rules.push(CleaningRule {
            id: fields[0].trim().to_string(),
            category,
            order,
            pattern: fields[3].to_string(),
            replacement: unescape(fields[4]),
        });
    }
    Ok(rules)
}

/// Serializes rules back into the TSV layout.
pub fn write_rule_table(rules: &[CleaningRule]) -> String {
    let mut out = HEADER.join("\t");
    out.push('\n');
    for r in rules {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id, r.category, r.order, r.pattern, escape(&r.replacement)));
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('r') => out.push('\r'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\r' => out.push_str("\\r"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::NliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl FromStr for NliLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Parallel anchor / positive / hard-negative columns.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub anchors: Vec<String>,
    pub positives: Vec<String>,
    pub hard_negatives: Vec<String>,
}

impl TripletBatch {
    pub fn from_triplets(triplets: &[Triplet]) -> Self {
        TripletBatch {
            anchors: triplets.iter().map(|t| t.anchor.clone()).collect(),
            positives: triplets.iter().map(|t| t.positive.clone()).collect(),
            hard_negatives: triplets.iter().map(|t| t.negative.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub sentence1: String,
    pub sentence2: String,
    /// Gold similarity on the 0 to 5 scale.
    pub gold: f64,
}

fn tsv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().delimiter(b'\t').quoting(false).flexible(true).from_reader(text.as_bytes())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, NliError> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| NliError::MissingColumn(name.to_string()))
}

fn field(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<&str, NliError> {
    rec.get(idx).ok_or_else(|| NliError::Row { line, reason: format!("missing field {}", idx + 1) })
}

/// Parses an NLI table. Columns are found by header name; extra columns
/// are ignored.
pub fn parse_nli(text: &str) -> Result<Vec<NliExample>, NliError> {
    let mut rdr = tsv_reader(text);
    let headers = rdr.headers().map_err(|e| NliError::Format(e.to_string()))?.clone();
    let (s1, s2, lab) = (column(&headers, "sentence1")?, column(&headers, "sentence2")?, column(&headers, "label")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NliError::Format(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let premise = field(&rec, s1, line)?.to_string();
        let hypothesis = field(&rec, s2, line)?.to_string();
        let label = field(&rec, lab, line)?.parse::<NliLabel>().map_err(|reason| NliError::Row { line, reason })?;
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(NliError::Row { line, reason: "empty sentence".into() });
        }
        out.push(NliExample { premise, hypothesis, label });
    }
    Ok(out)
}

pub fn load_nli(path: &Path) -> Result<Vec<NliExample>, NliError> {
    let text = std::fs::read_to_string(path).map_err(|e| NliError::Io(path.display().to_string(), e))?;
    parse_nli(&text)
}

/// Parses an STS table with header columns `sentence1`, `sentence2`, `score`.
pub fn parse_sts(text: &str) -> Result<Vec<StsPair>, NliError> {
    let mut rdr = tsv_reader(text);
    let headers = rdr.headers().map_err(|e| NliError::Format(e.to_string()))?.clone();
    let (s1, s2, sc) = (column(&headers, "sentence1")?, column(&headers, "sentence2")?, column(&headers, "score")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NliError::Format(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let raw = field(&rec, sc, line)?;
        let gold: f64 = raw.trim().parse().map_err(|_| NliError::Row { line, reason: format!("bad score `{raw}`") })?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(NliError::Row { line, reason: format!("score {gold} outside [0, 5]") });
        }
        out.push(StsPair {
            sentence1: field(&rec, s1, line)?.to_string(),
            sentence2: field(&rec, s2, line)?.to_string(),
            gold,
        });
    }
    Ok(out)
}

pub fn load_sts(path: &Path) -> Result<Vec<StsPair>, NliError> {
    let text = std::fs::read_to_string(path).map_err(|e| NliError::Io(path.display().to_string(), e))?;
    parse_sts(&text)
}

/// Groups examples by premise (first-occurrence order) and pairs every
/// entailment with every contradiction of the same premise.
pub fn build_triplets(examples: &[NliExample]) -> Vec<Triplet> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Vec<&str>, Vec<&str>)> = HashMap::new();
    for ex in examples {
        let entry = groups.entry(ex.premise.as_str()).or_insert_with(|| {
            order.push(ex.premise.as_str());
            (Vec::new(), Vec::new())
        });
        match ex.label {
            NliLabel::Entailment => entry.0.push(&ex.hypothesis),
            NliLabel::Contradiction => entry.1.push(&ex.hypothesis),
            NliLabel::Neutral => {}
        }
    }
    let mut out = Vec::new();
    for premise in order {
        let (ents, cons) = &groups[premise];
        for e in ents {
            for c in cons {
                out.push(Triplet { anchor: premise.to_string(), positive: e.to_string(), negative: c.to_string() });
            }
        }
    }
    out
}

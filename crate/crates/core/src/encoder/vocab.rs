use std::collections::HashMap;

use super::EncoderError;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const EOS: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[EOS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits on whitespace and peels trailing `.` and `,` off each word as
/// tokens of their own.
pub fn split_words(sentence: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in sentence.split_whitespace() {
        let core = word.trim_end_matches(['.', ',']);
        if !core.is_empty() {
            out.push(core);
        }
        let tail = &word[core.len()..];
        for i in 0..tail.len() {
            out.push(&tail[i..i + 1]);
        }
    }
    out
}

impl Vocab {
    /// Tokens with at least `min_count` occurrences, most frequent first,
    /// ties in byte order.
    pub fn build<S: AsRef<str>>(sentences: &[S], min_count: usize) -> Result<Self, EncoderError> {
        if sentences.is_empty() {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in split_words(s.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(w, c)| c >= min_count.max(1) && !RESERVED.contains(&w)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens =
            RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w.to_string())).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EncoderError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(EncoderError::Vocab(format!(
                "the first {} tokens must be {}",
                RESERVED.len(),
                RESERVED.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(EncoderError::Vocab(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(EncoderError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS]` followed by the word ids, cut to `max_len`.
    pub fn tokenize(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        std::iter::once(CLS).chain(split_words(sentence).into_iter().map(|w| self.id(w))).take(max_len).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EncoderError> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_peels_terminal_punctuation() {
        assert_eq!(split_words("NOTAMS."), vec!["NOTAMS", "."]);
        assert_eq!(split_words("NOTAM, ABA 112.5 MHZ."), vec!["NOTAM", ",", "ABA", "112.5", "MHZ", "."]);
        assert_eq!(split_words(" . "), vec!["."]);
        assert!(split_words("").is_empty());
    }

    #[test]
    fn build_small_corpora() {
        let v = Vocab::build(&["A B", "A"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("A"), 5);
        assert_eq!(v.id("B"), 6);
        let v = Vocab::build(&["A B", "A"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("B"), UNK);
        assert!(matches!(Vocab::build::<&str>(&[], 1), Err(EncoderError::EmptyCorpus)));
    }

    #[test]
    fn frequency_ties_are_lexicographic() {
        let v = Vocab::build(&["Z Y X X"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], &["X", "Y", "Z"]);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::build(&["HAZD WX FOR SLC AREA.", "NOTAMS."], 1).unwrap();
        let ids = v.tokenize("NOTAMS.", 64);
        assert_eq!(ids, vec![CLS, v.id("NOTAMS"), v.id(".")]);
        assert_eq!(v.tokenize("", 64), vec![CLS]);
        let ids = v.tokenize("HAZD WX FOR SLC AREA.", 64);
        let words: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(words, vec!["[CLS]", "HAZD", "WX", "FOR", "SLC", "AREA", "."]);
        assert_eq!(v.tokenize("HAZD WX FOR SLC AREA.", 3).len(), 3);
        assert_eq!(v.tokenize("QQQ", 8), vec![CLS, UNK]);
    }

    #[test]
    fn text_round_trip_and_validation() {
        let v = Vocab::build(&["RWY 27 CLOSED."], 1).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("[CLS]\n[PAD]\n[SEP]\n[UNK]\n[EOS]\n").is_err());
        assert!(Vocab::from_text("[PAD]\n[CLS]\n[SEP]\n[UNK]\n[EOS]\nA\nA\n").is_err());
    }
}

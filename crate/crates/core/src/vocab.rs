//! Word-level vocabulary with special and anchor tokens.
//!
//! Text is split into words (letters, digits, `'`, `-`, `_`), single
//! punctuation marks and anchor tokens. Detokenising puts a space between
//! words, none before punctuation and none between adjacent anchors, so any
//! text already in that canonical spacing round-trips.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG: &str = "<img>";
pub const UNK: &str = "<unk>";
pub const ASSIST: &str = "<assist>";
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, IMG, UNK, ASSIST];

pub const NOR: &str = "[NOR]";
pub const ANO: &str = "[ANO]";
pub const SEG: &str = "[SEG]";
pub const ANCHORS: [&str; 3] = [NOR, ANO, SEG];
pub const ANCHOR_TRIPLE: &str = "[NOR][ANO][SEG]";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '\'' | '-' | '_')
}

/// Splits `text` into token strings.
pub fn split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
        } else if let Some(a) = ANCHORS.iter().find(|a| rest.starts_with(**a)) {
            out.push(&rest[..a.len()]);
            rest = &rest[a.len()..];
        } else if is_word_char(c) {
            let end = rest.find(|c: char| !is_word_char(c)).unwrap_or(rest.len());
            out.push(&rest[..end]);
            rest = &rest[end..];
        } else {
            out.push(&rest[..c.len_utf8()]);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

fn is_anchor(tok: &str) -> bool {
    ANCHORS.contains(&tok)
}

fn is_punct(tok: &str) -> bool {
    let mut cs = tok.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if !is_word_char(c))
}

impl Vocabulary {
    /// Builds a vocabulary over every token of `texts`: specials first, then
    /// the sorted base tokens, then the three anchors as the highest ids.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in split(t) {
                if !is_anchor(w) {
                    words.insert(w.to_owned());
                }
            }
        }
        for s in SPECIALS {
            words.remove(s);
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .chain(ANCHORS.iter().map(|s| s.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("unique by construction")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        let v = Self { tokens, index };
        for (k, s) in SPECIALS.iter().enumerate() {
            if v.id(s) != Some(k) {
                return Err(VocabError::Malformed(format!("{s} must have id {k}")));
            }
        }
        let n = v.len();
        if n < SPECIALS.len() + 3 || ANCHORS.iter().enumerate().any(|(k, a)| v.id(a) != Some(n - 3 + k)) {
            return Err(VocabError::Malformed("anchors must be the last three ids".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    fn special(&self, s: &str) -> usize {
        self.index[s]
    }

    pub fn pad(&self) -> usize {
        self.special(PAD)
    }

    pub fn bos(&self) -> usize {
        self.special(BOS)
    }

    pub fn eos(&self) -> usize {
        self.special(EOS)
    }

    pub fn unk(&self) -> usize {
        self.special(UNK)
    }

    pub fn assist(&self) -> usize {
        self.special(ASSIST)
    }

    /// `[NOR, ANO, SEG]` ids.
    pub fn anchor_ids(&self) -> [usize; 3] {
        let n = self.len();
        [n - 3, n - 2, n - 1]
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            let tok = self.token(id);
            let glue = match prev {
                None => true,
                Some(p) => is_punct(tok) || (is_anchor(p) && is_anchor(tok)),
            };
            if !glue {
                out.push(' ');
            }
            out.push_str(tok);
            prev = Some(tok);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), VocabError> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INSTR: &str = "Please segment the anomalies in this image.";

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts([INSTR, "Sure, it is [NOR][ANO][SEG].", "a small hole located on the upper part"])
    }

    #[test]
    fn round_trips() {
        let v = vocab();
        for t in [INSTR, "Sure, it is [NOR][ANO][SEG].", ""] {
            assert_eq!(v.detokenize(&v.tokenize(t)), t);
        }
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn anchors_are_highest_and_in_order() {
        let v = vocab();
        let ids = v.tokenize(ANCHOR_TRIPLE);
        assert_eq!(ids, v.anchor_ids().to_vec());
        assert_eq!(ids, vec![v.len() - 3, v.len() - 2, v.len() - 1]);
        assert_eq!(v.tokenize("zebra"), vec![v.unk()]);
    }

    #[test]
    fn splitting_rules() {
        assert_eq!(split("Sure, it's [NOR][ANO] ok."), vec!["Sure", ",", "it's", "[NOR]", "[ANO]", "ok", "."]);
        assert_eq!(split("  well-lit  "), vec!["well-lit"]);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vocab();
        v.write(&p).unwrap();
        assert_eq!(Vocabulary::read(&p).unwrap(), v);
        fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::read(&p).is_err());
    }
}

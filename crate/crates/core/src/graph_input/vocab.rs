use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Dense token ↔ id mapping. Ids 0..4 are PAD, UNK, CLS, SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from the specials followed by `words` in the given order;
    /// duplicates and specials are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self { tokens: Vec::new(), token_to_id: HashMap::new() };
        for s in [PAD, UNK, CLS, SEP] {
            v.insert(s);
        }
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    /// Vocabulary over every whitespace token of the given texts, sorted.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Self::new(words)
    }

    fn insert(&mut self, tok: &str) {
        if !self.token_to_id.contains_key(tok) {
            self.token_to_id.insert(tok.to_string(), self.tokens.len() as u32);
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.token_to_id.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() })?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        let specials = [PAD, UNK, CLS, SEP];
        if file.tokens.len() < 4 || file.tokens[..4].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::Data(format!("{}: vocabulary must start with the special tokens", path.display())));
        }
        let v = Self::new(&file.tokens[4..]);
        if v.len() != file.tokens.len() {
            return Err(Error::Data(format!("{}: duplicate tokens in vocabulary", path.display())));
        }
        Ok(v)
    }
}

/// Whitespace tokenization; out-of-vocabulary words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    text.split_whitespace().map(|w| vocab.id(w).unwrap_or(vocab.unk_id())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct_and_dense() {
        let v = Vocabulary::new(["a", "b", "a"]);
        assert_eq!(v.len(), 6);
        let ids = [v.pad_id(), v.unk_id(), v.cls_id(), v.sep_id()];
        assert_eq!(ids, [0, 1, 2, 3]);
        assert_eq!(v.id(CLS), Some(2));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
            assert_eq!(v.token(i as u32), Some(t.as_str()));
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::new(["x", "y", "z", "a"]);
        assert!(tokenize("", &v).is_empty());
        let a = v.id("a").unwrap();
        assert_eq!(tokenize("a a", &v), vec![a, a]);
        let (x, z) = (v.id("x").unwrap(), v.id("z").unwrap());
        assert_eq!(tokenize("x  q\tz", &v), vec![x, v.unk_id(), z]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = Vocabulary::new(["alpha", "beta"]);
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "UNK", "<eos>"];

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True for ids that never take part in metrics (padding and end of sequence).
pub fn is_structural(id: u32) -> bool {
    id == PAD || id == EOS
}

/// Word vocabulary with reserved ids `PAD=0, UNK=1, EOS=2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `max_size - 3` most frequent tokens; frequency ties are
    /// broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::InvalidArgument(format!("vocabulary size must be at least 3, got {max_size}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary from tokens in id order; the first three must be the reserved ones.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("vocabulary must start with <pad>, UNK, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    /// Token ids of `text` followed by `EOS`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.push(EOS);
        ids
    }

    /// Visible tokens up to the first `EOS`, skipping padding.
    pub fn words(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.words(ids).join(" ")
    }

    /// FNV-1a over the token list, used to pair checkpoints with vocabularies.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.tokens.iter().map(String::as_str))
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

pub(crate) fn fingerprint<'a>(items: impl Iterator<Item = &'a str>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for item in items {
        for b in item.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Closed set of speaker / utterance attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl AttributeVocab {
    /// Distinct names in lexicographic order.
    pub fn build<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut all: Vec<String> = names.into_iter().map(str::to_string).collect();
        all.sort();
        all.dedup();
        if all.is_empty() {
            return Err(Error::Empty("attribute set"));
        }
        Self::from_names(all)
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate attribute {n:?}")));
            }
        }
        Ok(AttributeVocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownAttribute {
            name: name.to_string(),
            valid: self.names.join(", "),
        })
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.names.iter().map(String::as_str))
    }
}

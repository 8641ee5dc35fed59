use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{AttributeVocab, Vocab};
use crate::error::{Error, Result};

/// Roles assigned to unlabeled turns, alternating from the first utterance.
pub const DEFAULT_ROLES: [&str; 2] = ["questioner", "helper"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub text: String,
}

impl RawTurn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        RawTurn {
            speaker: Some(speaker.into()),
            text: text.into(),
        }
    }
}

/// One JSONL line: `{"turns":[{"speaker": "...", "text": "..."}, ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDialogue {
    pub turns: Vec<RawTurn>,
}

impl RawDialogue {
    /// Speaker of turn `i`, falling back to the alternating two-role convention.
    pub fn speaker(&self, i: usize) -> &str {
        self.turns[i]
            .speaker
            .as_deref()
            .unwrap_or(DEFAULT_ROLES[i % DEFAULT_ROLES.len()])
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        (0..self.turns.len()).map(|i| self.speaker(i))
    }
}

/// Encoded utterance: token ids ending in `EOS` plus the speaker attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Turn {
    pub tokens: Vec<u32>,
    pub attribute: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn validate(&self, vocab_size: usize, attribute_count: usize) -> Result<()> {
        for turn in &self.turns {
            if turn.tokens.is_empty() {
                return Err(Error::Empty("turn tokens"));
            }
            if let Some(&id) = turn.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, size: vocab_size });
            }
            if turn.attribute as usize >= attribute_count {
                return Err(Error::AttributeOutOfRange {
                    id: turn.attribute,
                    count: attribute_count,
                });
            }
        }
        Ok(())
    }

    /// Number of target words over all responses (turns 2..N).
    pub fn response_words(&self) -> usize {
        self.turns.iter().skip(1).map(|t| t.tokens.len()).sum()
    }
}

pub struct LoadedCorpus {
    pub dialogues: Vec<RawDialogue>,
    pub dropped: usize,
}

/// Reads a JSONL corpus. Dialogues with fewer than two turns are dropped
/// with a warning.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut dialogues = Vec::new();
    let mut dropped = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: RawDialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if d.turns.len() < 2 {
            log::warn!("{}:{}: dialogue has {} turn(s), dropped", path.display(), n + 1, d.turns.len());
            dropped += 1;
            continue;
        }
        dialogues.push(d);
    }
    Ok(LoadedCorpus { dialogues, dropped })
}

pub fn write_corpus(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Encodes a raw dialogue; speakers outside `attributes` are an error.
pub fn encode_dialogue(raw: &RawDialogue, vocab: &Vocab, attributes: &AttributeVocab) -> Result<Dialogue> {
    let turns = raw
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(Turn {
                tokens: vocab.encode(&t.text),
                attribute: attributes.id(raw.speaker(i))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dialogue { turns })
}

pub fn encode_all(raw: &[RawDialogue], vocab: &Vocab, attributes: &AttributeVocab) -> Result<Vec<Dialogue>> {
    raw.iter().map(|d| encode_dialogue(d, vocab, attributes)).collect()
}

pub fn decode_dialogue(d: &Dialogue, vocab: &Vocab, attributes: &AttributeVocab) -> RawDialogue {
    RawDialogue {
        turns: d
            .turns
            .iter()
            .map(|t| RawTurn {
                speaker: attributes.name(t.attribute).map(str::to_string),
                text: vocab.decode(&t.tokens),
            })
            .collect(),
    }
}

/// Vocabularies over a raw corpus.
pub fn build_vocabularies(raw: &[RawDialogue], max_vocab: usize) -> Result<(Vocab, AttributeVocab)> {
    let vocab = Vocab::build(raw.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())), max_vocab)?;
    let attributes = AttributeVocab::build(raw.iter().flat_map(|d| d.speakers()))?;
    Ok((vocab, attributes))
}

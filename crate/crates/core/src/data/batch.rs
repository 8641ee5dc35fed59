use super::corpus::{Dialogue, Turn};
use super::vocab::PAD;
use crate::error::{Error, Result};

/// Turn `i` of every dialogue in a batch, padded to the longest utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedTurn {
    /// `[batch][max_len]` token ids, `PAD` beyond each utterance.
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub attributes: Vec<u32>,
    /// False where the dialogue has fewer than `i + 1` turns.
    pub present: Vec<bool>,
}

impl PaddedTurn {
    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn padding_cells(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| !m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub turns: Vec<PaddedTurn>,
    pub size: usize,
}

impl PaddedBatch {
    fn from_dialogues(dialogues: &[Dialogue]) -> Self {
        let max_turns = dialogues.iter().map(|d| d.turns.len()).max().unwrap_or(0);
        let turns = (0..max_turns)
            .map(|i| {
                let width = dialogues
                    .iter()
                    .filter_map(|d| d.turns.get(i))
                    .map(|t| t.tokens.len())
                    .max()
                    .unwrap_or(0);
                let mut out = PaddedTurn {
                    tokens: Vec::with_capacity(dialogues.len()),
                    mask: Vec::with_capacity(dialogues.len()),
                    attributes: Vec::with_capacity(dialogues.len()),
                    present: Vec::with_capacity(dialogues.len()),
                };
                for d in dialogues {
                    let (toks, attr) = match d.turns.get(i) {
                        Some(t) => (t.tokens.as_slice(), t.attribute),
                        None => (&[][..], 0),
                    };
                    let mut row = toks.to_vec();
                    row.resize(width, PAD);
                    out.mask.push((0..width).map(|j| j < toks.len()).collect());
                    out.tokens.push(row);
                    out.attributes.push(attr);
                    out.present.push(i < d.turns.len());
                }
                out
            })
            .collect();
        PaddedBatch {
            turns,
            size: dialogues.len(),
        }
    }

    /// Recovers dialogue `b` by dropping masked cells and absent turns.
    pub fn dialogue(&self, b: usize) -> Dialogue {
        let turns = self
            .turns
            .iter()
            .filter(|t| t.present[b])
            .map(|t| Turn {
                tokens: t.tokens[b]
                    .iter()
                    .zip(&t.mask[b])
                    .filter(|(_, &m)| m)
                    .map(|(&id, _)| id)
                    .collect(),
                attribute: t.attributes[b],
            })
            .collect();
        Dialogue { turns }
    }

    pub fn dialogues(&self) -> Vec<Dialogue> {
        (0..self.size).map(|b| self.dialogue(b)).collect()
    }

    /// Number of unmasked response words (turns after the first).
    pub fn response_words(&self) -> usize {
        self.turns.iter().skip(1).flat_map(|t| t.mask.iter().flatten()).filter(|&&m| m).count()
    }
}

/// Consecutive batches of at most `batch_size` dialogues; the last may be short.
pub fn batch_and_pad(dialogues: &[Dialogue], batch_size: usize) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(dialogues.chunks(batch_size).map(PaddedBatch::from_dialogues).collect())
}

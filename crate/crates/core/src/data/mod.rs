//! Corpus ingestion, vocabularies, batching and the synthetic persona corpus.

mod batch;
mod corpus;
mod synth;
mod vocab;

pub use batch::{batch_and_pad, PaddedBatch, PaddedTurn};
pub use corpus::{
    build_vocabularies, decode_dialogue, encode_all, encode_dialogue, load_corpus, write_corpus, Dialogue,
    LoadedCorpus, RawDialogue, RawTurn, Turn, DEFAULT_ROLES,
};
pub use synth::{
    generate_synthetic, split_corpus, write_synthetic, StyleClassifier, Styles, SynthCorpus, SynthFiles, SynthSpec,
    MAX_PERSONAS, PERSONA_NAMES,
};
pub use vocab::{is_structural, tokenize, AttributeVocab, Vocab, EOS, PAD, RESERVED, UNK};

//! Synthetic persona corpus with a decidable ground truth.
//!
//! Every turn reads `{opener} {verb} the {noun} {closer}`. The content pair of
//! a turn is a fixed permutation of the previous turn's pair, and the
//! opener/closer come from the speaker's private style words, so both the
//! response content and its persona can be checked mechanically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_corpus, RawDialogue, RawTurn};
use super::vocab::tokenize;
use crate::error::{Error, Result};
use crate::seed;

pub const PERSONA_NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
pub const MAX_PERSONAS: usize = PERSONA_NAMES.len();

const STYLE_WORDS: [[&str; 4]; MAX_PERSONAS] = [
    ["indeed", "certainly", "please", "kindly"],
    ["yeah", "dude", "man", "lol"],
    ["alas", "verily", "forsooth", "prithee"],
    ["okay", "so", "right", "cool"],
    ["hmm", "well", "perhaps", "maybe"],
    ["sir", "madam", "respectfully", "sincerely"],
    ["wow", "gosh", "yay", "hooray"],
    ["ahoy", "arr", "matey", "aye"],
];

const VERBS: [&str; 24] = [
    "fix", "open", "move", "find", "clean", "paint", "check", "build", "sell", "lift", "wash", "read", "drop",
    "pack", "fold", "cut", "sort", "mend", "fill", "lock", "test", "load", "ship", "tune",
];

const NOUNS: [&str; 40] = [
    "door", "car", "lamp", "desk", "boat", "sink", "roof", "fence", "bike", "clock", "drum", "kite", "box",
    "shelf", "chair", "radio", "phone", "stove", "truck", "piano", "tent", "oven", "gate", "bell", "wheel",
    "brush", "rope", "jar", "map", "coat", "vase", "sled", "drill", "cart", "pump", "kettle", "ladder", "mirror",
    "bucket", "hammer",
];

/// Parameters of the synthetic corpus. `vocab_size` counts the distinct
/// words the corpus may use (reserved ids excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub personas: usize,
    pub vocab_size: usize,
    pub dialogues: usize,
    pub turns: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            personas: 2,
            vocab_size: 40,
            dialogues: 200,
            turns: 3,
            seed: 7,
        }
    }
}

/// Persona name → private style tokens.
pub type Styles = BTreeMap<String, Vec<String>>;

struct Persona {
    name: String,
    openers: [String; 2],
    closers: [String; 2],
}

pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub dialogues: Vec<RawDialogue>,
    pub styles: Styles,
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
}

fn word(list: &[&str], i: usize) -> String {
    if i < list.len() {
        list[i].to_string()
    } else {
        format!("{}{}", list[i % list.len()], i / list.len())
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.personas == 0 || self.personas > MAX_PERSONAS {
            return Err(Error::InvalidArgument(format!(
                "persona count must be in 1..={MAX_PERSONAS}, got {}",
                self.personas
            )));
        }
        if self.turns < 2 {
            return Err(Error::InvalidArgument(format!("dialogues need at least 2 turns, got {}", self.turns)));
        }
        if self.dialogues == 0 {
            return Err(Error::InvalidArgument("dialogue count must be positive".into()));
        }
        let style = 4 * self.personas + 1;
        if self.vocab_size < style + 4 {
            return Err(Error::InvalidArgument(format!(
                "vocab size {} too small: {} personas need {} style/function words plus at least 4 content words",
                self.vocab_size, self.personas, style
            )));
        }
        Ok(())
    }

    fn content_split(&self) -> (usize, usize) {
        let content = self.vocab_size - 4 * self.personas - 1;
        let verbs = (content / 3).max(2);
        (verbs, content - verbs)
    }
}

/// Builds the corpus in memory; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let (nv, nn) = spec.content_split();
    let verbs: Vec<String> = (0..nv).map(|i| word(&VERBS, i)).collect();
    let nouns: Vec<String> = (0..nn).map(|i| word(&NOUNS, i)).collect();
    let personas: Vec<Persona> = (0..spec.personas)
        .map(|p| {
            let w = STYLE_WORDS[p].map(str::to_string);
            Persona {
                name: PERSONA_NAMES[p].to_string(),
                openers: [w[0].clone(), w[1].clone()],
                closers: [w[2].clone(), w[3].clone()],
            }
        })
        .collect();

    let mut rng = seed::rng(&[spec.seed, 0x5717]);
    let mut verb_perm: Vec<usize> = (0..nv).collect();
    let mut noun_perm: Vec<usize> = (0..nn).collect();
    verb_perm.shuffle(&mut rng);
    noun_perm.shuffle(&mut rng);

    let dialogues = (0..spec.dialogues)
        .map(|_| {
            let mut v = rng.random_range(0..nv);
            let mut n = rng.random_range(0..nn);
            let turns = (0..spec.turns)
                .map(|t| {
                    if t > 0 {
                        v = verb_perm[v];
                        n = noun_perm[n];
                    }
                    let p = &personas[rng.random_range(0..personas.len())];
                    let text = format!("{} {} the {} {}", p.openers[n % 2], verbs[v], nouns[n], p.closers[v % 2]);
                    RawTurn::new(p.name.clone(), text)
                })
                .collect();
            RawDialogue { turns }
        })
        .collect();

    let styles = personas
        .iter()
        .map(|p| (p.name.clone(), p.openers.iter().chain(&p.closers).cloned().collect()))
        .collect();
    Ok(SynthCorpus {
        spec: spec.clone(),
        dialogues,
        styles,
        verbs,
        nouns,
    })
}

/// Train/dev/test split in 94/3/3 proportions, train first.
pub fn split_corpus<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let held = (items.len() as f64 * 0.03).round() as usize;
    let train = items.len().saturating_sub(2 * held);
    (
        items[..train].to_vec(),
        items[train..train + held].to_vec(),
        items[train + held..].to_vec(),
    )
}

pub struct SynthFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub styles: PathBuf,
}

/// Writes `{stem}.train`, `{stem}.dev`, `{stem}.test` and `{stem}.styles.json`
/// under `dir`, creating it if needed.
pub fn write_synthetic(corpus: &SynthCorpus, dir: &Path, stem: &str) -> Result<SynthFiles> {
    fs::create_dir_all(dir)?;
    let files = SynthFiles {
        train: dir.join(format!("{stem}.train")),
        dev: dir.join(format!("{stem}.dev")),
        test: dir.join(format!("{stem}.test")),
        styles: dir.join(format!("{stem}.styles.json")),
    };
    let (train, dev, test) = split_corpus(&corpus.dialogues);
    write_corpus(&files.train, &train)?;
    write_corpus(&files.dev, &dev)?;
    write_corpus(&files.test, &test)?;
    let mut json = serde_json::to_string_pretty(&corpus.styles)?;
    json.push('\n');
    fs::write(&files.styles, json)?;
    Ok(files)
}

/// Labels text by the persona whose style tokens occur most often; no label
/// when no style token occurs or the maximum is shared.
#[derive(Clone, Debug)]
pub struct StyleClassifier {
    names: Vec<String>,
    owner: HashMap<String, usize>,
}

impl StyleClassifier {
    pub fn new(styles: &Styles) -> Result<Self> {
        let mut owner = HashMap::new();
        let names: Vec<String> = styles.keys().cloned().collect();
        for (i, words) in styles.values().enumerate() {
            for w in words {
                if let Some(prev) = owner.insert(w.clone(), i) {
                    return Err(Error::InvalidArgument(format!(
                        "style token {w:?} shared by {} and {}",
                        names[prev], names[i]
                    )));
                }
            }
        }
        Ok(StyleClassifier { names, owner })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let styles: Styles = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::new(&styles)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn classify_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Option<&str> {
        let mut counts = vec![0usize; self.names.len()];
        for t in tokens {
            if let Some(&i) = self.owner.get(t.as_ref()) {
                counts[i] += 1;
            }
        }
        let best = *counts.iter().max()?;
        if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
            return None;
        }
        counts.iter().position(|&c| c == best).map(|i| self.names[i].as_str())
    }

    pub fn classify(&self, text: &str) -> Option<&str> {
        self.classify_tokens(&tokenize(text))
    }
}

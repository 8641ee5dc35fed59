//! WebAssembly bindings for the demo page. Everything here takes and
//! returns plain strings and numbers, so it also runs natively.

use phredgan::autodiff::ParamStore;
use phredgan::data::{
    build_vocabularies, encode_all, generate_synthetic, AttributeVocab, Dialogue, StyleClassifier, SynthSpec, Turn,
    Vocab,
};
use phredgan::inference::{generate_ranked, InferenceConfig};
use phredgan::metrics::{bleu4, distinct_n, rouge2_f1};
use phredgan::model::{sample_noise, ModelConfig, NoiseMode, NoiseSpec, PhredModel};
use phredgan::seed;
use phredgan::training::{batches_per_epoch, epoch_order, train_step, Progress, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct TextMetrics {
    bleu4: f64,
    rouge2_f1: f64,
    distinct1: f64,
    distinct2: f64,
    pairs: usize,
}

/// Corpus metrics over line-paired hypotheses and references, as JSON.
pub fn text_metrics(hypotheses: &str, references: &str) -> Result<String, String> {
    let split = |s: &str| -> Vec<Vec<String>> {
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(phredgan::data::tokenize)
            .collect()
    };
    let (hyps, refs) = (split(hypotheses), split(references));
    if hyps.len() != refs.len() {
        return Err(format!("{} hypotheses but {} references", hyps.len(), refs.len()));
    }
    let m = TextMetrics {
        bleu4: bleu4(&hyps, &refs).map_err(|e| e.to_string())?,
        rouge2_f1: rouge2_f1(&hyps, &refs).map_err(|e| e.to_string())?,
        distinct1: distinct_n(&hyps, 1).map_err(|e| e.to_string())?,
        distinct2: distinct_n(&hyps, 2).map_err(|e| e.to_string())?,
        pairs: hyps.len(),
    };
    Ok(serde_json::to_string(&m).expect("plain struct"))
}

#[wasm_bindgen]
pub fn metrics(hypotheses: &str, references: &str) -> Result<String, JsError> {
    text_metrics(hypotheses, references).map_err(js_err)
}

/// `steps × dim` noise values, row-major, for `mode` ("utterance" or "word").
#[wasm_bindgen]
pub fn noise_samples(mode: &str, alpha: f64, dim: usize, steps: usize, seed_value: u32) -> Result<Vec<f64>, JsError> {
    let mode: NoiseMode = mode.parse().map_err(js_err)?;
    let spec = NoiseSpec::new(mode, alpha, dim).map_err(js_err)?;
    let z = sample_noise(&spec, steps, &mut seed::rng(&[seed_value as u64])).map_err(js_err)?;
    Ok(z.iter().flat_map(|t| t.data().iter().copied()).collect())
}

#[derive(Serialize)]
struct Reply {
    text: String,
    rank_score: f64,
    word_probs: Vec<f64>,
    style: Option<String>,
}

/// A small phredGAN trained in the page on a two-persona synthetic corpus.
#[wasm_bindgen]
pub struct DemoModel {
    model: PhredModel,
    store: ParamStore,
    vocab: Vocab,
    attributes: AttributeVocab,
    corpus: Vec<Dialogue>,
    classifier: StyleClassifier,
    train: TrainConfig,
    at: Progress,
}

#[wasm_bindgen]
impl DemoModel {
    #[wasm_bindgen(constructor)]
    pub fn new(dialogues: usize, hidden: usize, seed_value: u32) -> Result<DemoModel, JsError> {
        let synth = generate_synthetic(&SynthSpec {
            dialogues,
            seed: seed_value as u64,
            ..SynthSpec::default()
        })
        .map_err(js_err)?;
        let (vocab, attributes) = build_vocabularies(&synth.dialogues, 1000).map_err(js_err)?;
        let corpus = encode_all(&synth.dialogues, &vocab, &attributes).map_err(js_err)?;
        let mut cfg = ModelConfig::desk(vocab.len(), attributes.len());
        cfg.hidden = hidden;
        cfg.embed = hidden;
        cfg.attr_embed = hidden;
        cfg.noise.dim = hidden;
        cfg.layers = 1;
        let mut store = ParamStore::new();
        let model = PhredModel::new(cfg, &mut store, &mut seed::rng(&[seed_value as u64, 0x1417])).map_err(js_err)?;
        Ok(DemoModel {
            model,
            store,
            vocab,
            attributes,
            corpus,
            classifier: StyleClassifier::new(&synth.styles).map_err(js_err)?,
            train: TrainConfig {
                learning_rate: 1.0,
                seed: seed_value as u64,
                ..TrainConfig::default()
            },
            at: Progress::start(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.at.epoch
    }

    pub fn personas(&self) -> Vec<String> {
        self.attributes.names().to_vec()
    }

    /// A few corpus lines, for the page to show what the model learns from.
    pub fn sample_dialogue(&self, index: usize) -> String {
        let d = &self.corpus[index % self.corpus.len()];
        d.turns
            .iter()
            .map(|t| format!("{}: {}", self.attributes.name(t.attribute).unwrap_or("?"), self.vocab.decode(&t.tokens)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// One epoch of gated adversarial training; returns the mean step MLE loss.
    pub fn train_epoch(&mut self) -> Result<f64, JsError> {
        let n = self.corpus.len();
        let bs = self.train.batch_size;
        let order = epoch_order(n, self.train.seed, self.at.epoch);
        let mut total = 0.0;
        let steps = batches_per_epoch(n, bs);
        for b in 0..steps {
            let lo = b as usize * bs;
            let batch: Vec<Dialogue> = order[lo..(lo + bs).min(n)].iter().map(|&i| self.corpus[i].clone()).collect();
            let at = Progress { batch: b, ..self.at };
            total += train_step(&self.model, &mut self.store, &batch, &self.train, at).map_err(js_err)?.mle;
            self.at.step += 1;
        }
        self.at = Progress {
            epoch: self.at.epoch + 1,
            batch: 0,
            step: self.at.step,
        };
        Ok(total / steps as f64)
    }

    /// Ranked replies of `persona` to `text`, spoken by the other persona, as JSON.
    pub fn respond(&self, persona: &str, text: &str, samples: usize, alpha: f64) -> Result<String, JsError> {
        let responder = self.attributes.id(persona).map_err(js_err)?;
        let speaker = (responder + 1) % self.attributes.len() as u32;
        let turns = [Turn {
            tokens: self.vocab.encode(text),
            attribute: speaker,
        }];
        let cfg = InferenceConfig {
            alpha,
            samples,
            max_len: 12,
            seed: 1,
        };
        let ranked = generate_ranked(&self.model, &self.store, &turns, responder, &cfg, 0).map_err(js_err)?;
        let replies: Vec<Reply> = ranked
            .into_iter()
            .map(|c| {
                let text = self.vocab.decode(&c.tokens);
                Reply {
                    style: self.classifier.classify(&text).map(str::to_string),
                    text,
                    rank_score: c.rank_score,
                    word_probs: c.word_probs,
                }
            })
            .collect();
        Ok(serde_json::to_string(&replies).expect("plain struct"))
    }
}

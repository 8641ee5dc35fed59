//! Perplexity, corpus BLEU-4, macro ROUGE-2 F1 and distinct-n.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Graph, ParamStore, LOG_FLOOR};
use crate::data::{is_structural, Dialogue};
use crate::error::{Error, Result};
use crate::model::{sample_noise, NoiseSpec, PhredModel};
use crate::seed;

/// Drops `PAD` and `EOS` before n-gram counting.
pub fn visible(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| !is_structural(t)).collect()
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap<T: Eq + Hash>(hyp: &HashMap<&[T], usize>, r: &HashMap<&[T], usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

fn check_corpus<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("metric corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

/// Aggregate n-gram statistics behind a BLEU score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuCounts {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_counts<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuCounts> {
    check_corpus(hyps, refs)?;
    let mut c = BleuCounts {
        matches: [0; 4],
        totals: [0; 4],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        c.hyp_len += h.len();
        c.ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            c.matches[n - 1] += clipped_overlap(&hc, &rc);
            c.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(c)
}

impl BleuCounts {
    /// Geometric mean of modified precisions times the brevity penalty.
    /// When any of the 2- to 4-gram match counts is zero, orders 2..4 get
    /// add-one smoothing.
    pub fn score(&self) -> f64 {
        if self.matches[0] == 0 || self.hyp_len == 0 {
            return 0.0;
        }
        let smooth = self.matches[1..].iter().any(|&m| m == 0);
        let mut log_p = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..4 {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            log_p += if smooth { ((m + 1.0) / (t + 1.0)).ln() } else { (m / t).ln() };
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * (log_p / 4.0).exp()
    }
}

pub fn bleu4<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_counts(hyps, refs)?.score())
}

/// Bigram F1 of one pair; 0 when either side has no bigram.
pub fn rouge2_pair<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    let hc = ngram_counts(hyp, 2);
    let rc = ngram_counts(reference, 2);
    let (nh, nr) = (hyp.len().saturating_sub(1), reference.len().saturating_sub(1));
    if nh == 0 || nr == 0 {
        return 0.0;
    }
    // 2PR / (P + R) with P = m / nh and R = m / nr, in one division
    let overlap = clipped_overlap(&hc, &rc);
    2.0 * overlap as f64 / (nh + nr) as f64
}

/// Macro average of per-pair ROUGE-2 F1.
pub fn rouge2_f1<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge2_pair(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Unique n-grams over total n-grams across all hypotheses; 0 when none exist.
pub fn distinct_n<T: Eq + Hash + Clone>(hyps: &[Vec<T>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument(format!("distinct-n needs n ≥ 1, got {n}")));
    }
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
}

/// Noise stream of dialogue `index` during teacher-forced evaluation.
pub fn eval_rng(seed_value: u64, index: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(&[seed_value, index as u64, 0xe7a1])
}

/// Summed teacher-forced NLL under the full softmax, and the word count.
/// Noise for dialogue `i` is drawn from [`eval_rng`]`(seed, i)`.
pub fn teacher_forced_nll(
    model: &PhredModel,
    store: &ParamStore,
    dialogues: &[Dialogue],
    noise: &NoiseSpec,
    seed_value: u64,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut words = 0;
    for (i, d) in dialogues.iter().enumerate() {
        model.check_dialogue(d)?;
        let mut rng = eval_rng(seed_value, i);
        let mut g = Graph::new();
        let mut ctx = model.initial_context(&mut g);
        for pair in d.turns.windows(2) {
            let (turn, next) = (&pair[0], &pair[1]);
            let state = model.encode_turn(&mut g, store, &ctx, &turn.tokens, turn.attribute)?;
            ctx = state.context.clone();
            let z = sample_noise(noise, next.tokens.len(), &mut rng)?;
            let hidden = model.generator_forward(&mut g, store, &state, next.attribute, &next.tokens, &z)?;
            for (&h, &t) in hidden.iter().zip(&next.tokens) {
                let logits = model.logits(&mut g, store, h)?;
                let p = softmax_row(g.value(logits).data())[t as usize];
                total -= p.max(LOG_FLOOR).ln();
                words += 1;
            }
        }
    }
    Ok((total, words))
}

pub fn perplexity(
    model: &PhredModel,
    store: &ParamStore,
    dialogues: &[Dialogue],
    noise: &NoiseSpec,
    seed_value: u64,
) -> Result<f64> {
    let (total, words) = teacher_forced_nll(model, store, dialogues, noise, seed_value)?;
    if words == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    Ok((total / words as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity: f64,
    pub bleu4: f64,
    pub rouge2_f1: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub counts: BleuCounts,
    pub pairs: usize,
    pub words: usize,
}

impl MetricsReport {
    /// Text metrics over token ids (structural ids removed here).
    pub fn from_text(perplexity: f64, words: usize, hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<Self> {
        let hyps: Vec<Vec<u32>> = hyps.iter().map(|h| visible(h)).collect();
        let refs: Vec<Vec<u32>> = refs.iter().map(|r| visible(r)).collect();
        Ok(MetricsReport {
            perplexity,
            bleu4: bleu4(&hyps, &refs)?,
            rouge2_f1: rouge2_f1(&hyps, &refs)?,
            distinct1: distinct_n(&hyps, 1)?,
            distinct2: distinct_n(&hyps, 2)?,
            counts: bleu_counts(&hyps, &refs)?,
            pairs: hyps.len(),
            words,
        })
    }

    pub fn table(&self) -> String {
        let rows = [
            ("perplexity", format!("{:.4}", self.perplexity)),
            ("bleu-4", format!("{:.6}", self.bleu4)),
            ("rouge-2 f1", format!("{:.6}", self.rouge2_f1)),
            ("distinct-1", format!("{:.6}", self.distinct1)),
            ("distinct-2", format!("{:.6}", self.distinct2)),
            ("pairs", self.pairs.to_string()),
            ("words", self.words.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<12}{v:>14}\n"));
        }
        s
    }
}

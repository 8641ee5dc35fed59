//! Greedy autoregressive decoding, discriminator reranking of L noise
//! samples, and the linear search over the inference noise variance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, LOG_FLOOR};
use crate::data::{Dialogue, Turn, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{sample_noise, EncoderSnapshot, NoiseSpec, PhredModel};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub samples: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 1.0,
            samples: 64,
            max_len: 20,
            seed: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sample count L must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max decode length must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("noise variance must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Twice the longest response in `dialogues`.
pub fn max_decode_len(dialogues: &[Dialogue]) -> usize {
    2 * dialogues
        .iter()
        .flat_map(|d| d.turns.iter().skip(1))
        .map(|t| t.tokens.len())
        .max()
        .unwrap_or(1)
}

/// A decoded response with its per-word discriminator probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub word_probs: Vec<f64>,
    pub rank_score: f64,
}

impl Candidate {
    pub fn new(tokens: Vec<u32>, word_probs: Vec<f64>) -> Result<Self> {
        if tokens.len() != word_probs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} word probabilities",
                tokens.len(),
                word_probs.len()
            )));
        }
        let rank_score = rank_score(&word_probs)?;
        Ok(Candidate {
            tokens,
            word_probs,
            rank_score,
        })
    }
}

/// Mean of the clamped log word probabilities.
pub fn rank_score(word_probs: &[f64]) -> Result<f64> {
    if word_probs.is_empty() {
        return Err(Error::Empty("word probabilities"));
    }
    Ok(word_probs.iter().map(|p| p.max(LOG_FLOOR).ln()).sum::<f64>() / word_probs.len() as f64)
}

/// Stable sort by rank score, highest first.
pub fn rank_candidates(mut candidates: Vec<Candidate>) -> Vec<Candidate> {
    candidates.sort_by(|a, b| b.rank_score.total_cmp(&a.rank_score));
    candidates
}

/// Argmax decoding from a fixed encoder state. Stops after emitting `EOS`
/// (which is kept) or after `max_len` tokens.
pub fn greedy_decode(
    model: &PhredModel,
    store: &ParamStore,
    state: &EncoderSnapshot,
    responder: u32,
    noise: &[Tensor],
    max_len: usize,
) -> Result<Vec<u32>> {
    if noise.len() < max_len {
        return Err(Error::InvalidArgument(format!("{} noise steps for max length {max_len}", noise.len())));
    }
    let mut g = Graph::new();
    let enc = state.restore(&mut g);
    let mut cursor = model.start_decoder(&mut g, store, &enc, responder)?;
    let mut out = Vec::new();
    let mut prev = EOS;
    for z in noise.iter().take(max_len) {
        let h = model.decoder_step(&mut g, store, &mut cursor, prev, z)?;
        let logits = model.logits(&mut g, store, h)?;
        prev = g.value(logits).argmax() as u32;
        out.push(prev);
        if prev == EOS {
            break;
        }
    }
    Ok(out)
}

/// Discriminator word probabilities for `response` under a fixed encoder state.
pub fn score_response(
    model: &PhredModel,
    store: &ParamStore,
    state: &EncoderSnapshot,
    responder: u32,
    response: &[u32],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let enc = state.restore(&mut g);
    let p = model.discriminator_score(&mut g, store, &enc, responder, response)?;
    Ok(g.value(p).data().to_vec())
}

pub fn encode_snapshot(model: &PhredModel, store: &ParamStore, turns: &[Turn]) -> Result<EncoderSnapshot> {
    let mut g = Graph::new();
    let s = model.encode_context(&mut g, store, turns)?;
    Ok(s.snapshot(&g))
}

/// L noise draws → L greedy decodes → discriminator-ranked candidates.
/// Sample `l` of stream `stream` always uses the same noise.
pub fn generate_ranked(
    model: &PhredModel,
    store: &ParamStore,
    turns: &[Turn],
    responder: u32,
    cfg: &InferenceConfig,
    stream: u64,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let snap = encode_snapshot(model, store, turns)?;
    let spec = model.config().noise.with_alpha(cfg.alpha);
    let candidates = (0..cfg.samples)
        .map(|l| {
            let mut rng = seed::rng(&[cfg.seed, stream, l as u64]);
            let z = sample_noise(&spec, cfg.max_len, &mut rng)?;
            let tokens = greedy_decode(model, store, &snap, responder, &z, cfg.max_len)?;
            let probs = score_response(model, store, &snap, responder, &tokens)?;
            Candidate::new(tokens, probs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_candidates(candidates))
}

/// A dialogue prefix with the attribute and ground truth of the next turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub id: usize,
    pub turns: Vec<Turn>,
    pub responder: u32,
    pub reference: Vec<u32>,
}

/// Every prefix `turns[..i]`, `i ≥ 1`, of every dialogue, numbered in order.
pub fn contexts(dialogues: &[Dialogue]) -> Vec<Context> {
    let mut out = Vec::new();
    for d in dialogues {
        for i in 1..d.turns.len() {
            out.push(Context {
                id: out.len(),
                turns: d.turns[..i].to_vec(),
                responder: d.turns[i].attribute,
                reference: d.turns[i].tokens.clone(),
            });
        }
    }
    out
}

/// The default grid {1, 2, …, 30}.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=30).map(f64::from).collect()
}

/// Index of the smallest score; equal scores resolve to the smaller grid value.
pub fn argmin_with_tiebreak(grid: &[f64], scores: &[f64]) -> Result<usize> {
    if grid.is_empty() || grid.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} grid points, {} scores", grid.len(), scores.len())));
    }
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSearch {
    pub best_alpha: f64,
    pub best_loss: f64,
    /// `(α, mean −ln D(G(·)))` per grid point.
    pub losses: Vec<(f64, f64)>,
    /// Other grid points whose loss equals the best.
    pub ties: Vec<f64>,
}

/// Linear search over `grid` with L = 1. Context `c` uses the same standard
/// normal draw at every α, scaled by √α.
pub fn search_noise_variance(
    model: &PhredModel,
    store: &ParamStore,
    dev: &[Context],
    grid: &[f64],
    max_len: usize,
    seed_value: u64,
) -> Result<NoiseSearch> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if grid.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument("noise variances must be positive".into()));
    }
    let snaps = dev
        .iter()
        .map(|c| encode_snapshot(model, store, &c.turns))
        .collect::<Result<Vec<_>>>()?;
    let unit = NoiseSpec {
        alpha: 1.0,
        ..model.config().noise
    };
    let base = dev
        .iter()
        .map(|c| sample_noise(&unit, max_len, &mut seed::rng(&[seed_value, c.id as u64, 0xa1fa])))
        .collect::<Result<Vec<_>>>()?;
    let losses = grid
        .iter()
        .map(|&alpha| {
            let sd = alpha.sqrt();
            let mut total = 0.0;
            for ((c, snap), z) in dev.iter().zip(&snaps).zip(&base) {
                let scaled: Vec<Tensor> =
                    z.iter().map(|t| Tensor::vector(t.data().iter().map(|v| v * sd).collect())).collect();
                let tokens = greedy_decode(model, store, snap, c.responder, &scaled, max_len)?;
                let probs = score_response(model, store, snap, c.responder, &tokens)?;
                total -= rank_score(&probs)?;
            }
            Ok(total / dev.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    noise_search_result(grid, &losses)
}

pub(crate) fn noise_search_result(grid: &[f64], losses: &[f64]) -> Result<NoiseSearch> {
    let best = argmin_with_tiebreak(grid, losses)?;
    let ties = grid
        .iter()
        .zip(losses)
        .enumerate()
        .filter(|&(i, (_, &l))| i != best && l == losses[best])
        .map(|(_, (&a, _))| a)
        .collect();
    Ok(NoiseSearch {
        best_alpha: grid[best],
        best_loss: losses[best],
        losses: grid.iter().copied().zip(losses.iter().copied()).collect(),
        ties,
    })
}

/// One line of the candidate dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub context_id: usize,
    pub rank: usize,
    pub tokens: Vec<String>,
    pub rank_score: f64,
    pub word_probs: Vec<f64>,
}

pub fn candidate_records(context_id: usize, ranked: &[Candidate], vocab: &Vocab) -> Vec<CandidateRecord> {
    ranked
        .iter()
        .enumerate()
        .map(|(rank, c)| CandidateRecord {
            context_id,
            rank: rank + 1,
            tokens: c.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
            rank_score: c.rank_score,
            word_probs: c.word_probs.clone(),
        })
        .collect()
}

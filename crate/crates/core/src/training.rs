//! Losses, discriminator accuracy and the gated adversarial update loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, ParamStore, Var, LOG_FLOOR};
use crate::data::Dialogue;
use crate::error::{Error, Result};
use crate::layers::{mle_token_loss, SoftmaxMode};
use crate::model::{sample_noise, NoiseSpec, PhredModel};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_g: f64,
    pub lambda_m: f64,
    pub acc_d_th: f64,
    pub acc_g_th: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Variance of the noise injected while training; inference uses the model's α.
    pub noise_variance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_g: 1.0,
            lambda_m: 1.0,
            acc_d_th: 0.99,
            acc_g_th: 0.75,
            learning_rate: 0.5,
            clip_norm: 5.0,
            epochs: 10,
            batch_size: 8,
            seed: 1,
            noise_variance: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.acc_g_th && self.acc_g_th <= self.acc_d_th && self.acc_d_th <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < acc_g_th ≤ acc_d_th ≤ 1, got {} and {}",
                self.acc_g_th, self.acc_d_th
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.lambda_g < 0.0 || self.lambda_m < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config(format!("noise variance must be positive, got {}", self.noise_variance)));
        }
        Ok(())
    }

    /// `(d_updated, g_adv_updated)` for a given discriminator accuracy.
    pub fn gates(&self, d_acc: f64) -> (bool, bool) {
        (d_acc < self.acc_d_th, d_acc >= self.acc_g_th)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub mle: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    pub d_acc: f64,
    pub d_updated: bool,
    pub g_adv_updated: bool,
}

impl StepReport {
    pub const HEADER: &'static str = "step\tmle\tg-adv\td-loss\td-acc\tflags";

    pub fn flags(&self) -> String {
        format!(
            "d{}g{}",
            if self.d_updated { '+' } else { '-' },
            if self.g_adv_updated { '+' } else { '-' }
        )
    }

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{}",
            self.step,
            self.mle,
            self.g_adv,
            self.d_loss,
            self.d_acc,
            self.flags()
        )
    }
}

fn clamp_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Mean negative log-likelihood of `targets` under per-step distributions,
/// counting only positions where `mask` is true.
pub fn mle_loss(dists: &[Vec<f64>], targets: &[u32], mask: &[bool]) -> Result<f64> {
    if dists.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "mle_loss: {} distributions, {} targets, {} mask cells",
            dists.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut words = 0usize;
    for ((d, &t), &m) in dists.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let p = *d.get(t as usize).ok_or(Error::TokenOutOfRange { id: t, size: d.len() })?;
        total -= clamp_ln(p);
        words += 1;
    }
    if words == 0 {
        return Err(Error::Empty("mle_loss targets"));
    }
    Ok(total / words as f64)
}

/// `(d_loss, g_adv_loss)` with `d_loss = −mean ln D(real) − mean ln(1 − D(fake))`
/// and the non-saturating `g_adv_loss = −mean ln D(fake)`.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Empty("discriminator probabilities"));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let real = mean(d_real, &|p| -clamp_ln(p));
    let fake = mean(d_fake, &|p| -clamp_ln(1.0 - p));
    let g_adv = mean(d_fake, &|p| -clamp_ln(p));
    Ok((real + fake, g_adv))
}

/// Word-level accuracy at threshold 0.5; exactly 0.5 counts as wrong.
pub fn discriminator_accuracy(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    let n = d_real.len() + d_fake.len();
    if n == 0 {
        return Err(Error::Empty("discriminator probabilities"));
    }
    let correct = d_real.iter().filter(|&&p| p > 0.5).count() + d_fake.iter().filter(|&&p| p < 0.5).count();
    Ok(correct as f64 / n as f64)
}

/// Loss terms of one dialogue, summed over its response words.
#[derive(Clone, Debug)]
pub struct DialogueLosses {
    /// Σ −ln P(target), under the model's training softmax.
    pub nll_sum: Var,
    /// Σ ln D(real word).
    pub real_log_sum: Var,
    /// Σ ln D(fake word).
    pub fake_log_sum: Var,
    /// Σ ln(1 − D(fake word)).
    pub fake_log1m_sum: Var,
    pub words: usize,
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
}

/// Forward record of one dialogue, kept until the batch's gates are known.
struct DialogueTerms {
    graph: Graph,
    losses: DialogueLosses,
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dialogue_forward(
    model: &PhredModel,
    store: &ParamStore,
    d: &Dialogue,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<DialogueTerms> {
    let mut graph = Graph::new();
    let losses = dialogue_losses(&mut graph, model, store, d, noise, rng)?;
    Ok(DialogueTerms { graph, losses })
}

/// Teacher-forced pass over every response of `d`. Fake responses are drawn
/// word by word from the generator's teacher-forced distributions.
pub fn dialogue_losses(
    g: &mut Graph,
    model: &PhredModel,
    store: &ParamStore,
    d: &Dialogue,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<DialogueLosses> {
    let mode = model.config().softmax_mode();
    let mut ctx = model.initial_context(g);
    let mut nll = Vec::new();
    let mut real_log = Vec::new();
    let mut fake_log = Vec::new();
    let mut fake_log1m = Vec::new();
    let mut real = Vec::new();
    let mut fake = Vec::new();
    let mut words = 0;
    for pair in d.turns.windows(2) {
        let (turn, next) = (&pair[0], &pair[1]);
        let state = model.encode_turn(g, store, &ctx, &turn.tokens, turn.attribute)?;
        ctx = state.context.clone();
        let z = sample_noise(noise, next.tokens.len(), rng)?;
        let hidden = model.generator_forward(g, store, &state, next.attribute, &next.tokens, &z)?;
        let mut sampled = Vec::with_capacity(hidden.len());
        for (&h, &t) in hidden.iter().zip(&next.tokens) {
            let logits = model.logits(g, store, h)?;
            let probs = crate::autodiff::softmax_row(g.value(logits).data());
            sampled.push(sample_index(&probs, rng) as u32);
            let loss = match mode {
                SoftmaxMode::Full => mle_token_loss(g, logits, t as usize)?,
                SoftmaxMode::Sampled { .. } => model.head().nll(g, store, h, t as usize, mode, rng)?,
            };
            nll.push(loss);
        }
        words += next.tokens.len();
        let dr = model.discriminator_score(g, store, &state, next.attribute, &next.tokens)?;
        let df = model.discriminator_score(g, store, &state, next.attribute, &sampled)?;
        real.extend_from_slice(g.value(dr).data());
        fake.extend_from_slice(g.value(df).data());
        let lr = g.log(dr)?;
        real_log.push(g.sum(lr)?);
        let lf = g.log(df)?;
        fake_log.push(g.sum(lf)?);
        let om = g.one_minus(df)?;
        let l1m = g.log(om)?;
        fake_log1m.push(g.sum(l1m)?);
    }
    let nll_sum = g.add_n(&nll)?;
    let real_log_sum = g.add_n(&real_log)?;
    let fake_log_sum = g.add_n(&fake_log)?;
    let fake_log1m_sum = g.add_n(&fake_log1m)?;
    Ok(DialogueLosses {
        nll_sum,
        real_log_sum,
        fake_log_sum,
        fake_log1m_sum,
        words,
        real,
        fake,
    })
}

/// Position of a step inside a run; every random stream is derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    /// Batch index within the epoch.
    pub batch: u64,
    /// Global step counter.
    pub step: u64,
}

impl Progress {
    pub fn start() -> Self {
        Progress {
            epoch: 0,
            batch: 0,
            step: 0,
        }
    }
}

/// One gated update over `batch`: discriminator, then generator.
pub fn train_step(
    model: &PhredModel,
    store: &mut ParamStore,
    batch: &[Dialogue],
    cfg: &TrainConfig,
    at: Progress,
) -> Result<StepReport> {
    train_step_gated(model, store, batch, cfg, at, |acc| acc)
}

/// [`train_step`] with the measured discriminator accuracy passed through
/// `gate_acc` before gating, so the gating logic can be scripted.
pub fn train_step_gated(
    model: &PhredModel,
    store: &mut ParamStore,
    batch: &[Dialogue],
    cfg: &TrainConfig,
    at: Progress,
    gate_acc: impl Fn(f64) -> f64,
) -> Result<StepReport> {
    cfg.validate()?;
    let noise = model.config().noise.with_alpha(cfg.noise_variance);
    let mut terms = Vec::with_capacity(batch.len());
    for (i, d) in batch.iter().enumerate() {
        if d.turns.len() < 2 {
            log::warn!("step {}: dialogue {i} has {} turn(s), skipped", at.step, d.turns.len());
            continue;
        }
        model.check_dialogue(d)?;
        let mut rng = seed::rng(&[cfg.seed, at.epoch, at.batch, i as u64]);
        terms.push(dialogue_forward(model, store, d, &noise, &mut rng)?);
    }
    if terms.is_empty() {
        return Err(Error::Empty("training batch (every dialogue has fewer than 2 turns)"));
    }

    let words: usize = terms.iter().map(|t| t.losses.words).sum();
    let w = words as f64;
    let value = |t: &DialogueTerms, v: Var| t.graph.value(v).item().expect("scalar");
    let mle = terms.iter().map(|t| value(t, t.losses.nll_sum)).sum::<f64>() / w;
    let real: Vec<f64> = terms.iter().flat_map(|t| t.losses.real.iter().copied()).collect();
    let fake: Vec<f64> = terms.iter().flat_map(|t| t.losses.fake.iter().copied()).collect();
    let (d_loss, g_adv) = adversarial_losses(&real, &fake)?;
    let d_acc = discriminator_accuracy(&real, &fake)?;
    for (what, v) in [("mle", mle), ("g-adv", g_adv), ("d-loss", d_loss)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: at.step,
                what: format!("{what} = {v}"),
            });
        }
    }
    let (d_updated, g_adv_updated) = cfg.gates(gate_acc(d_acc));

    let mut total = ParamGrads::zeros_like(store);
    let mut g_grads = ParamGrads::zeros_like(store);
    let mut d_grads = ParamGrads::zeros_like(store);
    for t in &mut terms {
        let (g, l) = (&mut t.graph, &t.losses);
        let mut parts = Vec::new();
        if cfg.lambda_m > 0.0 {
            parts.push(g.scale(l.nll_sum, cfg.lambda_m / w)?);
        }
        if g_adv_updated && cfg.lambda_g > 0.0 {
            parts.push(g.scale(l.fake_log_sum, -cfg.lambda_g / w)?);
        }
        if !parts.is_empty() {
            let obj = g.add_n(&parts)?;
            g.backward(obj)?.accumulate_params(g, &mut g_grads, 1.0);
        }
        if d_updated {
            let both = g.add(l.real_log_sum, l.fake_log1m_sum)?;
            let obj = g.scale(both, -1.0 / w)?;
            g.backward(obj)?.accumulate_params(g, &mut d_grads, 1.0);
        }
    }
    total.add_scaled(&g_grads, 1.0, store, |grp| grp.in_generator());
    total.add_scaled(&d_grads, 1.0, store, |grp| grp.in_discriminator());
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: at.step,
            what: "gradient".into(),
        });
    }
    total.clip_global_norm(cfg.clip_norm);
    store.sgd_step(&total, cfg.learning_rate, |_| true);

    Ok(StepReport {
        step: at.step,
        mle,
        g_adv,
        d_loss,
        d_acc,
        d_updated,
        g_adv_updated,
    })
}

/// Dialogue order for an epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(&[seed, epoch, 0xe90c]));
    order
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Hooks called by [`train`]. `after_step` receives the position of the next step.
pub trait TrainObserver {
    fn after_step(&mut self, _report: &StepReport, _store: &ParamStore, _next: Progress) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _epoch: u64, _store: &ParamStore, _next: Progress) -> Result<()> {
        Ok(())
    }

    /// Checked after every step; `true` ends the run early.
    fn should_stop(&self) -> bool {
        false
    }
}

/// Collects report lines.
#[derive(Default)]
pub struct ReportLog {
    pub reports: Vec<StepReport>,
}

impl TrainObserver for ReportLog {
    fn after_step(&mut self, report: &StepReport, _: &ParamStore, _: Progress) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }
}

impl ReportLog {
    pub fn lines(&self) -> String {
        let mut s = String::from(StepReport::HEADER);
        s.push('\n');
        for r in &self.reports {
            s.push_str(&r.log_line());
            s.push('\n');
        }
        s
    }
}

/// Runs epochs `from.epoch..cfg.epochs`, starting at batch `from.batch` of
/// the first one. Returns the position after the last step.
pub fn train(
    model: &PhredModel,
    store: &mut ParamStore,
    corpus: &[Dialogue],
    cfg: &TrainConfig,
    from: Progress,
    observer: &mut dyn TrainObserver,
) -> Result<Progress> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let per_epoch = batches_per_epoch(corpus.len(), cfg.batch_size);
    let mut at = from;
    while at.epoch < cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, at.epoch);
        while at.batch < per_epoch {
            let lo = at.batch as usize * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(corpus.len());
            let batch: Vec<Dialogue> = order[lo..hi].iter().map(|&i| corpus[i].clone()).collect();
            let report = train_step(model, store, &batch, cfg, at)?;
            log::debug!("{}", report.log_line());
            let next = Progress {
                batch: at.batch + 1,
                step: at.step + 1,
                ..at
            };
            observer.after_step(&report, store, next)?;
            at = next;
            if observer.should_stop() {
                return Ok(at);
            }
        }
        at = Progress {
            epoch: at.epoch + 1,
            batch: 0,
            step: at.step,
        };
        observer.after_epoch(at.epoch - 1, store, at)?;
    }
    Ok(at)
}

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use phredgan::autodiff::{finite_difference_check, Graph, ParamGroup, ParamStore, Tensor, Var};
use phredgan::data::{
    build_vocabularies, encode_all, generate_synthetic, split_corpus, AttributeVocab, Dialogue, StyleClassifier,
    SynthSpec, Turn, Vocab, EOS, PAD,
};
use phredgan::inference::{
    contexts, default_alpha_grid, encode_snapshot, generate_ranked, greedy_decode, max_decode_len, rank_candidates,
    score_response, search_noise_variance, Candidate, Context, InferenceConfig,
};
use phredgan::layers::{AdditiveAttention, BiGru, Dense, Embedding, GruStack, OutputHead, SoftmaxMode};
use phredgan::metrics::{bleu4, distinct_n, eval_rng, perplexity, rouge2_f1, rouge2_pair, teacher_forced_nll};
use phredgan::model::{sample_noise, ModelConfig, NoiseMode, PhredModel};
use phredgan::seed;
use phredgan::training::{
    adversarial_losses, dialogue_losses, mle_loss, train, train_step_gated, Progress, TrainConfig, TrainObserver,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.value(id);
        let data = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        store.set(id, t).unwrap();
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Σ tanh(v) ⊙ w for a fixed random `w`: a nonlinear scalar readout.
fn readout(g: &mut Graph, v: Var, w: &Tensor) -> phredgan::Result<Var> {
    let t = g.tanh(v)?;
    let w = g.constant(w.clone());
    let m = g.mul(t, w)?;
    g.sum(m)
}

fn tiny_model(vocab: usize, attrs: usize, mode: NoiseMode, rng: &mut impl Rng) -> (PhredModel, ParamStore) {
    let cfg = ModelConfig {
        vocab_size: vocab,
        attributes: attrs,
        hidden: 3,
        embed: 3,
        attr_embed: 2,
        layers: 2,
        noise: phredgan::model::NoiseSpec { mode, alpha: 1.0, dim: 2 },
        softmax_samples: 4,
    };
    let mut store = ParamStore::new();
    let model = PhredModel::new(cfg, &mut store, rng).unwrap();
    randomize(&mut store, rng);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.value(id).clone();
        let scaled = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 0.5).collect()).unwrap();
        store.set(id, scaled).unwrap();
    }
    (model, store)
}

fn random_dialogue(rng: &mut impl Rng, vocab: usize, attrs: usize, turns: usize, max_len: usize) -> Dialogue {
    Dialogue {
        turns: (0..turns)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(3..vocab as u32)).collect();
                tokens.push(EOS);
                Turn {
                    tokens,
                    attribute: rng.random_range(0..attrs as u32),
                }
            })
            .collect(),
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut record = |name: &str, err: phredgan::Result<f64>| match err {
        Ok(e) => {
            worst = worst.max(e);
            checks += 1;
        }
        Err(e) => panic!("{name}: {e}"),
    };
    let eps = 1e-5;
    for s in 0..3u64 {
        let mut rng = seed::rng(&[0x9c, s]);

        let mut store = ParamStore::new();
        let dense = Dense::new(&mut store, &mut rng, "dense", 4, 3, ParamGroup::Shared).unwrap();
        randomize(&mut store, &mut rng);
        let (x, w) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        record("dense", finite_difference_check(&store, eps, |g, st| {
            let xv = g.constant(x.clone());
            let y = dense.forward(g, st, xv)?;
            readout(g, y, &w)
        }));

        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, &mut rng, "emb", 6, 3, ParamGroup::Shared).unwrap();
        randomize(&mut store, &mut rng);
        let ids = [1usize, 4, 1, 5];
        let w = rand_vec(&mut rng, 3);
        record("embedding", finite_difference_check(&store, eps, |g, st| {
            let parts = ids
                .iter()
                .map(|&i| {
                    let e = emb.lookup(g, st, i)?;
                    readout(g, e, &w)
                })
                .collect::<phredgan::Result<Vec<_>>>()?;
            g.add_n(&parts)
        }));

        let mut store = ParamStore::new();
        let gru = GruStack::new(&mut store, &mut rng, "gru", 3, 4, 2, ParamGroup::Shared).unwrap();
        randomize(&mut store, &mut rng);
        let xs: Vec<Tensor> = (0..4).map(|_| rand_vec(&mut rng, 3)).collect();
        let w = rand_vec(&mut rng, 8);
        record("gru", finite_difference_check(&store, eps, |g, st| {
            let mut h = gru.zero_state(g);
            for x in &xs {
                let xv = g.constant(x.clone());
                h = gru.step(g, st, &h, xv)?;
            }
            let flat = h.stacked(g)?;
            let flat = g.reshape(flat, vec![8])?;
            readout(g, flat, &w)
        }));

        let mut store = ParamStore::new();
        let bi = BiGru::new(&mut store, &mut rng, "bi", 2, 3, 2, ParamGroup::Shared).unwrap();
        randomize(&mut store, &mut rng);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_vec(&mut rng, 2)).collect();
        let w = rand_vec(&mut rng, 6);
        record("bigru", finite_difference_check(&store, eps, |g, st| {
            let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let enc = bi.encode(g, st, &inputs, None)?;
            let mut parts = enc
                .outputs
                .iter()
                .map(|&o| readout(g, o, &w))
                .collect::<phredgan::Result<Vec<_>>>()?;
            let summary = enc.summary(g)?;
            parts.push(readout(g, summary, &w)?);
            g.add_n(&parts)
        }));

        let mut store = ParamStore::new();
        let att = AdditiveAttention::new(&mut store, &mut rng, "att", 3, 4, 5, ParamGroup::Shared).unwrap();
        randomize(&mut store, &mut rng);
        let keys: Vec<Tensor> = (0..4).map(|_| rand_vec(&mut rng, 4)).collect();
        let q = rand_vec(&mut rng, 3);
        let w = rand_vec(&mut rng, 4);
        record("attention", finite_difference_check(&store, eps, |g, st| {
            let ks: Vec<Var> = keys.iter().map(|k| g.constant(k.clone())).collect();
            let mem = att.prepare(g, st, &ks)?;
            let qv = g.constant(q.clone());
            let (ctx, _) = att.attend(g, st, &mem, qv)?;
            readout(g, ctx, &w)
        }));

        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut store, &mut rng, "out", 3, 12, ParamGroup::Generator).unwrap();
        randomize(&mut store, &mut rng);
        let h = rand_vec(&mut rng, 3);
        for mode in [SoftmaxMode::Full, SoftmaxMode::Sampled { samples: 4 }] {
            record("output head", finite_difference_check(&store, eps, |g, st| {
                let mut fixed = seed::rng(&[s, 77]);
                let hv = g.constant(h.clone());
                head.nll(g, st, hv, 5, mode, &mut fixed)
            }));
        }

        // the full phredGAN objective through encoder, generator and discriminator
        for mode in [NoiseMode::Utterance, NoiseMode::Word] {
            let (model, store) = tiny_model(9, 2, mode, &mut rng);
            let dialogue = random_dialogue(&mut rng, 9, 2, 3, 3);
            record("end to end", finite_difference_check(&store, eps, |g, st| {
                let mut fixed = seed::rng(&[s, 78]);
                let noise = model.config().noise;
                let l = dialogue_losses(g, &model, st, &dialogue, &noise, &mut fixed)?;
                let w = l.words as f64;
                let a = g.scale(l.nll_sum, 1.0 / w)?;
                let b = g.scale(l.fake_log_sum, -1.0 / w)?;
                let both = g.add(l.real_log_sum, l.fake_log1m_sum)?;
                let c = g.scale(both, -1.0 / w)?;
                g.add_n(&[a, b, c])
            }));
        }
    }
    let elapsed = secs(t);
    outcome(
        worst < 1e-4 && elapsed <= 60.0,
        format!("max relative error {worst:.2e} over {checks} checks in {elapsed:.1}s (need < 1e-4, ≤ 60s)"),
    )
}

fn loss_identities() -> Outcome {
    // MLE of a uniform model: directly, and through a model with a zeroed output head
    let v = 17;
    let dists = vec![vec![1.0 / v as f64; v]; 5];
    let direct = mle_loss(&dists, &[3, 0, 16, 7, 7], &[true; 5]).unwrap();
    let mut rng = seed::rng(&[0x105]);
    let (model, mut store) = tiny_model(v, 2, NoiseMode::Utterance, &mut rng);
    for id in [model.head().weight(), model.head().bias()] {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let ds: Vec<Dialogue> = (0..4).map(|_| random_dialogue(&mut rng, v, 2, 3, 5)).collect();
    let (nll, words) = teacher_forced_nll(&model, &store, &ds, &model.config().noise, 0).unwrap();
    let through_model = nll / words as f64;
    let ln_v = (v as f64).ln();
    let (d, g) = adversarial_losses(&[0.5; 9], &[0.5; 9]).unwrap();
    let ln2 = 2f64.ln();
    let errs = [
        (direct - ln_v).abs(),
        (through_model - ln_v).abs(),
        (d - 2.0 * ln2).abs(),
        (g - ln2).abs(),
    ];
    outcome(
        errs[0] <= 1e-9 && errs[1] <= 1e-9 && errs[2] <= 1e-12 && errs[3] <= 1e-12,
        format!(
            "|MLE − ln V| = {:.1e} (direct), {:.1e} (model); |d − 2 ln 2| = {:.1e}; |g − ln 2| = {:.1e}",
            errs[0], errs[1], errs[2], errs[3]
        ),
    )
}

fn gating() -> Outcome {
    let mut rng = seed::rng(&[0x6a7e]);
    let (model, mut store) = tiny_model(9, 2, NoiseMode::Utterance, &mut rng);
    let batch: Vec<Dialogue> = (0..3).map(|_| random_dialogue(&mut rng, 9, 2, 3, 4)).collect();
    let cfg = TrainConfig::default();
    let mut at = Progress::start();
    let mut flags = Vec::new();
    for acc in [0.5, 0.8, 0.995] {
        let r = train_step_gated(&model, &mut store, &batch, &cfg, at, |_| acc).unwrap();
        flags.push((r.d_updated, r.g_adv_updated));
        at.step += 1;
        at.batch += 1;
    }
    let want = [(true, false), (true, true), (false, true)];
    outcome(flags == want, format!("flags for D_acc 0.5, 0.8, 0.995: {flags:?}"))
}

struct EarlyStop<'a> {
    model: &'a PhredModel,
    dialogues: &'a [Dialogue],
    every: u64,
    best: Option<(u64, f64, f64)>,
    stop: bool,
}

fn greedy_exact(model: &PhredModel, store: &ParamStore, dialogues: &[Dialogue]) -> f64 {
    let ml = max_decode_len(dialogues);
    let ctxs = contexts(dialogues);
    let hits = ctxs
        .iter()
        .filter(|c| {
            let snap = encode_snapshot(model, store, &c.turns).unwrap();
            let z = sample_noise(&model.config().noise, ml, &mut seed::rng(&[c.id as u64, 0x9eed])).unwrap();
            greedy_decode(model, store, &snap, c.responder, &z, ml).unwrap() == c.reference
        })
        .count();
    hits as f64 / ctxs.len() as f64
}

impl TrainObserver for EarlyStop<'_> {
    fn after_epoch(&mut self, epoch: u64, store: &ParamStore, _: Progress) -> phredgan::Result<()> {
        let done = epoch + 1;
        if done % self.every == 0 {
            let (nll, words) = teacher_forced_nll(self.model, store, self.dialogues, &self.model.config().noise, 0)?;
            let nll = nll / words as f64;
            let exact = greedy_exact(self.model, store, self.dialogues);
            self.best = Some((done, nll, exact));
            self.stop = nll < 0.5 && exact >= 0.9;
        }
        Ok(())
    }

    fn should_stop(&self) -> bool {
        self.stop
    }
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let synth = generate_synthetic(&SynthSpec {
        dialogues: 50,
        ..SynthSpec::default()
    })
    .unwrap();
    let (vocab, attrs) = build_vocabularies(&synth.dialogues, 1000).unwrap();
    let ds = encode_all(&synth.dialogues, &vocab, &attrs).unwrap();
    let cfg = ModelConfig::desk(vocab.len(), attrs.len());
    let mut store = ParamStore::new();
    let model = PhredModel::new(cfg, &mut store, &mut seed::rng(&[1, 0x1417])).unwrap();
    let tc = TrainConfig {
        learning_rate: 1.0,
        batch_size: 8,
        epochs: 200,
        ..TrainConfig::default()
    };
    let mut obs = EarlyStop {
        model: &model,
        dialogues: &ds,
        every: 10,
        best: None,
        stop: false,
    };
    train(&model, &mut store, &ds, &tc, Progress::start(), &mut obs).unwrap();
    let elapsed = secs(t);
    let (epochs, nll, exact) = obs.best.unwrap();
    outcome(
        nll < 0.5 && exact >= 0.9 && epochs <= 200 && elapsed <= 600.0,
        format!(
            "hidden 32, {epochs} epochs, {elapsed:.0}s: teacher-forced NLL {nll:.4} nats/word, greedy exact {:.0}% (need < 0.5, ≥ 90%, ≤ 200 epochs, ≤ 600s)",
            100.0 * exact
        ),
    )
}

struct PersonaRun {
    model: PhredModel,
    store: ParamStore,
    vocab: Vocab,
    attrs: AttributeVocab,
    classifier: StyleClassifier,
    dev: Vec<Dialogue>,
    held_out: Vec<Context>,
    max_len: usize,
    train_secs: f64,
}

fn persona_run() -> PersonaRun {
    let t = Instant::now();
    let synth = generate_synthetic(&SynthSpec {
        dialogues: 2000,
        ..SynthSpec::default()
    })
    .unwrap();
    let (vocab, attrs) = build_vocabularies(&synth.dialogues, 1000).unwrap();
    let all = encode_all(&synth.dialogues, &vocab, &attrs).unwrap();
    let (train_set, dev, test) = split_corpus(&all);
    let cfg = ModelConfig::desk(vocab.len(), attrs.len());
    let mut store = ParamStore::new();
    let model = PhredModel::new(cfg, &mut store, &mut seed::rng(&[1, 0x1417])).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    struct Silent;
    impl TrainObserver for Silent {}
    train(&model, &mut store, &train_set, &tc, Progress::start(), &mut Silent).unwrap();
    let held: Vec<Dialogue> = dev.iter().chain(&test).cloned().collect();
    let held_out: Vec<Context> = contexts(&held).into_iter().take(200).collect();
    PersonaRun {
        max_len: max_decode_len(&train_set),
        model,
        store,
        vocab,
        attrs,
        classifier: StyleClassifier::new(&synth.styles).unwrap(),
        dev,
        held_out,
        train_secs: secs(t),
    }
}

fn persona_separation(run: &PersonaRun, ranked: &mut Vec<Vec<Candidate>>) -> Outcome {
    let t = Instant::now();
    let cfg = InferenceConfig {
        max_len: run.max_len,
        ..InferenceConfig::default()
    };
    let label = |c: &Candidate| run.classifier.classify(&run.vocab.decode(&c.tokens)).map(str::to_string);
    let (mut labelled, mut flipped) = (0, 0);
    for c in &run.held_out {
        let own = generate_ranked(&run.model, &run.store, &c.turns, c.responder, &cfg, c.id as u64).unwrap();
        let other = 1 - c.responder;
        let swapped = generate_ranked(&run.model, &run.store, &c.turns, other, &cfg, c.id as u64).unwrap();
        let (a, b) = (label(&own[0]), label(&swapped[0]));
        if a.as_deref() == run.attrs.name(c.responder) {
            labelled += 1;
        }
        if b.as_deref() == run.attrs.name(other) && a != b {
            flipped += 1;
        }
        ranked.push(own);
        ranked.push(swapped);
    }
    let n = run.held_out.len() as f64;
    let (acc, flip) = (labelled as f64 / n, flipped as f64 / n);
    outcome(
        acc >= 0.8 && flip >= 0.6 && run.train_secs <= 1800.0,
        format!(
            "2000 dialogues trained in {:.0}s; L=64 top responses on {} held-out contexts: persona match {:.1}%, flip on swap {:.1}% (need ≥ 80%, ≥ 60%, ≤ 1800s); decoding {:.0}s",
            run.train_secs,
            run.held_out.len(),
            100.0 * acc,
            100.0 * flip,
            secs(t)
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn discriminator_sanity(run: &PersonaRun) -> Outcome {
    let mut rng = seed::rng(&[0xd15c]);
    let v = run.vocab.len() as u32;
    let mut wins = 0;
    for c in &run.held_out {
        let snap = encode_snapshot(&run.model, &run.store, &c.turns).unwrap();
        let real = score_response(&run.model, &run.store, &snap, c.responder, &c.reference).unwrap();
        let random: Vec<u32> = (0..c.reference.len())
            .map(|_| loop {
                let t = rng.random_range(0..v);
                if t != PAD {
                    break t;
                }
            })
            .collect();
        let fake = score_response(&run.model, &run.store, &snap, c.responder, &random).unwrap();
        if mean(&real) > mean(&fake) {
            wins += 1;
        }
    }
    let frac = wins as f64 / run.held_out.len() as f64;
    outcome(
        frac >= 0.9,
        format!(
            "ground truth outscores uniform random tokens on {wins}/{} held-out contexts (need ≥ 90%)",
            run.held_out.len()
        ),
    )
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn ranking(ranked: &[Vec<Candidate>]) -> Outcome {
    let ok = ranked
        .iter()
        .filter(|cands| {
            let mut scores: Vec<f64> = cands.iter().map(|c| c.rank_score).collect();
            scores.sort_by(f64::total_cmp);
            cands[0].rank_score >= median(&scores)
        })
        .count();
    let stub = rank_candidates(vec![
        Candidate::new(vec![7], vec![0.1984]).unwrap(),
        Candidate::new(vec![8], vec![0.0131]).unwrap(),
        Candidate::new(vec![9], vec![0.5797]).unwrap(),
    ]);
    let order: Vec<f64> = stub.iter().map(|c| c.word_probs[0]).collect();
    let sizes_ok = ranked.iter().all(|c| c.len() == 64);
    outcome(
        ok == ranked.len() && sizes_ok && order == [0.5797, 0.1984, 0.0131],
        format!(
            "top ≥ median on {ok}/{} candidate lists of L=64; stub order {order:?}",
            ranked.len()
        ),
    )
}

fn alpha_search(run: &PersonaRun) -> Outcome {
    let t = Instant::now();
    let dev = contexts(&run.dev);
    let grid = default_alpha_grid();
    let a = search_noise_variance(&run.model, &run.store, &dev, &grid, run.max_len, 11).unwrap();
    let b = search_noise_variance(&run.model, &run.store, &dev, &grid, run.max_len, 11).unwrap();
    let elapsed = secs(t);
    let same = a == b && a.losses.iter().zip(&b.losses).all(|(x, y)| x.1.to_bits() == y.1.to_bits());
    outcome(
        same && elapsed <= 300.0 && grid == (1..=30).map(f64::from).collect::<Vec<_>>(),
        format!(
            "α* = {} (loss {:.4}, {} ties) over {} dev contexts, identical across reruns: {same}; both searches {elapsed:.0}s (need ≤ 300s)",
            a.best_alpha,
            a.best_loss,
            a.ties.len(),
            dev.len()
        ),
    )
}

mod reference {
    //! Deliberately naive n-gram arithmetic, written without hash maps.

    fn grams(t: &[u32], n: usize) -> Vec<Vec<u32>> {
        if t.len() < n {
            return vec![];
        }
        (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
    }

    fn count(list: &[Vec<u32>], g: &[u32]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }

    fn clipped(h: &[Vec<u32>], r: &[Vec<u32>]) -> usize {
        let mut seen: Vec<&Vec<u32>> = Vec::new();
        let mut total = 0;
        for g in h {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            total += count(h, g).min(count(r, g));
        }
        total
    }

    pub fn bleu4(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
        let mut m = [0usize; 4];
        let mut tot = [0usize; 4];
        let (mut hl, mut rl) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            hl += h.len();
            rl += r.len();
            for n in 1..=4 {
                let (hg, rg) = (grams(h, n), grams(r, n));
                m[n - 1] += clipped(&hg, &rg);
                tot[n - 1] += hg.len();
            }
        }
        if m[0] == 0 || hl == 0 {
            return 0.0;
        }
        let smooth = m[1] == 0 || m[2] == 0 || m[3] == 0;
        let mut s = (m[0] as f64 / tot[0] as f64).ln();
        for n in 1..4 {
            let (a, b) = if smooth {
                (m[n] as f64 + 1.0, tot[n] as f64 + 1.0)
            } else {
                (m[n] as f64, tot[n] as f64)
            };
            s += (a / b).ln();
        }
        let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
        bp * (s / 4.0).exp()
    }

    pub fn rouge2(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
        let mut sum = 0.0;
        for (h, r) in hyps.iter().zip(refs) {
            let (hg, rg) = (grams(h, 2), grams(r, 2));
            if hg.is_empty() || rg.is_empty() {
                continue;
            }
            let o = clipped(&hg, &rg) as f64;
            if o > 0.0 {
                sum += 2.0 * o / (hg.len() + rg.len()) as f64;
            }
        }
        sum / hyps.len() as f64
    }

    pub fn distinct(hyps: &[Vec<u32>], n: usize) -> f64 {
        let all: Vec<Vec<u32>> = hyps.iter().flat_map(|h| grams(h, n)).collect();
        if all.is_empty() {
            return 0.0;
        }
        let mut unique: Vec<&Vec<u32>> = Vec::new();
        for g in &all {
            if !unique.contains(&g) {
                unique.push(g);
            }
        }
        unique.len() as f64 / all.len() as f64
    }
}

/// exp of the mean of −ln p over every response word, with the generator's
/// softmax taken from the graph rather than the metric's own routine.
fn reference_perplexity(model: &PhredModel, store: &ParamStore, ds: &[Dialogue], seed_value: u64) -> f64 {
    let (mut total, mut words) = (0.0, 0usize);
    for (i, d) in ds.iter().enumerate() {
        let mut rng = eval_rng(seed_value, i);
        let mut g = Graph::new();
        let mut ctx = model.initial_context(&mut g);
        for k in 1..d.turns.len() {
            let st = model.encode_turn(&mut g, store, &ctx, &d.turns[k - 1].tokens, d.turns[k - 1].attribute).unwrap();
            ctx = st.context.clone();
            let next = &d.turns[k];
            let z = sample_noise(&model.config().noise, next.tokens.len(), &mut rng).unwrap();
            let h = model.generator_forward(&mut g, store, &st, next.attribute, &next.tokens, &z).unwrap();
            let p = model.distributions(&mut g, store, &h).unwrap();
            for (pv, &t) in p.iter().zip(&next.tokens) {
                total += -g.value(*pv).data()[t as usize].ln();
                words += 1;
            }
        }
    }
    (total / words as f64).exp()
}

fn metric_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = seed::rng(&[0x3e7]);
    for corpus in 0..20 {
        let alphabet = rng.random_range(2..8u32);
        let pairs = rng.random_range(1..=8);
        let sentence = |rng: &mut dyn rand::RngCore| -> Vec<u32> {
            let len = rng.random_range(0..=10);
            (0..len).map(|_| 3 + rng.random_range(0..alphabet)).collect()
        };
        let hyps: Vec<Vec<u32>> = (0..pairs).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<u32>> = (0..pairs).map(|_| sentence(&mut rng)).collect();
        let diffs = [
            bleu4(&hyps, &refs).unwrap() - reference::bleu4(&hyps, &refs),
            rouge2_f1(&hyps, &refs).unwrap() - reference::rouge2(&hyps, &refs),
            distinct_n(&hyps, 1).unwrap() - reference::distinct(&hyps, 1),
            distinct_n(&hyps, 2).unwrap() - reference::distinct(&hyps, 2),
        ];
        let vocab = 6 + corpus % 5;
        let (model, store) = tiny_model(vocab, 2, NoiseMode::Word, &mut rng);
        let ds: Vec<Dialogue> = (0..3).map(|_| random_dialogue(&mut rng, vocab, 2, 3, 4)).collect();
        let ppl = perplexity(&model, &store, &ds, &model.config().noise, corpus as u64).unwrap();
        let ppl_ref = reference_perplexity(&model, &store, &ds, corpus as u64);
        for d in diffs.iter().chain([&(ppl - ppl_ref)]) {
            worst = worst.max(d.abs());
        }
    }
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let hand = rouge2_pair(&toks("a b c d"), &toks("a b c e"));
    let mut bigram_counts = HashMap::new();
    for w in toks("a b c d").windows(2) {
        *bigram_counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    outcome(
        worst <= 1e-12 && hand == 2.0 / 3.0 && bigram_counts.len() == 3,
        format!("20 randomized corpora: max |implementation − reference| = {worst:.1e} (need ≤ 1e-12); ROUGE hand example F1 = {hand} (need exactly 2/3)"),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_phredgan");

fn run_all_commands(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let tiny = [
        "--hidden", "8", "--embed", "8", "--attr-embed", "4", "--noise-dim", "4", "--layers", "1", "--epochs", "2",
        "--samples", "4", "--max-len", "10",
    ];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--dialogues", "60", "--seed", "5"],
        [&["train"][..], &tiny].concat(),
        [&["eval", "--format", "json"][..], &tiny].concat(),
        [&["eval"][..], &tiny].concat(),
        [&["generate"][..], &tiny].concat(),
        [&["noise-search", "--grid", "1..6", "--format", "json"][..], &tiny].concat(),
    ];
    let mut outputs = Vec::new();
    for args in steps {
        let out = Command::new(BIN)
            .args(&args)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .env_remove(phredgan_cli::CONFIG_ENV)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        outputs.push((args.join(" "), out.stdout));
    }
    for file in ["data/synth.train", "data/synth.test", "runs/model.phrd", "runs/model.log", "runs/model.cfg"] {
        outputs.push((file.into(), fs::read(dir.join(file)).unwrap()));
    }
    outputs
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_all_commands(a.path()), run_all_commands(b.path()));
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} command outputs and files compared byte for byte across two runs; differing: {differing:?}",
            ra.len()
        ),
    )
}

fn main() {
    let t = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "loss identities", loss_identities());
    report(3, "gating", gating());
    report(4, "overfit", overfit());
    let run = persona_run();
    let mut ranked = Vec::new();
    report(5, "persona separation", persona_separation(&run, &mut ranked));
    report(6, "discriminator sanity", discriminator_sanity(&run));
    report(7, "ranking", ranking(&ranked));
    report(8, "noise search", alpha_search(&run));
    report(9, "metric oracles", metric_oracles());
    report(10, "determinism", determinism());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        secs(t)
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

//! The phredGAN networks: hierarchical encoder with attribute concatenation,
//! noise-injected decoder with local attention, and the word-level
//! conditional discriminator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::data::{Dialogue, Turn, EOS};
use crate::error::{Error, Result};
use crate::layers::{AdditiveAttention, BiGru, Dense, Embedding, GruStack, GruState, OutputHead, SoftmaxMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// One draw per response, reused at every step (phredGAN_u).
    Utterance,
    /// A fresh draw at every step (phredGAN_w).
    Word,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Utterance => "utterance",
            NoiseMode::Word => "word",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utterance" | "u" => Ok(NoiseMode::Utterance),
            "word" | "w" => Ok(NoiseMode::Word),
            other => Err(Error::Config(format!("noise mode must be `utterance` or `word`, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub alpha: f64,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, alpha: f64, dim: usize) -> Result<Self> {
        let spec = NoiseSpec { mode, alpha, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be positive, got {}", self.alpha)));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("noise dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        NoiseSpec { alpha, ..self }
    }
}

/// `steps` noise vectors with per-coordinate variance `spec.alpha`.
pub fn sample_noise(spec: &NoiseSpec, steps: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    spec.validate()?;
    if steps == 0 {
        return Err(Error::InvalidArgument("noise needs at least one step".into()));
    }
    let sd = spec.alpha.sqrt();
    let mut draw = || Tensor::vector((0..spec.dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect());
    Ok(match spec.mode {
        NoiseMode::Utterance => vec![draw(); steps],
        NoiseMode::Word => (0..steps).map(|_| draw()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub attributes: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attr_embed: usize,
    pub layers: usize,
    pub noise: NoiseSpec,
    pub softmax_samples: usize,
}

impl ModelConfig {
    /// Desk-scale sizes: hidden 32, embeddings 32, two layers, noise width = hidden.
    pub fn desk(vocab_size: usize, attributes: usize) -> Self {
        ModelConfig {
            vocab_size,
            attributes,
            hidden: 32,
            embed: 32,
            attr_embed: 32,
            layers: 2,
            noise: NoiseSpec {
                mode: NoiseMode::Utterance,
                alpha: 1.0,
                dim: 32,
            },
            softmax_samples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("attributes", self.attributes),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("attr_embed", self.attr_embed),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config(format!("vocab_size must exceed the reserved ids, got {}", self.vocab_size)));
        }
        self.noise.validate()
    }

    pub fn decoder_input(&self) -> usize {
        self.embed + self.hidden + 2 * self.hidden + self.attr_embed + self.noise.dim
    }

    pub fn softmax_mode(&self) -> SoftmaxMode {
        SoftmaxMode::for_vocab(self.vocab_size, self.softmax_samples)
    }
}

/// Conditioning produced by the encoder for one turn.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// cRNN state `h_i`, all layers.
    pub context: GruState,
    /// aRNN outputs over the most recent utterance.
    pub memory: Vec<Var>,
    /// `concat(aRNN summary, cRNN top)`.
    pub final_state: Var,
}

impl EncoderState {
    pub fn snapshot(&self, g: &Graph) -> EncoderSnapshot {
        EncoderSnapshot {
            context: self.context.layers().iter().map(|&v| g.value(v).clone()).collect(),
            memory: self.memory.iter().map(|&v| g.value(v).clone()).collect(),
            final_state: g.value(self.final_state).clone(),
        }
    }
}

/// Graph-independent copy of an [`EncoderState`], for inference that reruns
/// the decoder many times under the same conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSnapshot {
    pub context: Vec<Tensor>,
    pub memory: Vec<Tensor>,
    pub final_state: Tensor,
}

impl EncoderSnapshot {
    pub fn restore(&self, g: &mut Graph) -> EncoderState {
        EncoderState {
            context: GruState(self.context.iter().map(|t| g.constant(t.clone())).collect()),
            memory: self.memory.iter().map(|t| g.constant(t.clone())).collect(),
            final_state: g.constant(self.final_state.clone()),
        }
    }
}

/// One decoder step's state during autoregressive generation.
pub struct DecoderCursor {
    state: GruState,
    memory: crate::layers::AttentionMemory,
    context_top: Var,
    responder: Var,
}

#[derive(Clone, Debug)]
pub struct PhredModel {
    config: ModelConfig,
    embedding: Embedding,
    attributes: Embedding,
    a_rnn: BiGru,
    e_rnn: BiGru,
    c_rnn: GruStack,
    decoder_init: Dense,
    disc_init: Dense,
    d_rnn: GruStack,
    attention: AdditiveAttention,
    head: OutputHead,
    disc: BiGru,
    disc_out: Dense,
}

impl PhredModel {
    /// Registers every parameter in `store` with Xavier-uniform weights and zero biases.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, l) = (c.hidden, c.layers);
        let shared = ParamGroup::Shared;
        let gen = ParamGroup::Generator;
        let dis = ParamGroup::Discriminator;
        let embedding = Embedding::new(store, rng, "embedding", c.vocab_size, c.embed, shared)?;
        let attributes = Embedding::new(store, rng, "attribute_embedding", c.attributes, c.attr_embed, shared)?;
        let a_rnn = BiGru::new(store, rng, "arnn", c.embed, h, l, shared)?;
        let e_rnn = BiGru::new(store, rng, "ernn", c.embed, h, l, shared)?;
        let c_rnn = GruStack::new(store, rng, "crnn", 2 * h + c.attr_embed, h, l, shared)?;
        let decoder_init = Dense::new(store, rng, "drnn_init", 3 * h, l * h, gen)?;
        let d_rnn = GruStack::new(store, rng, "drnn", c.decoder_input(), h, l, gen)?;
        let attention = AdditiveAttention::new(store, rng, "attention", h, 2 * h, h, gen)?;
        let head = OutputHead::new(store, rng, "output", h, c.vocab_size, gen)?;
        let disc_init = Dense::new(store, rng, "disc_init", 3 * h, 2 * l * h, dis)?;
        let disc = BiGru::new(store, rng, "disc", c.embed + c.attr_embed, h, l, dis)?;
        let disc_out = Dense::new(store, rng, "disc_out", 2 * h, 1, dis)?;
        Ok(PhredModel {
            config,
            embedding,
            attributes,
            a_rnn,
            e_rnn,
            c_rnn,
            decoder_init,
            disc_init,
            d_rnn,
            attention,
            head,
            disc,
            disc_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn attribute_embedding(&self) -> &Embedding {
        &self.attributes
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    fn check_attribute(&self, attribute: u32) -> Result<()> {
        if attribute as usize >= self.config.attributes {
            return Err(Error::AttributeOutOfRange {
                id: attribute,
                count: self.config.attributes,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<Vec<Var>> {
        self.check_tokens(tokens)?;
        tokens.iter().map(|&t| self.embedding.lookup(g, store, t as usize)).collect()
    }

    pub fn attribute_vector(&self, g: &mut Graph, store: &ParamStore, attribute: u32) -> Result<Var> {
        self.check_attribute(attribute)?;
        self.attributes.lookup(g, store, attribute as usize)
    }

    /// Zero cRNN state for the first turn of a dialogue.
    pub fn initial_context(&self, g: &mut Graph) -> GruState {
        self.c_rnn.zero_state(g)
    }

    /// `h_i = cRNN(eRNN(E(X_i)), h_{i-1}, C_i)` plus aRNN memory over `X_i`.
    pub fn encode_turn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &GruState,
        utterance: &[u32],
        attribute: u32,
    ) -> Result<EncoderState> {
        if utterance.is_empty() {
            return Err(Error::Empty("utterance"));
        }
        let attr = self.attribute_vector(g, store, attribute)?;
        let emb = self.embed_tokens(g, store, utterance)?;
        let e = self.e_rnn.encode(g, store, &emb, None)?;
        let summary = e.summary(g)?;
        let c_in = g.concat(&[summary, attr])?;
        let context = self.c_rnn.step(g, store, prev, c_in)?;
        let a = self.a_rnn.encode(g, store, &emb, None)?;
        let a_summary = a.summary(g)?;
        let final_state = g.concat(&[a_summary, context.top()])?;
        Ok(EncoderState {
            context,
            memory: a.outputs,
            final_state,
        })
    }

    /// Encodes `turns` in order from the zero context; returns the state after the last.
    pub fn encode_context(&self, g: &mut Graph, store: &ParamStore, turns: &[Turn]) -> Result<EncoderState> {
        let mut ctx = self.initial_context(g);
        let mut last = None;
        for t in turns {
            let s = self.encode_turn(g, store, &ctx, &t.tokens, t.attribute)?;
            ctx = s.context.clone();
            last = Some(s);
        }
        last.ok_or(Error::Empty("dialogue context"))
    }

    pub fn start_decoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &EncoderState,
        responder: u32,
    ) -> Result<DecoderCursor> {
        let responder = self.attribute_vector(g, store, responder)?;
        let init = self.decoder_init.forward(g, store, state.final_state)?;
        let init = g.tanh(init)?;
        let dec_state = self.d_rnn.state_from_flat(g, init)?;
        let memory = self.attention.prepare(g, store, &state.memory)?;
        Ok(DecoderCursor {
            state: dec_state,
            memory,
            context_top: state.context.top(),
            responder,
        })
    }

    /// Advances the decoder by one token; returns the new top hidden state.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cursor: &mut DecoderCursor,
        prev_token: u32,
        noise: &Tensor,
    ) -> Result<Var> {
        if noise.shape() != [self.config.noise.dim] {
            return Err(Error::shape("decoder noise", noise.shape(), &[self.config.noise.dim]));
        }
        self.check_tokens(&[prev_token])?;
        let emb = self.embedding.lookup(g, store, prev_token as usize)?;
        let (att, _) = self.attention.attend(g, store, &cursor.memory, cursor.state.top())?;
        let z = g.constant(noise.clone());
        let x = g.concat(&[emb, cursor.context_top, att, cursor.responder, z])?;
        cursor.state = self.d_rnn.step(g, store, &cursor.state, x)?;
        Ok(cursor.state.top())
    }

    /// Teacher-forced decoder: step `j` consumes target `j-1` (EOS before the
    /// first). Returns the top hidden state per target position.
    pub fn generator_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &EncoderState,
        responder: u32,
        target: &[u32],
        noise: &[Tensor],
    ) -> Result<Vec<Var>> {
        if target.is_empty() {
            return Err(Error::Empty("target response"));
        }
        if noise.len() < target.len() {
            return Err(Error::InvalidArgument(format!(
                "{} noise steps for a {}-token target",
                noise.len(),
                target.len()
            )));
        }
        self.check_tokens(target)?;
        let mut cursor = self.start_decoder(g, store, state, responder)?;
        let mut prev = EOS;
        let mut out = Vec::with_capacity(target.len());
        for (&t, z) in target.iter().zip(noise) {
            out.push(self.decoder_step(g, store, &mut cursor, prev, z)?);
            prev = t;
        }
        Ok(out)
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        self.head.logits(g, store, hidden)
    }

    /// Per-step vocabulary distributions of the teacher-forced decoder.
    pub fn distributions(&self, g: &mut Graph, store: &ParamStore, hidden: &[Var]) -> Result<Vec<Var>> {
        hidden
            .iter()
            .map(|&h| {
                let l = self.logits(g, store, h)?;
                g.softmax(l)
            })
            .collect()
    }

    /// Probability per word that it came from the ground truth.
    pub fn discriminator_score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &EncoderState,
        responder: u32,
        response: &[u32],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let attr = self.attribute_vector(g, store, responder)?;
        let emb = self.embed_tokens(g, store, response)?;
        let inputs = emb
            .into_iter()
            .map(|e| g.concat(&[e, attr]))
            .collect::<Result<Vec<_>>>()?;
        let lh = self.config.layers * self.config.hidden;
        let init = self.disc_init.forward(g, store, state.final_state)?;
        let init = g.tanh(init)?;
        let f0 = g.slice(init, 0, lh)?;
        let b0 = g.slice(init, lh, lh)?;
        let f0 = self.disc.forward.state_from_flat(g, f0)?;
        let b0 = self.disc.backward.state_from_flat(g, b0)?;
        let enc = self.disc.encode(g, store, &inputs, Some((f0, b0)))?;
        let outs = g.stack(&enc.outputs)?;
        let logits = self.disc_out.forward(g, store, outs)?;
        let logits = g.reshape(logits, vec![response.len()])?;
        g.sigmoid(logits)
    }

    /// Validates a dialogue against this model's vocabulary and attribute count.
    pub fn check_dialogue(&self, d: &Dialogue) -> Result<()> {
        d.validate(self.config.vocab_size, self.config.attributes)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::layers::mle_token_loss;

    fn tiny(vocab: usize, attrs: usize, mode: NoiseMode) -> (PhredModel, ParamStore) {
        let cfg = ModelConfig {
            vocab_size: vocab,
            attributes: attrs,
            hidden: 4,
            embed: 3,
            attr_embed: 2,
            layers: 2,
            noise: NoiseSpec { mode, alpha: 1.0, dim: 2 },
            softmax_samples: 512,
        };
        let mut store = ParamStore::new();
        let m = PhredModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (m, store)
    }

    fn noise(m: &PhredModel, steps: usize, seed: u64) -> Vec<Tensor> {
        sample_noise(&m.config().noise, steps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn values(g: &Graph, vs: &[Var]) -> Vec<Vec<f64>> {
        vs.iter().map(|&v| g.value(v).data().to_vec()).collect()
    }

    fn forward_probs(m: &PhredModel, store: &ParamStore, responder: u32, z: &[Tensor]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        let s = m.encode_turn(&mut g, store, &ctx, &[3, 4, EOS], 0).unwrap();
        let h = m.generator_forward(&mut g, store, &s, responder, &[5, 6, EOS], z).unwrap();
        let p = m.distributions(&mut g, store, &h).unwrap();
        values(&g, &p)
    }

    #[test]
    fn first_turn_uses_zero_context() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        assert!(ctx.layers().iter().all(|&v| g.value(v).data().iter().all(|&x| x == 0.0)));
        let s = m.encode_turn(&mut g, &store, &ctx, &[3, 4, EOS], 1).unwrap();
        assert_eq!(s.memory.len(), 3);
        assert_eq!(g.shape(s.final_state), &[12]);
        assert_eq!(m.c_rnn.input_size(), 2 * 4 + 2);
    }

    #[test]
    fn context_carries_across_turns() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let mut g = Graph::new();
        let t = |tokens: Vec<u32>| Turn { tokens, attribute: 0 };
        let a = m.encode_context(&mut g, &store, &[t(vec![3, EOS]), t(vec![5, EOS])]).unwrap();
        let b = m.encode_context(&mut g, &store, &[t(vec![4, EOS]), t(vec![5, EOS])]).unwrap();
        assert_ne!(g.value(a.context.top()).data(), g.value(b.context.top()).data());
    }

    #[test]
    fn attributes_change_context() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        let a = m.encode_turn(&mut g, &store, &ctx, &[3, 4, EOS], 0).unwrap();
        let b = m.encode_turn(&mut g, &store, &ctx, &[3, 4, EOS], 1).unwrap();
        let (x, y) = (g.value(a.context.top()).data(), g.value(b.context.top()).data());
        assert!(x.iter().zip(y).any(|(p, q)| p != q));
    }

    #[test]
    fn out_of_range_ids() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        assert!(matches!(
            m.encode_turn(&mut g, &store, &ctx, &[3, 10], 0),
            Err(Error::TokenOutOfRange { id: 10, .. })
        ));
        assert!(matches!(
            m.encode_turn(&mut g, &store, &ctx, &[3], 2),
            Err(Error::AttributeOutOfRange { id: 2, .. })
        ));
        let s = m.encode_turn(&mut g, &store, &ctx, &[3], 0).unwrap();
        let z = noise(&m, 1, 0);
        assert!(m.generator_forward(&mut g, &store, &s, 5, &[3], &z).is_err());
        assert!(matches!(m.discriminator_score(&mut g, &store, &s, 0, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn seeded_forward_is_bit_identical() {
        let (m, store) = tiny(10, 2, NoiseMode::Word);
        let a = forward_probs(&m, &store, 1, &noise(&m, 3, 42));
        let b = forward_probs(&m, &store, 1, &noise(&m, 3, 42));
        assert_eq!(a, b);
        for row in &a {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_noise_matches_noise_free_pass() {
        let (m, store) = tiny(10, 2, NoiseMode::Word);
        let spec = m.config().noise.with_alpha(1e-24);
        let z = sample_noise(&spec, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let zero = vec![Tensor::zeros(&[2]); 3];
        let a = forward_probs(&m, &store, 1, &z);
        let b = forward_probs(&m, &store, 1, &zero);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_modes() {
        let spec = NoiseSpec::new(NoiseMode::Utterance, 2.0, 3).unwrap();
        let z = sample_noise(&spec, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(z.len(), 7);
        assert!(z.iter().all(|t| t == &z[0]));
        let word = NoiseSpec {
            mode: NoiseMode::Word,
            ..spec
        };
        let w = sample_noise(&word, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(w[0], w[6]);
    }

    #[test]
    fn zero_or_negative_alpha_rejected() {
        assert!(NoiseSpec::new(NoiseMode::Word, 0.0, 4).is_err());
        let bad = NoiseSpec {
            mode: NoiseMode::Word,
            alpha: -1.0,
            dim: 4,
        };
        assert!(sample_noise(&bad, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn noise_variance_at_five() {
        let spec = NoiseSpec::new(NoiseMode::Word, 5.0, 10).unwrap();
        let z = sample_noise(&spec, 10_000, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let xs: Vec<f64> = z.iter().flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(xs.len(), 100_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((4.8..=5.2).contains(&var), "{var}");
    }

    #[test]
    fn utterance_noise_is_one_draw() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let z = noise(&m, 3, 9);
        assert_eq!(z[0], z[2]);
        let a = forward_probs(&m, &store, 0, &z);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn discriminator_range_and_attribute_sensitivity() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        let s = m.encode_turn(&mut g, &store, &ctx, &[3, 4, EOS], 0).unwrap();
        let p0 = m.discriminator_score(&mut g, &store, &s, 0, &[5, 6, EOS]).unwrap();
        let p1 = m.discriminator_score(&mut g, &store, &s, 1, &[5, 6, EOS]).unwrap();
        let (a, b) = (g.value(p0).data(), g.value(p1).data());
        assert_eq!(a.len(), 3);
        assert!(a.iter().chain(b).all(|p| (0.0..=1.0).contains(p)));
        assert!(a.iter().zip(b).any(|(x, y)| x != y));
    }

    #[test]
    fn untrained_discriminator_is_undecided() {
        let cfg = ModelConfig::desk(40, 2);
        let mut store = ParamStore::new();
        let m = PhredModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut total = 0.0;
        for _ in 0..100 {
            let mut g = Graph::new();
            let ctx = m.initial_context(&mut g);
            let q: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(3..40)).collect();
            let s = m.encode_turn(&mut g, &store, &ctx, &q, 0).unwrap();
            let r: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(3..40)).collect();
            let p = m.discriminator_score(&mut g, &store, &s, 1, &r).unwrap();
            let v = g.value(p);
            total += v.sum() / v.numel() as f64;
        }
        let mean = total / 100.0;
        assert!(mean > 0.2 && mean < 0.8, "{mean}");
    }

    #[test]
    fn equal_attribute_rows_give_equal_outputs() {
        let (m, mut store) = tiny(10, 3, NoiseMode::Word);
        let table = m.attribute_embedding().table();
        let mut t = store.value(table).clone();
        let cols = t.last_dim();
        let row0 = t.row(0).to_vec();
        t.data_mut()[2 * cols..3 * cols].copy_from_slice(&row0);
        store.set(table, t).unwrap();
        let z = noise(&m, 3, 4);
        assert_eq!(forward_probs(&m, &store, 0, &z), forward_probs(&m, &store, 2, &z));
        assert_ne!(forward_probs(&m, &store, 0, &z), forward_probs(&m, &store, 1, &z));
    }

    #[test]
    fn one_registry_copy_of_shared_tables() {
        let (m, store) = tiny(8, 2, NoiseMode::Word);
        let names: Vec<&str> = store.ids().map(|id| store.name(id)).collect();
        assert_eq!(names.iter().filter(|n| **n == "embedding").count(), 1);
        assert_eq!(names.iter().filter(|n| **n == "attribute_embedding").count(), 1);
        assert_eq!(store.group(m.embedding().table()), ParamGroup::Shared);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn shared_embedding_reaches_all_networks() {
        let (m, mut store) = tiny(10, 2, NoiseMode::Utterance);
        let z = noise(&m, 3, 1);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let ctx = m.initial_context(&mut g);
            let s = m.encode_turn(&mut g, store, &ctx, &[3, EOS], 0).unwrap();
            let h = m.generator_forward(&mut g, store, &s, 1, &[5, EOS], &z).unwrap();
            let d = m.discriminator_score(&mut g, store, &s, 1, &[5, EOS]).unwrap();
            (
                g.value(s.final_state).clone(),
                g.value(h[1]).clone(),
                g.value(d).clone(),
            )
        };
        let before = run(&store);
        let table = m.embedding().table();
        let mut t = store.value(table).clone();
        let cols = t.last_dim();
        // Token 3 only appears in the context, token 5 only in the response.
        for v in &mut t.data_mut()[3 * cols..4 * cols] {
            *v += 0.5;
        }
        for v in &mut t.data_mut()[5 * cols..6 * cols] {
            *v += 0.5;
        }
        store.set(table, t).unwrap();
        let after = run(&store);
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
        assert_ne!(before.2, after.2);
    }

    #[test]
    fn end_to_end_mle_gradient_check() {
        let (m, store) = tiny(8, 2, NoiseMode::Word);
        let z = noise(&m, 3, 21);
        let dialogue = [(vec![3u32, 4, EOS], 0u32), (vec![5, 6, EOS], 1)];
        let err = finite_difference_check(&store, 1e-5, |g, s| {
            let ctx = m.initial_context(g);
            let st = m.encode_turn(g, s, &ctx, &dialogue[0].0, dialogue[0].1)?;
            let h = m.generator_forward(g, s, &st, dialogue[1].1, &dialogue[1].0, &z)?;
            let losses = h
                .iter()
                .zip(&dialogue[1].0)
                .map(|(&hv, &t)| {
                    let l = m.logits(g, s, hv)?;
                    mle_token_loss(g, l, t as usize)
                })
                .collect::<Result<Vec<_>>>()?;
            g.add_n(&losses)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn snapshot_restores_identical_conditioning() {
        let (m, store) = tiny(10, 2, NoiseMode::Utterance);
        let z = noise(&m, 2, 8);
        let mut g = Graph::new();
        let ctx = m.initial_context(&mut g);
        let s = m.encode_turn(&mut g, &store, &ctx, &[3, 4, EOS], 0).unwrap();
        let direct = m.generator_forward(&mut g, &store, &s, 1, &[5, EOS], &z).unwrap();
        let snap = s.snapshot(&g);
        let mut g2 = Graph::new();
        let s2 = snap.restore(&mut g2);
        let restored = m.generator_forward(&mut g2, &store, &s2, 1, &[5, EOS], &z).unwrap();
        assert_eq!(values(&g, &direct), values(&g2, &restored));
    }
}

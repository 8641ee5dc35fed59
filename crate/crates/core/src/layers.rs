//! Parameterized building blocks: embeddings, stacked GRUs, additive
//! attention, dense projections and the token-level likelihood head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot/Xavier uniform draw on `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("nonempty shape")
}

fn matrix_param(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: String,
    rows: usize,
    cols: usize,
    group: ParamGroup,
) -> Result<ParamId> {
    store.add(name, xavier_uniform(rng, &[rows, cols], rows, cols), group)
}

fn zero_param(store: &mut ParamStore, name: String, len: usize, group: ParamGroup) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&[len]), group)
}

/// Lookup table of `rows × dim` trainable vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    rows: usize,
    dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        rows: usize,
        dim: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let table = matrix_param(store, rng, name.to_string(), rows, dim, group)?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, id: usize) -> Result<Var> {
        if id >= self.rows {
            return Err(Error::invalid("embedding", format!("id {id} out of range for {} rows", self.rows)));
        }
        let t = g.param(store, self.table);
        g.gather_row(t, id)
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
    input: usize,
    output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let weight = matrix_param(store, rng, format!("{name}.weight"), input, output, group)?;
        let bias = zero_param(store, format!("{name}.bias"), output, group)?;
        Ok(Dense {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn output_size(&self) -> usize {
        self.output
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// One GRU layer. Gates are packed as `[reset | update | candidate]`:
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// z  = σ(W_z x + U_z h + b_z)
/// h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    input_weight: ParamId,
    gate_weight: ParamId,
    candidate_weight: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl GruLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(GruLayer {
            input_weight: matrix_param(store, rng, format!("{name}.w_x"), input, 3 * hidden, group)?,
            gate_weight: matrix_param(store, rng, format!("{name}.u_rz"), hidden, 2 * hidden, group)?,
            candidate_weight: matrix_param(store, rng, format!("{name}.u_h"), hidden, hidden, group)?,
            bias: zero_param(store, format!("{name}.bias"), 3 * hidden, group)?,
            hidden,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.input_weight, self.gate_weight, self.candidate_weight, self.bias]
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let hs = self.hidden;
        let wx = g.param(store, self.input_weight);
        let urz = g.param(store, self.gate_weight);
        let uh = g.param(store, self.candidate_weight);
        let b = g.param(store, self.bias);

        let gx = g.matmul(x, wx)?;
        let gx = g.add(gx, b)?;
        let gh = g.matmul(h, urz)?;
        let gx_rz = g.slice(gx, 0, 2 * hs)?;
        let rz = g.add(gx_rz, gh)?;
        let rz = g.sigmoid(rz)?;
        let r = g.slice(rz, 0, hs)?;
        let z = g.slice(rz, hs, hs)?;
        let rh = g.mul(r, h)?;
        let cand_h = g.matmul(rh, uh)?;
        let cand_x = g.slice(gx, 2 * hs, hs)?;
        let cand = g.add(cand_x, cand_h)?;
        let cand = g.tanh(cand)?;
        let delta = g.sub(cand, h)?;
        let zd = g.mul(z, delta)?;
        g.add(h, zd)
    }
}

/// Per-layer hidden states of a [`GruStack`], bottom layer first.
#[derive(Clone, Debug)]
pub struct GruState(pub Vec<Var>);

impl GruState {
    pub fn top(&self) -> Var {
        *self.0.last().expect("at least one layer")
    }

    pub fn layers(&self) -> &[Var] {
        &self.0
    }

    /// `[num_layers, hidden]` view of the state.
    pub fn stacked(&self, g: &mut Graph) -> Result<Var> {
        g.stack(&self.0)
    }
}

/// Multi-layer GRU; layer `l > 0` consumes the new state of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    layers: Vec<GruLayer>,
    input: usize,
    hidden: usize,
}

impl GruStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 || input == 0 {
            return Err(Error::InvalidArgument(format!(
                "GRU {name}: sizes must be positive (input {input}, hidden {hidden}, layers {num_layers})"
            )));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let in_size = if l == 0 { input } else { hidden };
                GruLayer::new(store, rng, &format!("{name}.l{l}"), in_size, hidden, group)
            })
            .collect::<Result<_>>()?;
        Ok(GruStack { layers, input, hidden })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn layer_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn zero_state(&self, g: &mut Graph) -> GruState {
        GruState(
            (0..self.layers.len())
                .map(|_| g.constant(Tensor::zeros(&[self.hidden])))
                .collect(),
        )
    }

    /// Splits a flat `[num_layers * hidden]` vector into a state.
    pub fn state_from_flat(&self, g: &mut Graph, flat: Var) -> Result<GruState> {
        let need = self.layers.len() * self.hidden;
        if g.shape(flat) != [need] {
            return Err(Error::shape("gru state", g.shape(flat), &[need]));
        }
        let layers = (0..self.layers.len())
            .map(|l| g.slice(flat, l * self.hidden, self.hidden))
            .collect::<Result<_>>()?;
        Ok(GruState(layers))
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, state: &GruState, input: Var) -> Result<GruState> {
        if state.0.len() != self.layers.len() {
            return Err(Error::invalid(
                "gru_step",
                format!("state has {} layers, stack has {}", state.0.len(), self.layers.len()),
            ));
        }
        if g.shape(input) != [self.input] {
            return Err(Error::shape("gru_step input", g.shape(input), &[self.input]));
        }
        let mut next = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (layer, &h) in self.layers.iter().zip(&state.0) {
            if g.shape(h) != [self.hidden] {
                return Err(Error::shape("gru_step state", g.shape(h), &[self.hidden]));
            }
            let h_new = layer.step(g, store, h, x)?;
            next.push(h_new);
            x = h_new;
        }
        Ok(GruState(next))
    }
}

/// Output of [`bidirectional_encode`].
#[derive(Clone, Debug)]
pub struct BiEncoding {
    /// `concat(forward_t, backward_t)` of the top layers, one per position.
    pub outputs: Vec<Var>,
    /// Forward state after the last position.
    pub forward_final: GruState,
    /// Backward state after the first position.
    pub backward_final: GruState,
}

impl BiEncoding {
    /// `concat(forward top state at T, backward top state at 1)`.
    pub fn summary(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.forward_final.top(), self.backward_final.top()])
    }
}

pub fn bidirectional_encode(
    g: &mut Graph,
    store: &ParamStore,
    fwd: &GruStack,
    bwd: &GruStack,
    inputs: &[Var],
    init: Option<(GruState, GruState)>,
) -> Result<BiEncoding> {
    if inputs.is_empty() {
        return Err(Error::Empty("bidirectional_encode input sequence"));
    }
    let (mut f, mut b) = match init {
        Some(states) => states,
        None => (fwd.zero_state(g), bwd.zero_state(g)),
    };
    let mut f_top = Vec::with_capacity(inputs.len());
    for &x in inputs {
        f = fwd.step(g, store, &f, x)?;
        f_top.push(f.top());
    }
    let mut b_top = vec![None; inputs.len()];
    for (t, &x) in inputs.iter().enumerate().rev() {
        b = bwd.step(g, store, &b, x)?;
        b_top[t] = Some(b.top());
    }
    let outputs = f_top
        .iter()
        .zip(b_top)
        .map(|(&fv, bv)| g.concat(&[fv, bv.expect("filled")]))
        .collect::<Result<_>>()?;
    Ok(BiEncoding {
        outputs,
        forward_final: f,
        backward_final: b,
    })
}

/// Forward and backward stacks of a bidirectional RNN.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruStack,
    pub backward: GruStack,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(BiGru {
            forward: GruStack::new(store, rng, &format!("{name}.fwd"), input, hidden, num_layers, group)?,
            backward: GruStack::new(store, rng, &format!("{name}.bwd"), input, hidden, num_layers, group)?,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        init: Option<(GruState, GruState)>,
    ) -> Result<BiEncoding> {
        bidirectional_encode(g, store, &self.forward, &self.backward, inputs, init)
    }
}

/// Bahdanau-style scoring `vᵀ tanh(W_q q + W_k k_t)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    query: ParamId,
    key: ParamId,
    score: ParamId,
    key_size: usize,
}

/// Keys with their projections precomputed once per utterance.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    keys: Var,
    projected: Var,
    len: usize,
}

impl AttentionMemory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `[T, key_size]` matrix of keys.
    pub fn keys(&self) -> Var {
        self.keys
    }
}

impl AdditiveAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        query_size: usize,
        key_size: usize,
        attn_size: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(AdditiveAttention {
            query: matrix_param(store, rng, format!("{name}.w_q"), query_size, attn_size, group)?,
            key: matrix_param(store, rng, format!("{name}.w_k"), key_size, attn_size, group)?,
            score: matrix_param(store, rng, format!("{name}.v"), 1, attn_size, group)?,
            key_size,
        })
    }

    pub fn key_size(&self) -> usize {
        self.key_size
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, keys: &[Var]) -> Result<AttentionMemory> {
        if keys.is_empty() {
            return Err(Error::Empty("attention keys"));
        }
        let k = g.stack(keys)?;
        let wk = g.param(store, self.key);
        let projected = g.matmul(k, wk)?;
        Ok(AttentionMemory {
            keys: k,
            projected,
            len: keys.len(),
        })
    }

    /// Returns `(context, weights)`; `context = Σ_t weights_t · keys_t`.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, memory: &AttentionMemory, query: Var) -> Result<(Var, Var)> {
        let wq = g.param(store, self.query);
        let v = g.param(store, self.score);
        let q = g.matmul(query, wq)?;
        let pre = g.add(memory.projected, q)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul_t(act, v)?;
        let scores = g.reshape(scores, vec![memory.len])?;
        let weights = g.softmax(scores)?;
        let context = g.matmul(weights, memory.keys)?;
        Ok((context, weights))
    }

    pub fn attend_keys(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: &[Var]) -> Result<(Var, Var)> {
        let memory = self.prepare(g, store, keys)?;
        self.attend(g, store, &memory, query)
    }
}

/// How the token likelihood is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftmaxMode {
    Full,
    /// Target plus `samples` negatives drawn uniformly without replacement.
    Sampled { samples: usize },
}

/// Vocabularies below this size always use the full softmax.
pub const FULL_SOFTMAX_BELOW: usize = 2048;

impl SoftmaxMode {
    pub fn for_vocab(vocab: usize, samples: usize) -> Self {
        if vocab < FULL_SOFTMAX_BELOW || samples + 1 >= vocab {
            SoftmaxMode::Full
        } else {
            SoftmaxMode::Sampled { samples }
        }
    }
}

/// `−log softmax(logits)[target]` over the full vocabulary.
pub fn mle_token_loss(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let v = g.value(logits).numel();
    if g.value(logits).rank() != 1 {
        return Err(Error::invalid("mle_token_loss", format!("logits must be rank 1, got {:?}", g.shape(logits))));
    }
    if target >= v {
        return Err(Error::TokenOutOfRange {
            id: target as u32,
            size: v,
        });
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, target)?;
    g.scale(picked, -1.0)
}

/// Vocabulary projection `W h + b` with `W` stored as `[V, H]` so rows can be
/// gathered for the sampled softmax.
#[derive(Clone, Debug)]
pub struct OutputHead {
    weight: ParamId,
    bias: ParamId,
    vocab: usize,
}

impl OutputHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        hidden: usize,
        vocab: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(OutputHead {
            weight: store.add(format!("{name}.weight"), xavier_uniform(rng, &[vocab, hidden], hidden, vocab), group)?,
            bias: zero_param(store, format!("{name}.bias"), vocab, group)?,
            vocab,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let l = g.matmul_t(hidden, w)?;
        g.add(l, b)
    }

    /// Token negative log-likelihood. In sampled mode the negatives are
    /// reweighted by `(V − 1) / S`, the inverse inclusion probability of the
    /// uniform proposal; the target is always included.
    pub fn nll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        target: usize,
        mode: SoftmaxMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if target >= self.vocab {
            return Err(Error::TokenOutOfRange {
                id: target as u32,
                size: self.vocab,
            });
        }
        match mode {
            SoftmaxMode::Full => {
                let logits = self.logits(g, store, hidden)?;
                mle_token_loss(g, logits, target)
            }
            SoftmaxMode::Sampled { samples } => {
                if samples == 0 || samples >= self.vocab {
                    return Err(Error::InvalidArgument(format!(
                        "sampled softmax needs 1 ≤ samples < vocab ({}), got {samples}",
                        self.vocab
                    )));
                }
                let mut ids = Vec::with_capacity(samples + 1);
                ids.push(target);
                for k in rand::seq::index::sample(rng, self.vocab - 1, samples) {
                    ids.push(if k >= target { k + 1 } else { k });
                }
                let w = g.param(store, self.weight);
                let b = g.param(store, self.bias);
                let ws = g.gather(w, &ids)?;
                let bs = g.gather(b, &ids)?;
                let l = g.matmul_t(hidden, ws)?;
                let l = g.add(l, bs)?;
                let correction = ((self.vocab - 1) as f64 / samples as f64).ln();
                let mut shift = vec![correction; samples + 1];
                shift[0] = 0.0;
                let shift = g.constant(Tensor::vector(shift));
                let l = g.add(l, shift)?;
                mle_token_loss(g, l, 0)
            }
        }
    }
}

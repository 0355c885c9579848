//! Sequence model: a one-layer unidirectional LSTM encoder feeding a pair of
//! diagonal-Gaussian posterior heads, and a one-layer LSTM decoder
//! conditioned on a latent code. Everything is expressed through [`Tape`]
//! ops so the same reverse sweep differentiates the whole model.
//!
//! Parameters live in a [`ParamStore`]: plain named tensors, decoupled from
//! any tape. A forward pass binds the store onto a fresh tape
//! ([`ParamStore::bind_all`]) and reads gradients back through the returned
//! [`BoundParams`] handles. Optimizers mutate the store; checkpoints
//! serialize it by name.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::{TokenBatch, BOS, EOS, MAX_SENTENCE_LEN};
use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.08;

/// Variance floor inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;

/// Exponential-moving-average weight on fresh batch statistics when
/// updating batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Parameter store.

/// Opaque handle into a [`ParamStore`]. Ids are dense and stable for the
/// lifetime of the store, so optimizer state can be indexed by them.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named parameter tensors. Registration order is the
/// binding order, which keeps tape layouts (and therefore every downstream
/// bit pattern) reproducible.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    /// Add a tensor under `name`. Non-trainable entries (running statistics)
    /// are carried through checkpoints but never bound with gradients.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replace a parameter's value. The shape is part of the model contract
    /// and must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.entries[id.0].value;
        if old.shape() != value.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "param set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// `(id, name, value, trainable)` over all entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor, bool)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value, e.trainable))
    }

    /// Bind every entry onto `tape`. Trainable entries become leaves that
    /// require gradients when `requires_grad` is set; everything else is a
    /// constant.
    pub fn bind_all(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable && requires_grad))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for one [`ParamStore::bind_all`] call, indexed by
/// [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn register_uniform(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha20Rng,
) -> ParamId {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    let t = Tensor::matrix(rows, cols, data).expect("uniform init");
    store.register(name, t, true)
}

// ---------------------------------------------------------------------------
// Batch normalization.

/// Whether a forward pass normalizes with fresh batch statistics (and
/// reports running-average updates) or with stored running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Deferred running-statistics update produced by a train-mode batch-norm
/// forward. The caller decides when to fold it back into the store, which
/// keeps forward passes free of store mutation.
pub struct BnUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        store.set(self.mean_id, self.mean.clone())?;
        store.set(self.var_id, self.var.clone())
    }
}

/// Per-feature affine normalization layer. Training mode standardizes with
/// the batch mean and (biased) batch variance; eval mode uses running
/// estimates updated as an exponential moving average of batch statistics.
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> BatchNorm {
        let ones = Tensor::full(1, dim, 1.0).expect("bn init");
        let zeros = Tensor::zeros(1, dim);
        BatchNorm {
            gamma: store.register(format!("{prefix}.gamma"), ones.clone(), true),
            beta: store.register(format!("{prefix}.beta"), zeros.clone(), true),
            running_mean: store.register(format!("{prefix}.running_mean"), zeros, false),
            running_var: store.register(format!("{prefix}.running_var"), ones, false),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = tape.col_mean(x)?;
                let centered = tape.sub_row(x, mean)?;
                let sq = tape.square(centered)?;
                let var = tape.col_mean(sq)?;
                updates.push(self.ema_update(tape, bound, mean, var));
                (mean, var)
            }
            Mode::Eval => (
                bound.var(self.running_mean),
                bound.var(self.running_var),
            ),
        };
        let centered = tape.sub_row(x, mean)?;
        let shifted = tape.add_scalar(var, BN_EPS)?;
        let denom = tape.sqrt(shifted)?;
        let inv = tape.recip(denom)?;
        let norm = tape.mul_row(centered, inv)?;
        let scaled = tape.mul_row(norm, bound.var(self.gamma))?;
        tape.add_row(scaled, bound.var(self.beta))
    }

    fn ema_update(&self, tape: &Tape, bound: &BoundParams, mean: Var, var: Var) -> BnUpdate {
        let blend = |old: &Tensor, fresh: &Tensor| {
            let data: Vec<f64> = old
                .data()
                .iter()
                .zip(fresh.data())
                .map(|(&o, &f)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * f)
                .collect();
            Tensor::matrix(1, old.cols(), data).expect("bn ema")
        };
        BnUpdate {
            mean_id: self.running_mean,
            var_id: self.running_var,
            mean: blend(
                tape.value(bound.var(self.running_mean)),
                tape.value(mean),
            ),
            var: blend(tape.value(bound.var(self.running_var)), tape.value(var)),
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM cell.

/// One-layer LSTM parameters: input and recurrent weights land on a fused
/// `[.., 4H]` layout with gate order (input, forget, cell, output) and a
/// single bias row.
pub struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmParams {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha20Rng,
    ) -> LstmParams {
        let w_ih = register_uniform(store, &format!("{prefix}.w_ih"), input, 4 * hidden, rng);
        let w_hh = register_uniform(store, &format!("{prefix}.w_hh"), hidden, 4 * hidden, rng);
        let bias = register_uniform(store, &format!("{prefix}.bias"), 1, 4 * hidden, rng);
        LstmParams {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    /// Advance one timestep. With a mask column, each row blends as
    /// `m * new + (1 - m) * old`, which passes live rows and frozen rows
    /// through bit-exactly (multiplying by 1.0 or adding 0.0 never
    /// re-rounds), so padded rows cannot perturb state.
    fn step(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        h: Var,
        c: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let xs = tape.matmul(x, bound.var(self.w_ih))?;
        let hs = tape.matmul(h, bound.var(self.w_hh))?;
        let pre = tape.add(xs, hs)?;
        let gates = tape.add_row(pre, bound.var(self.bias))?;
        let hh = self.hidden;
        let i_pre = tape.slice_cols(gates, 0, hh)?;
        let f_pre = tape.slice_cols(gates, hh, 2 * hh)?;
        let g_pre = tape.slice_cols(gates, 2 * hh, 3 * hh)?;
        let o_pre = tape.slice_cols(gates, 3 * hh, 4 * hh)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let c_act = tape.tanh(c_new)?;
        let h_new = tape.mul(o, c_act)?;
        match mask {
            None => Ok((h_new, c_new)),
            Some(m) => {
                let inverse: Vec<f64> = m.data().iter().map(|&v| 1.0 - v).collect();
                let keep = tape.constant(m.clone());
                let drop = tape.constant(Tensor::matrix(m.rows(), 1, inverse)?);
                let h_live = tape.scale_rows(h_new, keep)?;
                let h_held = tape.scale_rows(h, drop)?;
                let c_live = tape.scale_rows(c_new, keep)?;
                let c_held = tape.scale_rows(c, drop)?;
                let h_out = tape.add(h_live, h_held)?;
                let c_out = tape.add(c_live, c_held)?;
                Ok((h_out, c_out))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Posterior heads.

/// Two-layer tanh MLP.
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        out: usize,
        rng: &mut ChaCha20Rng,
    ) -> Mlp {
        Mlp {
            w1: register_uniform(store, &format!("{prefix}.w1"), input, hidden, rng),
            b1: register_uniform(store, &format!("{prefix}.b1"), 1, hidden, rng),
            w2: register_uniform(store, &format!("{prefix}.w2"), hidden, out, rng),
            b2: register_uniform(store, &format!("{prefix}.b2"), 1, out, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let a = affine(tape, bound, x, self.w1, self.b1)?;
        let t = tape.tanh(a)?;
        affine(tape, bound, t, self.w2, self.b2)
    }
}

fn affine(tape: &mut Tape, bound: &BoundParams, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let xw = tape.matmul(x, bound.var(w))?;
    tape.add_row(xw, bound.var(b))
}

/// Maps the encoder's final hidden state to `(mu, log_sigma)`, each through
/// its own MLP followed by a batch-normalizing output layer.
pub struct PosteriorHead {
    mu: Mlp,
    mu_bn: BatchNorm,
    sigma: Mlp,
    sigma_bn: BatchNorm,
}

impl PosteriorHead {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        latent: usize,
        rng: &mut ChaCha20Rng,
    ) -> PosteriorHead {
        let mu = Mlp::register(store, &format!("{prefix}.mu"), input, hidden, latent, rng);
        let mu_bn = BatchNorm::register(store, &format!("{prefix}.mu.bn"), latent);
        let sigma = Mlp::register(store, &format!("{prefix}.sigma"), input, hidden, latent, rng);
        let sigma_bn = BatchNorm::register(store, &format!("{prefix}.sigma.bn"), latent);
        PosteriorHead {
            mu,
            mu_bn,
            sigma,
            sigma_bn,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        h: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Var)> {
        let mu_raw = self.mu.forward(tape, bound, h)?;
        let mu = self.mu_bn.forward(tape, bound, mu_raw, mode, updates)?;
        let ls_raw = self.sigma.forward(tape, bound, h)?;
        let log_sigma = self.sigma_bn.forward(tape, bound, ls_raw, mode, updates)?;
        Ok((mu, log_sigma))
    }
}

// ---------------------------------------------------------------------------
// Model configuration.

/// How the latent code conditions the decoder.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Injection {
    /// Only through the initial hidden/cell state.
    InitState,
    /// Initial state plus concatenation onto every input embedding.
    InitStateConcat,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub latent: usize,
    pub head_hidden: usize,
    pub injection: Injection,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults: embedding and hidden width 200, posterior-head hidden
    /// width 200, init-state-plus-concat injection, dropout 0.2.
    pub fn new(vocab: usize, latent: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            embedding: 200,
            hidden: 200,
            latent,
            head_hidden: 200,
            injection: Injection::InitStateConcat,
            dropout: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab <= crate::data::UNK {
            return Err(CoreError::Domain {
                op: "model vocab must cover the reserved token ids",
            });
        }
        if self.embedding == 0 || self.hidden == 0 || self.latent == 0 || self.head_hidden == 0 {
            return Err(CoreError::Domain {
                op: "model dimensions must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Domain {
                op: "dropout rate must lie in [0, 1)",
            });
        }
        Ok(())
    }

    /// Width of the decoder LSTM input under the configured injection.
    pub fn decoder_input(&self) -> usize {
        match self.injection {
            Injection::InitState => self.embedding,
            Injection::InitStateConcat => self.embedding + self.latent,
        }
    }
}

// ---------------------------------------------------------------------------
// The sequence VAE.

/// Tape handles for an encoded batch: posterior parameters plus any pending
/// batch-norm running-statistics updates (train mode only).
pub struct Posterior {
    pub mu: Var,
    pub log_sigma: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Token-sequence autoencoder: shared word embeddings, LSTM encoder,
/// posterior heads, and an LSTM decoder whose initial state is a linear map
/// of the latent code.
pub struct SeqVae {
    config: ModelConfig,
    embedding: ParamId,
    encoder: LstmParams,
    head: PosteriorHead,
    init_w: ParamId,
    init_b: ParamId,
    decoder: LstmParams,
    out_w: ParamId,
    out_b: ParamId,
}

/// Token selection rule for autoregressive decoding.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode {
    /// Highest-probability token, ties to the lowest id. Draws nothing from
    /// the RNG.
    Greedy,
    /// Sample from `softmax(logits / tau)`. `tau == 0` short-circuits to
    /// greedy.
    Temperature(f64),
}

impl SeqVae {
    /// Register all parameters in `store`, initialized uniformly in
    /// `[-INIT_RANGE, INIT_RANGE]` from a seeded stream (batch-norm layers
    /// start as the identity).
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<SeqVae> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let embedding = register_uniform(
            store,
            "embedding",
            config.vocab,
            config.embedding,
            &mut rng,
        );
        let encoder =
            LstmParams::register(store, "encoder", config.embedding, config.hidden, &mut rng);
        let head = PosteriorHead::register(
            store,
            "posterior",
            config.hidden,
            config.head_hidden,
            config.latent,
            &mut rng,
        );
        let init_w = register_uniform(
            store,
            "decoder_init.w",
            config.latent,
            2 * config.hidden,
            &mut rng,
        );
        let init_b = register_uniform(store, "decoder_init.b", 1, 2 * config.hidden, &mut rng);
        let decoder = LstmParams::register(
            store,
            "decoder",
            config.decoder_input(),
            config.hidden,
            &mut rng,
        );
        let out_w = register_uniform(store, "output.w", config.hidden, config.vocab, &mut rng);
        let out_b = register_uniform(store, "output.b", 1, config.vocab, &mut rng);
        Ok(SeqVae {
            config,
            embedding,
            encoder,
            head,
            init_w,
            init_b,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Run the encoder over a batch and map the final hidden state through
    /// the posterior heads. Rows frozen at their own sentence end never see
    /// padding. Steps where every row is padding are skipped entirely, so
    /// extending the pad length leaves the tape bit-identical.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &TokenBatch,
        mode: Mode,
    ) -> Result<Posterior> {
        let b = batch.batch_size();
        let mut h = tape.constant(Tensor::zeros(b, self.config.hidden));
        let mut c = h;
        for t in 0..batch.max_len() {
            let mask = batch.mask_col(t);
            if mask.data().iter().all(|&m| m == 0.0) {
                break;
            }
            let ids = batch.targets_at(t);
            let x = tape.embedding(bound.var(self.embedding), &ids)?;
            let full = mask.data().iter().all(|&m| m == 1.0);
            let opt = if full { None } else { Some(&mask) };
            let (h2, c2) = self.encoder.step(tape, bound, x, h, c, opt)?;
            h = h2;
            c = c2;
        }
        let mut updates = Vec::new();
        let (mu, log_sigma) = self.head.forward(tape, bound, h, mode, &mut updates)?;
        Ok(Posterior {
            mu,
            log_sigma,
            bn_updates: updates,
        })
    }

    /// Teacher-forced decode: feed the gold prefix, score the gold token at
    /// every position, and return per-sentence negative log-likelihoods as
    /// a `[B, 1]` column (masked positions contribute exactly zero).
    ///
    /// `dropout` supplies one `(input mask, hidden mask)` pair per timestep;
    /// `None` disables dropout. Masks are inverted-dropout scales, applied
    /// to the decoder input and to the hidden state entering the output
    /// projection (the recurrent path stays undropped).
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: Var,
        batch: &TokenBatch,
        dropout: Option<&[(Tensor, Tensor)]>,
    ) -> Result<Var> {
        let b = batch.batch_size();
        let zt = tape.value(z);
        if zt.rows() != b || zt.cols() != self.config.latent {
            return Err(CoreError::ShapeMismatch {
                op: "decode latent",
                lhs: zt.shape().to_vec(),
                rhs: vec![b, self.config.latent],
            });
        }
        let (mut h, mut c) = self.initial_state(tape, bound, z)?;
        let mut acc: Option<Var> = None;
        for t in 0..batch.max_len() {
            let mask = batch.mask_col(t);
            if mask.data().iter().all(|&m| m == 0.0) {
                break;
            }
            let step_masks = match dropout {
                Some(masks) => Some(masks.get(t).ok_or(CoreError::Domain {
                    op: "dropout masks shorter than the decoded sequence",
                })?),
                None => None,
            };
            let ids = batch.inputs_at(t);
            let emb = tape.embedding(bound.var(self.embedding), &ids)?;
            let x_raw = match self.config.injection {
                Injection::InitState => emb,
                Injection::InitStateConcat => tape.concat_cols(emb, z)?,
            };
            let x = match step_masks {
                Some((im, _)) => tape.dropout(x_raw, im)?,
                None => x_raw,
            };
            let full = mask.data().iter().all(|&m| m == 1.0);
            let opt = if full { None } else { Some(&mask) };
            let (h2, c2) = self.decoder.step(tape, bound, x, h, c, opt)?;
            h = h2;
            c = c2;
            let h_out = match step_masks {
                Some((_, hm)) => tape.dropout(h, hm)?,
                None => h,
            };
            let logits = affine(tape, bound, h_out, self.out_w, self.out_b)?;
            let lp = tape.log_softmax(logits)?;
            let targets = batch.targets_at(t);
            let picked = tape.row_select(lp, &targets)?;
            let mvar = tape.constant(mask);
            let masked = tape.scale_rows(picked, mvar)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, masked)?,
                None => masked,
            });
        }
        let total = acc.ok_or(CoreError::EmptyInput {
            what: "decoded batch",
        })?;
        tape.mul_scalar(total, -1.0)
    }

    /// Draw one `(input mask, hidden mask)` inverted-dropout pair per
    /// timestep, entries `0` with probability `dropout` and `1/(1-dropout)`
    /// otherwise. Draws advance step by step (input mask first), so a mask
    /// sequence for a longer horizon extends a shorter one bit-exactly.
    pub fn sample_dropout_masks(
        &self,
        batch: usize,
        steps: usize,
        rng: &mut ChaCha20Rng,
    ) -> Vec<(Tensor, Tensor)> {
        let p = self.config.dropout;
        let keep = 1.0 - p;
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            Tensor::matrix(rows, cols, data).expect("dropout mask")
        };
        (0..steps)
            .map(|_| {
                let im = draw(batch, self.config.decoder_input());
                let hm = draw(batch, self.config.hidden);
                (im, hm)
            })
            .collect()
    }

    /// Autoregressive decoding from BOS until EOS or `max_len`, batched over
    /// the rows of `z`. Runs entirely in eval mode (no dropout). Greedy mode
    /// never touches `rng`; temperature mode draws Gumbel noise row-major
    /// per step, once per vocabulary entry, for finished and live rows
    /// alike so row outcomes stay independent of other rows' lengths.
    pub fn decode_sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        max_len: usize,
        mode: DecodeMode,
        rng: &mut ChaCha20Rng,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 || max_len > MAX_SENTENCE_LEN {
            return Err(CoreError::Domain {
                op: "decode length must lie in 1..=200",
            });
        }
        if let DecodeMode::Temperature(tau) = mode {
            if !tau.is_finite() || tau < 0.0 {
                return Err(CoreError::Domain {
                    op: "temperature must be finite and nonnegative",
                });
            }
        }
        if z.cols() != self.config.latent {
            return Err(CoreError::ShapeMismatch {
                op: "decode latent",
                lhs: z.shape().to_vec(),
                rhs: vec![z.rows(), self.config.latent],
            });
        }
        let b = z.rows();
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (mut h, mut c) = self.initial_state(&mut tape, &bound, zv)?;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut prev = vec![BOS; b];
        for _ in 0..max_len {
            let emb = tape.embedding(bound.var(self.embedding), &prev)?;
            let x = match self.config.injection {
                Injection::InitState => emb,
                Injection::InitStateConcat => tape.concat_cols(emb, zv)?,
            };
            let (h2, c2) = self.decoder.step(&mut tape, &bound, x, h, c, None)?;
            h = h2;
            c = c2;
            let logits = affine(&mut tape, &bound, h, self.out_w, self.out_b)?;
            let lp = tape.log_softmax(logits)?;
            let scores = tape.value(lp);
            for (r, slot) in prev.iter_mut().enumerate() {
                let row = scores.row_slice(r);
                let tok = match mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Temperature(tau) => {
                        if tau == 0.0 {
                            argmax(row)
                        } else {
                            gumbel_argmax(row, tau, rng)
                        }
                    }
                };
                if !done[r] {
                    out[r].push(tok);
                    if tok == EOS {
                        done[r] = true;
                    }
                }
                *slot = tok;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    fn initial_state(&self, tape: &mut Tape, bound: &BoundParams, z: Var) -> Result<(Var, Var)> {
        let s0 = affine(tape, bound, z, self.init_w, self.init_b)?;
        let h = tape.slice_cols(s0, 0, self.config.hidden)?;
        let c = tape.slice_cols(s0, self.config.hidden, 2 * self.config.hidden)?;
        Ok((h, c))
    }
}

/// Pathwise sampling: `z = mu + exp(log_sigma) * noise` with `noise` held
/// constant, so gradients flow to `mu` and `log_sigma` only.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_sigma: Var, noise: &Tensor) -> Result<Var> {
    let sigma = tape.exp(log_sigma)?;
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
    // first maximum wins on ties
}

fn gumbel_argmax(row: &[f64], tau: f64, rng: &mut ChaCha20Rng) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        let u: f64 = (1.0 - rng.random::<f64>()).max(f64::MIN_POSITIVE);
        let g = -(-u.ln()).ln();
        let s = v / tau + g;
        if s > best_score {
            best_score = s;
            best = j;
        }
    }
    best
}

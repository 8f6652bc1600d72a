//! The three sequence-model components: conditional encoder, autoregressive
//! decoder and the feature estimator, plus parameter initialization,
//! feature standardization and checkpoint I/O.
//!
//! All forward passes are pure functions of a [`ParamStore`] and their
//! inputs. Training-time passes are recorded on a [`Tape`] so gradients can
//! flow; generation uses plain (untaped) math.
//!
//! The encoder runs an LSTM over per-step token embeddings with the
//! condition values concatenated to every step input and maps the final
//! hidden state to the mean and log-variance of a normal distribution. The
//! decoder is teacher-forced during training: step 0's input embedding is
//! an affine map of (latent, condition); step t consumes the embedding of
//! teacher step t-1; (latent, condition) ride along at every step. The
//! estimator consumes soft sequences (per-slot probability vectors) as
//! expected embeddings, passes them through an affine layer and an LSTM,
//! and maps the final hidden state to one value per conditioned feature.
//! It never sees the condition vector.

use crate::dataset::DatasetManifest;
use crate::dfs::{TokenSequence, SLOTS};
use crate::graph::FeatureName;
use crate::nn::{uniform_init, LstmVars, Owner, ParamId, ParamStore, Tape, Var};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Model dimensions and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Embedding width used for every token slot, in all three components.
    pub embed_dim: usize,
    /// Width of the affine layer in front of the estimator LSTM.
    pub estimator_pre_fc: usize,
    pub estimator_hidden: usize,
    /// One output per conditioned feature; must equal `condition_dim`.
    pub estimator_out: usize,
    pub condition_dim: usize,
    /// Timestamp capacity; timestamp vocabularies have size `max_nodes + 1`.
    pub max_nodes: usize,
    pub max_sequence_length: usize,
    pub kl_weight: f64,
    pub feature_loss_weight: f64,
}

impl ModelConfig {
    /// Per-slot vocabulary sizes including each slot's end symbol.
    pub fn vocab_sizes(&self) -> [usize; SLOTS] {
        TokenSequence::vocab_sizes(self.max_nodes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.latent_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.embed_dim,
            self.estimator_pre_fc,
            self.estimator_hidden,
            self.estimator_out,
            self.condition_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".to_string()));
        }
        if self.estimator_out != self.condition_dim {
            return Err(ModelError::Config(format!(
                "estimator_out ({}) must equal condition_dim ({})",
                self.estimator_out, self.condition_dim
            )));
        }
        if self.max_nodes < 2 || self.max_sequence_length < 2 {
            return Err(ModelError::Config(
                "max_nodes and max_sequence_length must be >= 2".to_string(),
            ));
        }
        for (name, w) in [("kl_weight", self.kl_weight), ("feature_loss_weight", self.feature_loss_weight)] {
            if !w.is_finite() || w < 0.0 {
                return Err(ModelError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub embed: [ParamId; SLOTS],
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub logvar_w: ParamId,
    pub logvar_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderIds {
    pub embed: [ParamId; SLOTS],
    pub start_w: ParamId,
    pub start_b: ParamId,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub head_w: [ParamId; SLOTS],
    pub head_b: [ParamId; SLOTS],
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorIds {
    pub embed: [ParamId; SLOTS],
    pub pre_w: ParamId,
    pub pre_b: ParamId,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// The trainable parameter collection, partitioned by owner for selective
/// freezing, with direct handles to every named array.
#[derive(Debug, Clone)]
pub struct ModelParams {
    store: ParamStore,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    pub estimator: EstimatorIds,
}

impl ModelParams {
    /// Initializes all parameters uniformly in [-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)], then sets every LSTM forget-gate bias slice to +1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = config.vocab_sizes();
        let e = config.embed_dim;
        let cond = config.condition_dim;
        let z = config.latent_dim;

        let lstm = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        prefix: &str,
                        owner: Owner,
                        input: usize,
                        hidden: usize| {
            let wx = store.add(format!("{prefix}.wx"), owner, uniform_init(rng, input, 4 * hidden, input));
            let wh = store.add(format!("{prefix}.wh"), owner, uniform_init(rng, hidden, 4 * hidden, hidden));
            let mut bias = uniform_init(rng, 1, 4 * hidden, hidden);
            bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
            let b = store.add(format!("{prefix}.b"), owner, bias);
            (wx, wh, b)
        };

        let embed_set = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, owner: Owner| {
            std::array::from_fn::<ParamId, SLOTS, _>(|s| {
                store.add(
                    format!("{prefix}.embed.{s}"),
                    owner,
                    uniform_init(rng, vocab[s], e, vocab[s]),
                )
            })
        };

        // encoder
        let enc_embed = embed_set(&mut store, &mut rng, "encoder", Owner::Encoder);
        let enc_in = SLOTS * e + cond;
        let (ewx, ewh, eb) =
            lstm(&mut store, &mut rng, "encoder.lstm", Owner::Encoder, enc_in, config.encoder_hidden);
        let h = config.encoder_hidden;
        let mu_w = store.add("encoder.mu.w", Owner::Encoder, uniform_init(&mut rng, h, z, h));
        let mu_b = store.add("encoder.mu.b", Owner::Encoder, uniform_init(&mut rng, 1, z, h));
        let logvar_w = store.add("encoder.logvar.w", Owner::Encoder, uniform_init(&mut rng, h, z, h));
        let logvar_b = store.add("encoder.logvar.b", Owner::Encoder, uniform_init(&mut rng, 1, z, h));
        let encoder = EncoderIds {
            embed: enc_embed,
            wx: ewx,
            wh: ewh,
            b: eb,
            mu_w,
            mu_b,
            logvar_w,
            logvar_b,
        };

        // decoder
        let dec_embed = embed_set(&mut store, &mut rng, "decoder", Owner::Decoder);
        let start_in = z + cond;
        let start_w = store.add(
            "decoder.start.w",
            Owner::Decoder,
            uniform_init(&mut rng, start_in, SLOTS * e, start_in),
        );
        let start_b = store.add(
            "decoder.start.b",
            Owner::Decoder,
            uniform_init(&mut rng, 1, SLOTS * e, start_in),
        );
        let dec_in = SLOTS * e + z + cond;
        let (dwx, dwh, db) =
            lstm(&mut store, &mut rng, "decoder.lstm", Owner::Decoder, dec_in, config.decoder_hidden);
        let hd = config.decoder_hidden;
        let head_w = std::array::from_fn::<ParamId, SLOTS, _>(|s| {
            store.add(format!("decoder.head.{s}.w"), Owner::Decoder, uniform_init(&mut rng, hd, vocab[s], hd))
        });
        let head_b = std::array::from_fn::<ParamId, SLOTS, _>(|s| {
            store.add(format!("decoder.head.{s}.b"), Owner::Decoder, uniform_init(&mut rng, 1, vocab[s], hd))
        });
        let decoder = DecoderIds {
            embed: dec_embed,
            start_w,
            start_b,
            wx: dwx,
            wh: dwh,
            b: db,
            head_w,
            head_b,
        };

        // estimator
        let est_embed = embed_set(&mut store, &mut rng, "estimator", Owner::Estimator);
        let pre_in = SLOTS * e;
        let pre_w = store.add(
            "estimator.pre.w",
            Owner::Estimator,
            uniform_init(&mut rng, pre_in, config.estimator_pre_fc, pre_in),
        );
        let pre_b = store.add(
            "estimator.pre.b",
            Owner::Estimator,
            uniform_init(&mut rng, 1, config.estimator_pre_fc, pre_in),
        );
        let (swx, swh, sb) = lstm(
            &mut store,
            &mut rng,
            "estimator.lstm",
            Owner::Estimator,
            config.estimator_pre_fc,
            config.estimator_hidden,
        );
        let hs = config.estimator_hidden;
        let out_w = store.add(
            "estimator.out.w",
            Owner::Estimator,
            uniform_init(&mut rng, hs, config.estimator_out, hs),
        );
        let out_b = store.add(
            "estimator.out.b",
            Owner::Estimator,
            uniform_init(&mut rng, 1, config.estimator_out, hs),
        );
        let estimator = EstimatorIds {
            embed: est_embed,
            pre_w,
            pre_b,
            wx: swx,
            wh: swh,
            b: sb,
            out_w,
            out_b,
        };

        Ok(ModelParams { store, encoder, decoder, estimator })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Rebinds the id tables after loading a store from a checkpoint.
    fn from_store(store: ParamStore) -> Result<Self, ModelError> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))
        };
        let embeds = |prefix: &str| -> Result<[ParamId; SLOTS], ModelError> {
            let mut out = [ParamId(0); SLOTS];
            for (s, slot) in out.iter_mut().enumerate() {
                *slot = find(&format!("{prefix}.embed.{s}"))?;
            }
            Ok(out)
        };
        let encoder = EncoderIds {
            embed: embeds("encoder")?,
            wx: find("encoder.lstm.wx")?,
            wh: find("encoder.lstm.wh")?,
            b: find("encoder.lstm.b")?,
            mu_w: find("encoder.mu.w")?,
            mu_b: find("encoder.mu.b")?,
            logvar_w: find("encoder.logvar.w")?,
            logvar_b: find("encoder.logvar.b")?,
        };
        let mut head_w = [ParamId(0); SLOTS];
        let mut head_b = [ParamId(0); SLOTS];
        for s in 0..SLOTS {
            head_w[s] = find(&format!("decoder.head.{s}.w"))?;
            head_b[s] = find(&format!("decoder.head.{s}.b"))?;
        }
        let decoder = DecoderIds {
            embed: embeds("decoder")?,
            start_w: find("decoder.start.w")?,
            start_b: find("decoder.start.b")?,
            wx: find("decoder.lstm.wx")?,
            wh: find("decoder.lstm.wh")?,
            b: find("decoder.lstm.b")?,
            head_w,
            head_b,
        };
        let estimator = EstimatorIds {
            embed: embeds("estimator")?,
            pre_w: find("estimator.pre.w")?,
            pre_b: find("estimator.pre.b")?,
            wx: find("estimator.lstm.wx")?,
            wh: find("estimator.lstm.wh")?,
            b: find("estimator.lstm.b")?,
            out_w: find("estimator.out.w")?,
            out_b: find("estimator.out.b")?,
        };
        Ok(ModelParams { store, encoder, decoder, estimator })
    }
}

/// A batch of token sequences laid out per step for the tape: slot index
/// vectors (padded with end symbols) and per-step masks.
pub struct TokenBatch {
    pub batch: usize,
    pub max_len: usize,
    pub max_nodes: usize,
    pub lengths: Vec<usize>,
    /// `slots[t][s][i]` is the slot-s token of sequence i at step t.
    pub slots: Vec<[Rc<Vec<usize>>; SLOTS]>,
    /// 1.0 while `t < lengths[i]`, else 0.0.
    pub masks: Vec<Array2<f64>>,
}

impl TokenBatch {
    pub fn new(seqs: &[&TokenSequence], max_nodes: usize) -> Self {
        assert!(!seqs.is_empty());
        let batch = seqs.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap();
        let end = TokenSequence::end_step(max_nodes);
        let mut slots = Vec::with_capacity(max_len);
        let mut masks = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let mut per_slot: [Vec<usize>; SLOTS] = Default::default();
            let mut mask = Array2::zeros((batch, 1));
            for (i, seq) in seqs.iter().enumerate() {
                let step = seq.steps().get(t).unwrap_or(&end);
                if t < seq.len() {
                    mask[[i, 0]] = 1.0;
                }
                for s in 0..SLOTS {
                    per_slot[s].push(step[s]);
                }
            }
            slots.push(per_slot.map(Rc::new));
            masks.push(mask);
        }
        TokenBatch {
            batch,
            max_len,
            max_nodes,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            slots,
            masks,
        }
    }

    /// (mask, 1-mask) constants for every step.
    pub fn mask_vars(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.masks
            .iter()
            .map(|m| {
                let mv = tape.constant(m.clone());
                let inv = tape.constant(m.mapv(|v| 1.0 - v));
                (mv, inv)
            })
            .collect()
    }
}

fn check_cond(tape: &Tape, config: &ModelConfig, cond: Var, batch: usize) -> Result<(), ModelError> {
    let dim = tape.value(cond).dim();
    if dim != (batch, config.condition_dim) {
        return Err(ModelError::Config(format!(
            "condition has shape {dim:?}, expected ({batch}, {})",
            config.condition_dim
        )));
    }
    Ok(())
}

fn check_batch(config: &ModelConfig, batch: &TokenBatch) -> Result<(), ModelError> {
    if batch.max_nodes != config.max_nodes {
        return Err(ModelError::Config(format!(
            "batch tokenized for max_nodes={}, model expects {}",
            batch.max_nodes, config.max_nodes
        )));
    }
    if batch.max_len > config.max_sequence_length {
        return Err(ModelError::Config(format!(
            "sequence length {} exceeds max_sequence_length {}",
            batch.max_len, config.max_sequence_length
        )));
    }
    Ok(())
}

/// Embeds one step's slot tokens and concatenates them (plus extras).
fn embed_step(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &[ParamId; SLOTS],
    indices: &[Rc<Vec<usize>>; SLOTS],
    extras: &[Var],
) -> Var {
    let mut parts = Vec::with_capacity(SLOTS + extras.len());
    for s in 0..SLOTS {
        let table = tape.param(store, tables[s]);
        parts.push(tape.gather_rows(table, indices[s].clone()));
    }
    parts.extend_from_slice(extras);
    tape.concat_cols(&parts)
}

/// Encoder pass over a batch: LSTM over token embeddings with the condition
/// concatenated to every step input; affine heads on the final hidden state.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    batch: &TokenBatch,
    cond: Var,
) -> Result<(Var, Var), ModelError> {
    check_batch(config, batch)?;
    check_cond(tape, config, cond, batch.batch)?;
    let store = &params.store;
    let ids = &params.encoder;
    let lstm = LstmVars::bind(tape, store, ids.wx, ids.wh, ids.b);
    let masks = batch.mask_vars(tape);
    let mut h = tape.constant(Array2::zeros((batch.batch, config.encoder_hidden)));
    let mut c = tape.constant(Array2::zeros((batch.batch, config.encoder_hidden)));
    for t in 0..batch.max_len {
        let x = embed_step(tape, store, &ids.embed, &batch.slots[t], &[cond]);
        let (m, inv) = masks[t];
        (h, c) = lstm.masked_step(tape, x, h, c, m, inv);
    }
    let mu_w = tape.param(store, ids.mu_w);
    let mu_b = tape.param(store, ids.mu_b);
    let mu = tape.affine(h, mu_w, mu_b);
    let lv_w = tape.param(store, ids.logvar_w);
    let lv_b = tape.param(store, ids.logvar_b);
    let logvar = tape.affine(h, lv_w, lv_b);
    Ok((mu, logvar))
}

/// latent = mu + exp(0.5 * logvar) * noise, on the tape.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: &Array2<f64>) -> Var {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let n = tape.constant(noise.clone());
    let scaled = tape.mul(sigma, n);
    tape.add(mu, scaled)
}

/// Untaped reparameterization for generation and tests.
pub fn reparameterize_plain(mu: &Array2<f64>, logvar: &Array2<f64>, noise: &Array2<f64>) -> Array2<f64> {
    mu + &(logvar.mapv(|v| (0.5 * v).exp()) * noise)
}

/// Teacher-forced decoder output: per-step, per-slot logits and softmax
/// probabilities.
pub struct DecoderOut {
    pub logits: Vec<[Var; SLOTS]>,
    pub probs: Vec<[Var; SLOTS]>,
}

/// Teacher-forced decoder pass. Step 0's input embedding is an affine map
/// of (latent, condition); step t consumes the embedding of teacher step
/// t-1; (latent, condition) are concatenated to every step input.
pub fn decoder_forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    latent: Var,
    cond: Var,
    teacher: &TokenBatch,
) -> Result<DecoderOut, ModelError> {
    check_batch(config, teacher)?;
    check_cond(tape, config, cond, teacher.batch)?;
    if tape.value(latent).dim() != (teacher.batch, config.latent_dim) {
        return Err(ModelError::Config(format!(
            "latent has shape {:?}, expected ({}, {})",
            tape.value(latent).dim(),
            teacher.batch,
            config.latent_dim
        )));
    }
    let store = &params.store;
    let ids = &params.decoder;
    let lstm = LstmVars::bind(tape, store, ids.wx, ids.wh, ids.b);
    let zc = tape.concat_cols(&[latent, cond]);
    let start_w = tape.param(store, ids.start_w);
    let start_b = tape.param(store, ids.start_b);
    let mut prev_embed = tape.affine(zc, start_w, start_b);
    let mut h = tape.constant(Array2::zeros((teacher.batch, config.decoder_hidden)));
    let mut c = tape.constant(Array2::zeros((teacher.batch, config.decoder_hidden)));
    let mut logits = Vec::with_capacity(teacher.max_len);
    let mut probs = Vec::with_capacity(teacher.max_len);
    for t in 0..teacher.max_len {
        let x = tape.concat_cols(&[prev_embed, latent, cond]);
        (h, c) = lstm.step(tape, x, h, c);
        let mut step_logits = [h; SLOTS];
        let mut step_probs = [h; SLOTS];
        for s in 0..SLOTS {
            let w = tape.param(store, ids.head_w[s]);
            let b = tape.param(store, ids.head_b[s]);
            let z = tape.affine(h, w, b);
            step_logits[s] = z;
            step_probs[s] = tape.softmax_rows(z);
        }
        logits.push(step_logits);
        probs.push(step_probs);
        if t + 1 < teacher.max_len {
            prev_embed = embed_step(tape, store, &ids.embed, &teacher.slots[t], &[]);
        }
    }
    Ok(DecoderOut { logits, probs })
}

/// Estimator pass over per-step, per-slot probability vectors. Each slot's
/// probabilities multiply that slot's embedding table (an expected
/// embedding); the concatenation passes through the pre-LSTM affine layer,
/// the LSTM, and the output head. No condition input exists on this path.
pub fn estimator_forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    soft_steps: &[[Var; SLOTS]],
    masks: &[(Var, Var)],
) -> Result<Var, ModelError> {
    if soft_steps.is_empty() {
        return Err(ModelError::Config("estimator input has no steps".to_string()));
    }
    if soft_steps.len() > config.max_sequence_length {
        return Err(ModelError::Config(format!(
            "sequence length {} exceeds max_sequence_length {}",
            soft_steps.len(),
            config.max_sequence_length
        )));
    }
    assert_eq!(soft_steps.len(), masks.len());
    let store = &params.store;
    let ids = &params.estimator;
    let vocab = config.vocab_sizes();
    let batch = tape.value(soft_steps[0][0]).nrows();
    for step in soft_steps {
        for s in 0..SLOTS {
            let dim = tape.value(step[s]).dim();
            if dim != (batch, vocab[s]) {
                return Err(ModelError::Config(format!(
                    "soft slot {s} has shape {dim:?}, expected ({batch}, {})",
                    vocab[s]
                )));
            }
        }
    }
    let lstm = LstmVars::bind(tape, store, ids.wx, ids.wh, ids.b);
    let pre_w = tape.param(store, ids.pre_w);
    let pre_b = tape.param(store, ids.pre_b);
    let mut h = tape.constant(Array2::zeros((batch, config.estimator_hidden)));
    let mut c = tape.constant(Array2::zeros((batch, config.estimator_hidden)));
    for (step, &(m, inv)) in soft_steps.iter().zip(masks) {
        let mut parts = Vec::with_capacity(SLOTS);
        for s in 0..SLOTS {
            let table = tape.param(store, ids.embed[s]);
            parts.push(tape.matmul(step[s], table));
        }
        let expected = tape.concat_cols(&parts);
        let x = tape.affine(expected, pre_w, pre_b);
        (h, c) = lstm.masked_step(tape, x, h, c, m, inv);
    }
    let out_w = tape.param(store, ids.out_w);
    let out_b = tape.param(store, ids.out_b);
    Ok(tape.affine(h, out_w, out_b))
}

/// Per-step, per-slot probability vectors for one sequence; the
/// differentiable stand-in for hard tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSequence {
    pub steps: Vec<[Vec<f64>; SLOTS]>,
}

impl SoftSequence {
    /// Checks every slot distribution is non-negative and sums to 1 within
    /// 1e-6.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (t, step) in self.steps.iter().enumerate() {
            for (s, dist) in step.iter().enumerate() {
                if dist.iter().any(|&p| p < 0.0) {
                    return Err(ModelError::Config(format!(
                        "negative probability at step {t} slot {s}"
                    )));
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(ModelError::Config(format!(
                        "slot distribution sums to {sum} at step {t} slot {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One-hot soft form of a hard token sequence.
    pub fn one_hot(seq: &TokenSequence) -> Self {
        let vocab = TokenSequence::vocab_sizes(seq.max_nodes());
        let steps = seq
            .steps()
            .iter()
            .map(|step| {
                std::array::from_fn(|s| {
                    let mut dist = vec![0.0; vocab[s]];
                    dist[step[s]] = 1.0;
                    dist
                })
            })
            .collect();
        SoftSequence { steps }
    }
}

// ---------------------------------------------------------------------------
// Plain (untaped) forward passes for generation and evaluation.
// ---------------------------------------------------------------------------

struct PlainLstm<'a> {
    wx: &'a Array2<f64>,
    wh: &'a Array2<f64>,
    b: &'a Array2<f64>,
    hidden: usize,
}

impl<'a> PlainLstm<'a> {
    fn bind(store: &'a ParamStore, wx: ParamId, wh: ParamId, b: ParamId) -> Self {
        PlainLstm {
            wx: store.get(wx),
            wh: store.get(wh),
            b: store.get(b),
            hidden: store.get(wh).nrows(),
        }
    }

    fn step(&self, x: &Array1<f64>, h: &mut Array1<f64>, c: &mut Array1<f64>) {
        let hd = self.hidden;
        let mut gates = x.dot(self.wx) + h.dot(self.wh);
        gates += &self.b.row(0);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hd {
            let i = sig(gates[j]);
            let f = sig(gates[hd + j]);
            let g = gates[2 * hd + j].tanh();
            let o = sig(gates[3 * hd + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
}

/// How generation turns per-slot logits into tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    /// Deterministic: highest-probability token.
    Argmax,
    /// Categorical draw at the given softmax temperature.
    Temperature(f64),
}

impl Sampler {
    fn draw(&self, logits: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
        match self {
            Sampler::Argmax => {
                let mut best = 0;
                for (i, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = i;
                    }
                }
                best
            }
            Sampler::Temperature(temp) => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> =
                    logits.iter().map(|&v| ((v - max) / temp).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    u -= w;
                    if u <= 0.0 {
                        return i;
                    }
                }
                weights.len() - 1
            }
        }
    }
}

/// Autoregressive generation: each step's sampled tokens feed the next
/// step. Stops at the end-of-sequence token or after `max_steps` content
/// steps, appending the terminal step either way.
pub fn decoder_generate(
    params: &ModelParams,
    config: &ModelConfig,
    latent: &Array1<f64>,
    cond_std: &[f64],
    sampler: Sampler,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> TokenSequence {
    assert!(max_steps + 1 <= config.max_sequence_length);
    assert_eq!(cond_std.len(), config.condition_dim);
    let store = &params.store;
    let ids = &params.decoder;
    let vocab = config.vocab_sizes();
    let ts_end = TokenSequence::end_symbol(config.max_nodes, 0);
    let lstm = PlainLstm::bind(store, ids.wx, ids.wh, ids.b);

    let mut zc = Array1::zeros(config.latent_dim + config.condition_dim);
    zc.slice_mut(ndarray::s![..config.latent_dim]).assign(latent);
    for (i, &v) in cond_std.iter().enumerate() {
        zc[config.latent_dim + i] = v;
    }
    let mut prev_embed = zc.dot(store.get(ids.start_w)) + &store.get(ids.start_b).row(0);

    let mut h = Array1::zeros(config.decoder_hidden);
    let mut c = Array1::zeros(config.decoder_hidden);
    let mut steps: Vec<[usize; SLOTS]> = Vec::new();
    for _ in 0..max_steps {
        let mut x = Array1::zeros(SLOTS * config.embed_dim + config.latent_dim + config.condition_dim);
        x.slice_mut(ndarray::s![..SLOTS * config.embed_dim]).assign(&prev_embed);
        x.slice_mut(ndarray::s![
            SLOTS * config.embed_dim..SLOTS * config.embed_dim + config.latent_dim
        ])
        .assign(latent);
        for (i, &v) in cond_std.iter().enumerate() {
            x[SLOTS * config.embed_dim + config.latent_dim + i] = v;
        }
        lstm.step(&x, &mut h, &mut c);

        let mut step = [0usize; SLOTS];
        for s in 0..SLOTS {
            let logits = h.dot(store.get(ids.head_w[s])) + &store.get(ids.head_b[s]).row(0);
            debug_assert_eq!(logits.len(), vocab[s]);
            step[s] = sampler.draw(&logits, rng);
        }
        if step[0] == ts_end {
            break;
        }
        steps.push(step);
        let mut embed = Array1::zeros(SLOTS * config.embed_dim);
        for s in 0..SLOTS {
            let row = store.get(ids.embed[s]).row(step[s]);
            embed
                .slice_mut(ndarray::s![s * config.embed_dim..(s + 1) * config.embed_dim])
                .assign(&row);
        }
        prev_embed = embed;
    }
    steps.push(TokenSequence::end_step(config.max_nodes));
    TokenSequence::from_steps(steps, config.max_nodes)
}

/// Untaped estimator pass on a hard token sequence (the degenerate one-hot
/// case, used at estimator-evaluation time).
pub fn estimator_forward_hard(
    params: &ModelParams,
    config: &ModelConfig,
    seq: &TokenSequence,
) -> Vec<f64> {
    let store = &params.store;
    let ids = &params.estimator;
    let lstm = PlainLstm::bind(store, ids.wx, ids.wh, ids.b);
    let mut h = Array1::zeros(config.estimator_hidden);
    let mut c = Array1::zeros(config.estimator_hidden);
    for step in seq.steps() {
        let mut embed = Array1::zeros(SLOTS * config.embed_dim);
        for s in 0..SLOTS {
            let row = store.get(ids.embed[s]).row(step[s]);
            embed
                .slice_mut(ndarray::s![s * config.embed_dim..(s + 1) * config.embed_dim])
                .assign(&row);
        }
        let x = embed.dot(store.get(ids.pre_w)) + &store.get(ids.pre_b).row(0);
        lstm.step(&x, &mut h, &mut c);
    }
    let out = h.dot(store.get(ids.out_w)) + &store.get(ids.out_b).row(0);
    out.to_vec()
}

// ---------------------------------------------------------------------------
// Feature standardization and checkpoints.
// ---------------------------------------------------------------------------

/// Per-feature mean/std computed on the training set; condition values are
/// z-scored with these before entering any network. Reports stay in raw
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub order: Vec<FeatureName>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let k = manifest.feature_order.len();
        let n = manifest.records.len() as f64;
        let mut mean = vec![0.0; k];
        for r in &manifest.records {
            for (i, (_, v)) in r.features.entries().iter().enumerate() {
                mean[i] += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; k];
        for r in &manifest.records {
            for (i, (_, v)) in r.features.entries().iter().enumerate() {
                var[i] += (v - mean[i]).powi(2);
            }
        }
        let std = var.iter().map(|&v| (v / n).sqrt().max(1e-8)).collect();
        FeatureStats { order: manifest.feature_order.clone(), mean, std }
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        assert_eq!(raw.len(), self.mean.len());
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }
}

/// Everything needed to resume or generate: config, standardization stats,
/// the schedule position (completed training phases) and all parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: FeatureStats,
    pub completed_phases: u32,
    pub params: ModelParams,
}

const CKPT_MAGIC: &[u8; 8] = b"GGENCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: ModelConfig,
    stats: FeatureStats,
    completed_phases: u32,
    arrays: Vec<CkptArray>,
}

#[derive(Serialize, Deserialize)]
struct CkptArray {
    name: String,
    owner: Owner,
    rows: usize,
    cols: usize,
}

/// Writes a checkpoint: magic, version, a JSON header describing every
/// named array (with owner tags), then the arrays' f64 values little-endian
/// in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let store = ckpt.params.store();
    let arrays: Vec<CkptArray> = store
        .ids()
        .map(|id| {
            let e = store.entry(id);
            CkptArray {
                name: e.name.clone(),
                owner: e.owner,
                rows: e.value.nrows(),
                cols: e.value.ncols(),
            }
        })
        .collect();
    let header = CkptHeader {
        version: CKPT_VERSION,
        config: ckpt.config.clone(),
        stats: ckpt.stats.clone(),
        completed_phases: ckpt.completed_phases,
        arrays,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header serialization: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    out.write_all(CKPT_MAGIC).map_err(io_err)?;
    out.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    out.write_all(&header_json).map_err(io_err)?;
    for id in store.ids() {
        for &x in store.get(id).iter() {
            out.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic; not a checkpoint file".to_string()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io_err)?;
    let header: CkptHeader = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::Checkpoint(format!("header parse: {e}")))?;
    header.config.validate()?;
    let mut store = ParamStore::new();
    for a in &header.arrays {
        let mut data = vec![0f64; a.rows * a.cols];
        let mut buf = [0u8; 8];
        for x in &mut data {
            file.read_exact(&mut buf).map_err(io_err)?;
            *x = f64::from_le_bytes(buf);
        }
        let value = Array2::from_shape_vec((a.rows, a.cols), data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        store.add(a.name.clone(), a.owner, value);
    }
    let params = ModelParams::from_store(store)?;
    Ok(Checkpoint {
        config: header.config,
        stats: header.stats,
        completed_phases: header.completed_phases,
        params,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dfs::{self, DfsCode, DfsEdge};
    use crate::graph::Graph;
    use ndarray::array;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            encoder_hidden: 6,
            decoder_hidden: 6,
            embed_dim: 3,
            estimator_pre_fc: 5,
            estimator_hidden: 6,
            estimator_out: 1,
            condition_dim: 1,
            max_nodes: 5,
            max_sequence_length: 6,
            kl_weight: 1.0,
            feature_loss_weight: 1.0,
        }
    }

    fn triangle_tokens(config: &ModelConfig) -> TokenSequence {
        let g = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        dfs::to_tokens(&dfs::encode(&g).unwrap(), config.max_nodes).unwrap()
    }

    fn path_tokens(config: &ModelConfig) -> TokenSequence {
        let g = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        dfs::to_tokens(&dfs::encode(&g).unwrap(), config.max_nodes).unwrap()
    }

    fn zeroed(params: &mut ModelParams) {
        for id in params.store().ids().collect::<Vec<_>>() {
            params.store_mut().get_mut(id).fill(0.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.validate().unwrap();
        c.estimator_out = 2;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.kl_weight = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_output_shapes() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        let seq = triangle_tokens(&config);
        let batch = TokenBatch::new(&[&seq, &seq], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.1], [0.2]]);
        let (mu, logvar) = encoder_forward(&mut tape, &params, &config, &batch, cond).unwrap();
        assert_eq!(tape.value(mu).dim(), (2, config.latent_dim));
        assert_eq!(tape.value(logvar).dim(), (2, config.latent_dim));
    }

    #[test]
    fn encoder_condition_dim_mismatch_is_config_error() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        let seq = triangle_tokens(&config);
        let batch = TokenBatch::new(&[&seq], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.1, 0.2]]);
        assert!(matches!(
            encoder_forward(&mut tape, &params, &config, &batch, cond),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn zero_params_give_zero_mu_logvar() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 1).unwrap();
        zeroed(&mut params);
        let seq = triangle_tokens(&config);
        let batch = TokenBatch::new(&[&seq], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.5]]);
        let (mu, logvar) = encoder_forward(&mut tape, &params, &config, &batch, cond).unwrap();
        assert!(tape.value(mu).iter().all(|&v| v == 0.0));
        assert!(tape.value(logvar).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_sequences_give_different_mu() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 42).unwrap();
        let a = triangle_tokens(&config);
        let b = path_tokens(&config);
        let batch = TokenBatch::new(&[&a, &b], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.0], [0.0]]);
        let (mu, _) = encoder_forward(&mut tape, &params, &config, &batch, cond).unwrap();
        let m = tape.value(mu);
        let row_diff: f64 = (0..config.latent_dim)
            .map(|j| (m[[0, j]] - m[[1, j]]).abs())
            .sum();
        assert!(row_diff > 1e-9);
    }

    #[test]
    fn reparameterize_examples() {
        let mu = array![[1.0, -2.0]];
        let logvar = array![[0.0, 0.0]];
        // noise 0 -> latent = mu
        let z = reparameterize_plain(&mu, &logvar, &Array2::zeros((1, 2)));
        assert_eq!(z, mu);
        // logvar 0 -> mu + noise
        let noise = array![[0.3, 0.7]];
        let z = reparameterize_plain(&mu, &logvar, &noise);
        assert_eq!(z, &mu + &noise);
        // mu 0, logvar = 2 ln 2, noise 1 -> 2
        let logvar = Array2::from_elem((1, 2), 2.0 * 2f64.ln());
        let z = reparameterize_plain(&Array2::zeros((1, 2)), &logvar, &Array2::ones((1, 2)));
        assert!(z.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        // tape path agrees
        let mut tape = Tape::new();
        let muv = tape.constant(mu.clone());
        let lv = tape.constant(Array2::zeros((1, 2)));
        let z = reparameterize(&mut tape, muv, lv, &noise);
        assert_eq!(tape.value(z), &(&mu + &noise));
    }

    #[test]
    fn decoder_probs_sum_to_one_and_match_length() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 7).unwrap();
        let seq = triangle_tokens(&config);
        let teacher = TokenBatch::new(&[&seq], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.3]]);
        let latent = tape.constant(Array2::zeros((1, config.latent_dim)));
        let out = decoder_forward(&mut tape, &params, &config, latent, cond, &teacher).unwrap();
        assert_eq!(out.probs.len(), seq.len());
        for step in &out.probs {
            for s in 0..SLOTS {
                let p = tape.value(step[s]);
                assert!((p.sum() - 1.0).abs() < 1e-6);
                assert!(p.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_decoder_probs() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 7).unwrap();
        zeroed(&mut params);
        let seq = triangle_tokens(&config);
        let teacher = TokenBatch::new(&[&seq], config.max_nodes);
        let mut tape = Tape::new();
        let cond = tape.constant(array![[0.3]]);
        let latent = tape.constant(Array2::zeros((1, config.latent_dim)));
        let out = decoder_forward(&mut tape, &params, &config, latent, cond, &teacher).unwrap();
        let vocab = config.vocab_sizes();
        for step in &out.probs {
            for s in 0..SLOTS {
                let p = tape.value(step[s]);
                let uniform = 1.0 / vocab[s] as f64;
                assert!(p.iter().all(|&v| (v - uniform).abs() < 1e-12));
            }
        }
    }

    /// Independent scalar LSTM oracle: explicit per-gate loops, no shared
    /// code with the tape implementation.
    fn oracle_lstm_step(
        wx: &Array2<f64>,
        wh: &Array2<f64>,
        b: &Array2<f64>,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hidden = wh.nrows();
        let mut h_out = vec![0.0; hidden];
        let mut c_out = vec![0.0; hidden];
        let gate = |col: usize| -> f64 {
            let mut acc = b[[0, col]];
            for (k, &xv) in x.iter().enumerate() {
                acc += xv * wx[[k, col]];
            }
            for (k, &hv) in h.iter().enumerate() {
                acc += hv * wh[[k, col]];
            }
            acc
        };
        for j in 0..hidden {
            let i_g = 1.0 / (1.0 + (-gate(j)).exp());
            let f_g = 1.0 / (1.0 + (-gate(hidden + j)).exp());
            let g_g = gate(2 * hidden + j).tanh();
            let o_g = 1.0 / (1.0 + (-gate(3 * hidden + j)).exp());
            c_out[j] = f_g * c[j] + i_g * g_g;
            h_out[j] = o_g * c_out[j].tanh();
        }
        (h_out, c_out)
    }

    #[test]
    fn tape_lstm_matches_scalar_oracle() {
        use crate::nn::uniform_init;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (input, hidden) = (4, 3);
        let mut store = ParamStore::new();
        let wx = store.add("wx", Owner::Encoder, uniform_init(&mut rng, input, 4 * hidden, input));
        let wh = store.add("wh", Owner::Encoder, uniform_init(&mut rng, hidden, 4 * hidden, hidden));
        let b = store.add("b", Owner::Encoder, uniform_init(&mut rng, 1, 4 * hidden, hidden));
        let x = uniform_init(&mut rng, 1, input, 1);

        let mut tape = Tape::new();
        let lstm = LstmVars::bind(&mut tape, &store, wx, wh, b);
        let h0 = tape.constant(Array2::zeros((1, hidden)));
        let c0 = tape.constant(Array2::zeros((1, hidden)));
        let xv = tape.constant(x.clone());
        let (h1, c1) = lstm.step(&mut tape, xv, h0, c0);
        let (h2, _) = lstm.step(&mut tape, xv, h1, c1);

        let (oh1, oc1) = oracle_lstm_step(
            store.get(wx),
            store.get(wh),
            store.get(b),
            x.row(0).as_slice().unwrap(),
            &vec![0.0; hidden],
            &vec![0.0; hidden],
        );
        let (oh2, _) = oracle_lstm_step(
            store.get(wx),
            store.get(wh),
            store.get(b),
            x.row(0).as_slice().unwrap(),
            &oh1,
            &oc1,
        );
        for j in 0..hidden {
            assert!((tape.value(h1)[[0, j]] - oh1[j]).abs() < 1e-10);
            assert!((tape.value(h2)[[0, j]] - oh2[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn plain_lstm_matches_scalar_oracle() {
        use crate::nn::uniform_init;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (input, hidden) = (5, 4);
        let mut store = ParamStore::new();
        let wx = store.add("wx", Owner::Decoder, uniform_init(&mut rng, input, 4 * hidden, input));
        let wh = store.add("wh", Owner::Decoder, uniform_init(&mut rng, hidden, 4 * hidden, hidden));
        let b = store.add("b", Owner::Decoder, uniform_init(&mut rng, 1, 4 * hidden, hidden));
        let lstm = PlainLstm::bind(&store, wx, wh, b);
        let x = uniform_init(&mut rng, 1, input, 1);
        let mut h = Array1::zeros(hidden);
        let mut c = Array1::zeros(hidden);
        lstm.step(&x.row(0).to_owned(), &mut h, &mut c);
        let (oh, oc) = oracle_lstm_step(
            store.get(wx),
            store.get(wh),
            store.get(b),
            x.row(0).as_slice().unwrap(),
            &vec![0.0; hidden],
            &vec![0.0; hidden],
        );
        for j in 0..hidden {
            assert!((h[j] - oh[j]).abs() < 1e-10);
            assert!((c[j] - oc[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn estimator_output_dim_is_condition_dim() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 9).unwrap();
        let seq = triangle_tokens(&config);
        let batch = TokenBatch::new(&[&seq, &seq], config.max_nodes);
        let mut tape = Tape::new();
        let soft: Vec<[Var; SLOTS]> = batch
            .slots
            .iter()
            .map(|slot_ix| {
                std::array::from_fn(|s| {
                    let vocab = config.vocab_sizes()[s];
                    let mut m = Array2::zeros((2, vocab));
                    for (i, &ix) in slot_ix[s].iter().enumerate() {
                        m[[i, ix]] = 1.0;
                    }
                    tape.constant(m)
                })
            })
            .collect();
        let masks = batch.mask_vars(&mut tape);
        let est = estimator_forward(&mut tape, &params, &config, &soft, &masks).unwrap();
        assert_eq!(tape.value(est).dim(), (2, config.condition_dim));
    }

    #[test]
    fn zero_params_estimator_outputs_bias() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 9).unwrap();
        zeroed(&mut params);
        let out_b = params.estimator.out_b;
        params.store_mut().get_mut(out_b)[[0, 0]] = 0.75;
        let seq = triangle_tokens(&config);
        let out = estimator_forward_hard(&params, &config, &seq);
        assert_eq!(out, vec![0.75]);
    }

    #[test]
    fn one_hot_soft_matches_hard_estimator() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 31).unwrap();
        let seq = triangle_tokens(&config);
        let hard = estimator_forward_hard(&params, &config, &seq);

        let soft = SoftSequence::one_hot(&seq);
        soft.validate().unwrap();
        let mut tape = Tape::new();
        let soft_vars: Vec<[Var; SLOTS]> = soft
            .steps
            .iter()
            .map(|step| {
                std::array::from_fn(|s| {
                    let row = Array2::from_shape_vec((1, step[s].len()), step[s].clone()).unwrap();
                    tape.constant(row)
                })
            })
            .collect();
        let ones = Array2::ones((1, 1));
        let masks: Vec<(Var, Var)> = (0..soft.len())
            .map(|_| {
                let m = tape.constant(ones.clone());
                let inv = tape.constant(Array2::zeros((1, 1)));
                (m, inv)
            })
            .collect();
        let est = estimator_forward(&mut tape, &params, &config, &soft_vars, &masks).unwrap();
        assert!((tape.value(est)[[0, 0]] - hard[0]).abs() < 1e-10);
    }

    #[test]
    fn soft_sequence_validation_catches_bad_distributions() {
        let bad = SoftSequence { steps: vec![std::array::from_fn(|_| vec![0.6, 0.6])] };
        assert!(bad.validate().is_err());
        let neg = SoftSequence { steps: vec![std::array::from_fn(|_| vec![1.5, -0.5])] };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn generate_argmax_is_deterministic() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 11).unwrap();
        let latent = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let mut rng1 = ChaCha8Rng::seed_from_u64(0);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let a = decoder_generate(&params, &config, &latent, &[0.5], Sampler::Argmax, 5, &mut rng1);
        let b = decoder_generate(&params, &config, &latent, &[0.5], Sampler::Argmax, 5, &mut rng2);
        assert_eq!(a, b);
    }

    #[test]
    fn generate_respects_max_steps() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 13).unwrap();
        let latent = Array1::zeros(config.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq =
            decoder_generate(&params, &config, &latent, &[0.0], Sampler::Temperature(1.0), 1, &mut rng);
        assert!(seq.len() <= 2);
        assert_eq!(*seq.steps().last().unwrap(), TokenSequence::end_step(config.max_nodes));
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 17).unwrap();
        let stats = FeatureStats {
            order: vec![FeatureName::Aspl],
            mean: vec![2.5],
            std: vec![0.8],
        };
        let ckpt = Checkpoint { config: config.clone(), stats, completed_phases: 3, params };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ggc");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.completed_phases, 3);
        assert_eq!(loaded.stats.mean, vec![2.5]);
        for id in ckpt.params.store().ids() {
            let name = &ckpt.params.store().entry(id).name;
            let lid = loaded.params.store().find(name).unwrap();
            assert_eq!(loaded.params.store().get(lid), ckpt.params.store().get(id));
            assert_eq!(loaded.params.store().entry(lid).owner, ckpt.params.store().entry(id).owner);
        }
        // corrupt magic is rejected
        std::fs::write(dir.path().join("junk.ggc"), b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&dir.path().join("junk.ggc")).is_err());
    }

    #[test]
    fn feature_stats_standardize() {
        let g1 = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        let g2 = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let (m, _) = crate::dataset::build_manifest(&[g1, g2], &[FeatureName::Aspl]).unwrap();
        let stats = FeatureStats::from_manifest(&m);
        // values 4/3 and 1 -> mean 7/6
        assert!((stats.mean[0] - 7.0 / 6.0).abs() < 1e-12);
        let z = stats.standardize(&[7.0 / 6.0]);
        assert!(z[0].abs() < 1e-9);
    }

    #[test]
    fn token_batch_masks_and_padding() {
        let config = tiny_config();
        let tri = triangle_tokens(&config); // 4 steps
        let single = dfs::to_tokens(
            &DfsCode::new(vec![DfsEdge::unlabeled(0, 1)]).unwrap(),
            config.max_nodes,
        )
        .unwrap(); // 2 steps
        let batch = TokenBatch::new(&[&tri, &single], config.max_nodes);
        assert_eq!(batch.max_len, 4);
        assert_eq!(batch.lengths, vec![4, 2]);
        assert_eq!(batch.masks[1][[1, 0]], 1.0);
        assert_eq!(batch.masks[2][[1, 0]], 0.0);
        // padded steps hold the end step
        assert_eq!(batch.slots[3][0][1], TokenSequence::end_symbol(config.max_nodes, 0));
    }
}

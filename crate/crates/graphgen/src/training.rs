//! Losses and the alternate training schedule.
//!
//! Training alternates between two phases. The generator phase updates the
//! encoder and decoder while the estimator is frozen; its loss is
//! reconstruction + KL, plus (from the second iteration on) the feature
//! feedback term: the frozen estimator reads the soft reconstruction and
//! its squared error against the true feature values joins the loss, so the
//! feature error back-propagates into the generator. The estimator phase
//! freezes the generator and fits the estimator on reconstructions the
//! frozen generator produces. Freezing one side per phase keeps the
//! condition information from leaking into the estimator.
//!
//! Frozen partitions enter each tape as constants, so a frozen parameter
//! has no gradient at all; the optimizer only ever sees the active
//! partition. Phase-boundary hashes in the trace make freezing auditable
//! bit-for-bit.

use crate::dataset::DatasetManifest;
use crate::dfs::{self, TokenSequence, SLOTS};
use crate::graph::FeatureVector;
use crate::model::{
    decoder_forward, encoder_forward, estimator_forward, reparameterize, FeatureStats,
    ModelConfig, ModelError, ModelParams, SoftSequence, TokenBatch,
};
use crate::nn::{Gradients, Owner, ParamId, ParamStore, Tape, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training contract violated: {0}")]
    Contract(String),
    #[error("training data error: {0}")]
    Data(String),
    #[error("divergence: non-finite loss at iteration {iteration}, {phase} phase, epoch {epoch}")]
    Divergence {
        iteration: usize,
        phase: TrainPhase,
        epoch: usize,
        trace: Box<TrainTrace>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which side of the alternate schedule is training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    /// Encoder + decoder update; estimator frozen.
    Generator,
    /// Estimator updates; encoder + decoder frozen.
    Estimator,
}

impl TrainPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainPhase::Generator => "generator",
            TrainPhase::Estimator => "estimator",
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub generator_epochs_per_phase: usize,
    pub estimator_epochs_per_phase: usize,
    pub alternate_iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the feature feedback term; 0 gives the plain conditional
    /// VAE baseline.
    pub feature_loss_weight: f64,
    /// Global gradient-norm clip applied to the active partition.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let counts = [
            ("batch_size", self.batch_size),
            ("generator_epochs_per_phase", self.generator_epochs_per_phase),
            ("estimator_epochs_per_phase", self.estimator_epochs_per_phase),
            ("alternate_iterations", self.alternate_iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::Contract(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Contract("learning_rate must be positive".to_string()));
        }
        if !(self.feature_loss_weight.is_finite() && self.feature_loss_weight >= 0.0) {
            return Err(TrainError::Contract("feature_loss_weight must be >= 0".to_string()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(TrainError::Contract("grad_clip must be positive".to_string()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Public loss operations (plain values, batch-averaged).
// ---------------------------------------------------------------------------

/// Sum over steps and slots of categorical cross-entropy of each soft
/// prediction against the target token, averaged over the batch.
pub fn reconstruction_loss(
    soft: &[SoftSequence],
    targets: &[&TokenSequence],
) -> Result<f64, TrainError> {
    if soft.len() != targets.len() {
        return Err(TrainError::Contract(format!(
            "batch size mismatch: {} soft vs {} target sequences",
            soft.len(),
            targets.len()
        )));
    }
    if soft.is_empty() {
        return Err(TrainError::Contract("empty batch".to_string()));
    }
    let mut total = 0.0;
    for (s, t) in soft.iter().zip(targets) {
        if s.len() != t.len() {
            return Err(TrainError::Contract(format!(
                "length mismatch: soft {} vs target {}",
                s.len(),
                t.len()
            )));
        }
        for (dists, step) in s.steps.iter().zip(t.steps()) {
            for (slot, dist) in dists.iter().enumerate() {
                total -= dist[step[slot]].ln();
            }
        }
    }
    Ok(total / soft.len() as f64)
}

/// 0.5 * sum_d (mu_d^2 + exp(logvar_d) - 1 - logvar_d), averaged over the
/// batch (rows).
pub fn kl_loss(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    assert_eq!(mu.dim(), logvar.dim());
    let per_row: f64 = mu
        .rows()
        .into_iter()
        .zip(logvar.rows())
        .map(|(m, lv)| {
            m.iter()
                .zip(lv.iter())
                .map(|(&mu_d, &lv_d)| mu_d * mu_d + lv_d.exp() - 1.0 - lv_d)
                .sum::<f64>()
        })
        .sum();
    0.5 * per_row / mu.nrows() as f64
}

/// Mean squared error over feature entries, averaged over the batch. Orders
/// must match entry-for-entry.
pub fn feature_loss(
    estimates: &[FeatureVector],
    truths: &[FeatureVector],
) -> Result<f64, TrainError> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(TrainError::Contract("batch size mismatch or empty batch".to_string()));
    }
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        let order_ok = e.len() == t.len()
            && e.names().zip(t.names()).all(|(a, b)| a == b);
        if !order_ok {
            return Err(TrainError::Contract("feature order mismatch".to_string()));
        }
        let mse: f64 = e
            .values()
            .iter()
            .zip(t.values())
            .map(|(&a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / e.len() as f64;
        total += mse;
    }
    Ok(total / estimates.len() as f64)
}

// ---------------------------------------------------------------------------
// Tape-level loss builders.
// ---------------------------------------------------------------------------

/// Masked cross-entropy from logits: sum over steps and slots of
/// (logsumexp - target logit), masked past each sequence end, batch mean.
fn recon_loss_on_tape(
    tape: &mut Tape,
    logits: &[[Var; SLOTS]],
    batch: &TokenBatch,
    mask_vars: &[(Var, Var)],
) -> Var {
    let mut per_row: Option<Var> = None;
    for (t, step_logits) in logits.iter().enumerate() {
        let mut step_sum: Option<Var> = None;
        for (s, &z) in step_logits.iter().enumerate() {
            let lse = tape.log_sum_exp_rows(z);
            let zt = tape.select_cols(z, batch.slots[t][s].clone());
            let ce = tape.sub(lse, zt);
            step_sum = Some(match step_sum {
                None => ce,
                Some(acc) => tape.add(acc, ce),
            });
        }
        let masked = tape.mul(step_sum.unwrap(), mask_vars[t].0);
        per_row = Some(match per_row {
            None => masked,
            Some(acc) => tape.add(acc, masked),
        });
    }
    tape.mean_rows(per_row.unwrap())
}

/// KL to the standard normal prior, batch mean.
fn kl_loss_on_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let dim = tape.value(mu).ncols() as f64;
    let mu2 = tape.mul(mu, mu);
    let sum_mu2 = tape.sum_cols(mu2);
    let exp_lv = tape.exp(logvar);
    let sum_exp = tape.sum_cols(exp_lv);
    let sum_lv = tape.sum_cols(logvar);
    let a = tape.add(sum_mu2, sum_exp);
    let b = tape.sub(a, sum_lv);
    let c = tape.add_scalar(b, -dim);
    let half = tape.scale(c, 0.5);
    tape.mean_rows(half)
}

/// MSE between an estimate matrix and targets, mean over entries and batch.
fn mse_on_tape(tape: &mut Tape, estimate: Var, truth: Var) -> Var {
    let dim = tape.value(estimate).ncols() as f64;
    let diff = tape.sub(estimate, truth);
    let sq = tape.mul(diff, diff);
    let per_row = tape.sum_cols(sq);
    let scaled = tape.scale(per_row, 1.0 / dim);
    tape.mean_rows(scaled)
}

/// The generator-phase composite loss and its reported components.
pub struct GeneratorLoss {
    pub loss: Var,
    pub recon: f64,
    pub kl: f64,
    pub feature: Option<f64>,
}

/// Builds the generator-phase loss on the tape:
/// reconstruction + kl_weight*kl_scale*KL + feature_weight*feature MSE,
/// where the feature term sends the soft reconstruction through the frozen
/// estimator. Requires the estimator partition frozen (and the generator
/// not), so gradients reach encoder/decoder parameters only.
#[allow(clippy::too_many_arguments)]
pub fn generator_phase_loss(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    batch: &TokenBatch,
    cond_std: &Array2<f64>,
    noise: &Array2<f64>,
    kl_scale: f64,
    feature_weight: f64,
) -> Result<GeneratorLoss, TrainError> {
    let store = params.store();
    if !store.is_frozen(Owner::Estimator) {
        return Err(TrainError::Contract(
            "generator phase requires the estimator partition frozen".to_string(),
        ));
    }
    if store.is_frozen(Owner::Encoder) || store.is_frozen(Owner::Decoder) {
        return Err(TrainError::Contract(
            "generator phase requires encoder and decoder unfrozen".to_string(),
        ));
    }
    let cond = tape.constant(cond_std.clone());
    let (mu, logvar) = encoder_forward(tape, params, config, batch, cond)?;
    let latent = reparameterize(tape, mu, logvar, noise);
    let dec = decoder_forward(tape, params, config, latent, cond, batch)?;
    let mask_vars = batch.mask_vars(tape);

    let recon = recon_loss_on_tape(tape, &dec.logits, batch, &mask_vars);
    let kl = kl_loss_on_tape(tape, mu, logvar);
    let kl_scaled = tape.scale(kl, config.kl_weight * kl_scale);
    let mut loss = tape.add(recon, kl_scaled);

    let mut feature_value = None;
    if feature_weight > 0.0 {
        let est = estimator_forward(tape, params, config, &dec.probs, &mask_vars)?;
        let truth = tape.constant(cond_std.clone());
        let feat = mse_on_tape(tape, est, truth);
        feature_value = Some(tape.scalar(feat));
        let weighted = tape.scale(feat, feature_weight);
        loss = tape.add(loss, weighted);
    }

    Ok(GeneratorLoss {
        loss,
        recon: tape.scalar(recon),
        kl: tape.scalar(kl),
        feature: feature_value,
    })
}

/// Builds the estimator-phase loss on the tape: the frozen generator
/// reconstructs the batch (teacher-forced), the estimator reads the soft
/// reconstruction, and the loss is its MSE against the true (standardized)
/// features. Requires encoder and decoder frozen; updates can only reach
/// estimator parameters.
pub fn estimator_phase_loss(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    batch: &TokenBatch,
    cond_std: &Array2<f64>,
    noise: &Array2<f64>,
) -> Result<(Var, f64), TrainError> {
    let store = params.store();
    if !(store.is_frozen(Owner::Encoder) && store.is_frozen(Owner::Decoder)) {
        return Err(TrainError::Contract(
            "estimator phase requires the generator partitions frozen".to_string(),
        ));
    }
    if store.is_frozen(Owner::Estimator) {
        return Err(TrainError::Contract(
            "estimator phase requires the estimator unfrozen".to_string(),
        ));
    }
    let cond = tape.constant(cond_std.clone());
    let (mu, logvar) = encoder_forward(tape, params, config, batch, cond)?;
    let latent = reparameterize(tape, mu, logvar, noise);
    let dec = decoder_forward(tape, params, config, latent, cond, batch)?;
    let mask_vars = batch.mask_vars(tape);
    let est = estimator_forward(tape, params, config, &dec.probs, &mask_vars)?;
    let truth = tape.constant(cond_std.clone());
    let loss = mse_on_tape(tape, est, truth);
    let value = tape.scalar(loss);
    Ok((loss, value))
}

/// Estimator loss over cached soft reconstructions (the in-loop fast path:
/// the generator is frozen for the whole phase, so its reconstructions are
/// computed once per phase and replayed as constants).
fn estimator_loss_on_cached(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    cached: &[&SoftSequence],
    truth_std: &Array2<f64>,
) -> Result<(Var, f64), TrainError> {
    let store = params.store();
    if !(store.is_frozen(Owner::Encoder) && store.is_frozen(Owner::Decoder)) {
        return Err(TrainError::Contract(
            "estimator phase requires the generator partitions frozen".to_string(),
        ));
    }
    let batch = cached.len();
    let max_len = cached.iter().map(|s| s.len()).max().unwrap();
    let vocab = config.vocab_sizes();
    let end_step = TokenSequence::end_step(config.max_nodes);

    let mut soft_vars: Vec<[Var; SLOTS]> = Vec::with_capacity(max_len);
    let mut mask_vars: Vec<(Var, Var)> = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let mut mask = Array2::zeros((batch, 1));
        let step: [Var; SLOTS] = std::array::from_fn(|s| {
            let mut m = Array2::zeros((batch, vocab[s]));
            for (i, seq) in cached.iter().enumerate() {
                match seq.steps.get(t) {
                    Some(dists) => {
                        for (j, &p) in dists[s].iter().enumerate() {
                            m[[i, j]] = p;
                        }
                    }
                    // padded rows hold the one-hot end step; masked out
                    None => m[[i, end_step[s]]] = 1.0,
                }
            }
            tape.constant(m)
        });
        for (i, seq) in cached.iter().enumerate() {
            if t < seq.len() {
                mask[[i, 0]] = 1.0;
            }
        }
        let inv = tape.constant(mask.mapv(|v| 1.0 - v));
        let m = tape.constant(mask);
        soft_vars.push(step);
        mask_vars.push((m, inv));
    }
    let est = estimator_forward(tape, params, config, &soft_vars, &mask_vars)?;
    let truth = tape.constant(truth_std.clone());
    let loss = mse_on_tape(tape, est, truth);
    let value = tape.scalar(loss);
    Ok((loss, value))
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Adam with bias correction; state keyed by parameter id. Fresh at every
/// phase boundary so a phase checkpoint fully determines the rest of the
/// run.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<ParamId, Array2<f64>>,
    v: HashMap<ParamId, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Applies one update to `ids`; every id must belong to an unfrozen
    /// partition.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for &id in ids {
            assert!(
                !store.is_frozen(store.entry(id).owner),
                "optimizer touched a frozen partition"
            );
            let Some(g) = grads.get(id) else { continue };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Trace.
// ---------------------------------------------------------------------------

/// Per-epoch mean loss components. Fields are None when the phase does not
/// produce them (e.g. no feature term in the warm-up iteration).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub iteration: usize,
    pub phase: TrainPhase,
    pub epoch: usize,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub feature: Option<f64>,
    pub estimator: Option<f64>,
}

/// Parameter-partition hashes at a phase boundary; `completed_phases`
/// counts phases finished so far (0 = initial state).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseBoundary {
    pub completed_phases: u32,
    pub generator_hash: String,
    pub estimator_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub boundaries: Vec<PhaseBoundary>,
}

impl TrainTrace {
    /// CSV of (iteration, phase, epoch, loss components); absent components
    /// are empty fields.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,phase,epoch,recon,kl,feature,estimator")?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.iteration,
                e.phase,
                e.epoch,
                fmt(e.recon),
                fmt(e.kl),
                fmt(e.feature),
                fmt(e.estimator)
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The alternate training loop.
// ---------------------------------------------------------------------------

pub struct TrainOutput {
    pub params: ModelParams,
    pub trace: TrainTrace,
    pub stats: FeatureStats,
}

/// Derives the model's token capacity fields from a manifest.
pub fn model_config_for_manifest(base: &ModelConfig, manifest: &DatasetManifest) -> ModelConfig {
    ModelConfig {
        max_nodes: manifest.max_nodes,
        max_sequence_length: manifest.max_sequence_length,
        condition_dim: manifest.feature_order.len(),
        estimator_out: manifest.feature_order.len(),
        ..base.clone()
    }
}

/// Runs the full alternate schedule from scratch.
pub fn train_alternate(
    manifest: &DatasetManifest,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    train_alternate_with(manifest, mconfig, tconfig, None, |_, _, _| {})
}

/// Alternate training with optional resume and a phase-boundary callback
/// (for checkpointing): `on_boundary(completed_phases, params, stats)` runs
/// after every finished phase.
///
/// Schedule: for k = 1..=alternate_iterations, a generator phase (feature
/// weight forced to 0 at k=1, since the estimator is untrained) then an
/// estimator phase. Mini-batches are reshuffled every epoch with a seeded
/// generator; each phase draws from its own RNG stream so resuming from a
/// phase checkpoint reproduces the remaining run exactly.
pub fn train_alternate_with(
    manifest: &DatasetManifest,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    resume: Option<(ModelParams, u32)>,
    mut on_boundary: impl FnMut(u32, &ModelParams, &FeatureStats),
) -> Result<TrainOutput, TrainError> {
    mconfig.validate()?;
    tconfig.validate()?;
    if manifest.records.is_empty() {
        return Err(TrainError::Data("manifest has no records".to_string()));
    }
    if mconfig.condition_dim != manifest.feature_order.len() {
        return Err(TrainError::Contract(format!(
            "condition_dim {} does not match manifest feature order ({} features)",
            mconfig.condition_dim,
            manifest.feature_order.len()
        )));
    }

    let stats = FeatureStats::from_manifest(manifest);
    let tokens: Vec<TokenSequence> = manifest
        .records
        .iter()
        .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes))
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Data(format!("tokenization failed: {e}")))?;
    let cond_std: Vec<Vec<f64>> = manifest
        .records
        .iter()
        .map(|r| stats.standardize(&r.features.values()))
        .collect();

    let n = manifest.records.len();
    let batches_per_epoch = n.div_ceil(tconfig.batch_size);
    let total_phases = 2 * tconfig.alternate_iterations as u32;
    let total_gen_steps =
        tconfig.alternate_iterations * tconfig.generator_epochs_per_phase * batches_per_epoch;
    let kl_warmup = (total_gen_steps / 10).max(1);

    let (mut params, start_phase) = match resume {
        Some((p, completed)) => {
            if completed > total_phases {
                return Err(TrainError::Contract(format!(
                    "checkpoint is {completed} phases in, schedule has {total_phases}"
                )));
            }
            (p, completed)
        }
        None => (ModelParams::init(mconfig, tconfig.seed)?, 0),
    };

    let mut trace = TrainTrace::default();
    let boundary = |params: &ModelParams, completed: u32| PhaseBoundary {
        completed_phases: completed,
        generator_hash: params.store().hash_partition(&[Owner::Encoder, Owner::Decoder]),
        estimator_hash: params.store().hash_partition(&[Owner::Estimator]),
    };
    trace.boundaries.push(boundary(&params, start_phase));

    // generator steps already taken, for the KL annealing clock
    let completed_gen_phases = (start_phase + 1) / 2;
    let mut gen_step =
        completed_gen_phases as usize * tconfig.generator_epochs_per_phase * batches_per_epoch;

    for phase_index in start_phase..total_phases {
        let mut indices: Vec<usize> = (0..n).collect();
        let iteration = (phase_index / 2 + 1) as usize;
        let phase = if phase_index % 2 == 0 { TrainPhase::Generator } else { TrainPhase::Estimator };
        let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
        rng.set_stream(1 + phase_index as u64);

        match phase {
            TrainPhase::Generator => {
                params.store_mut().set_frozen(&[Owner::Estimator]);
                let active = params
                    .store()
                    .ids_of_any(&[Owner::Encoder, Owner::Decoder]);
                let mut adam = Adam::new(tconfig.learning_rate);
                let feature_weight =
                    if iteration == 1 { 0.0 } else { tconfig.feature_loss_weight };

                for epoch in 1..=tconfig.generator_epochs_per_phase {
                    indices.shuffle(&mut rng);
                    let mut sums = (0.0, 0.0, 0.0); // recon, kl, feature
                    let mut feature_seen = false;
                    for chunk in indices.chunks(tconfig.batch_size) {
                        let kl_scale = ((gen_step + 1) as f64 / kl_warmup as f64).min(1.0);
                        let seqs: Vec<&TokenSequence> =
                            chunk.iter().map(|&i| &tokens[i]).collect();
                        let batch = TokenBatch::new(&seqs, mconfig.max_nodes);
                        let cond = cond_matrix(&cond_std, chunk);
                        let noise = normal_matrix(&mut rng, chunk.len(), mconfig.latent_dim);
                        let mut tape = Tape::new();
                        let parts = generator_phase_loss(
                            &mut tape,
                            &params,
                            mconfig,
                            &batch,
                            &cond,
                            &noise,
                            kl_scale,
                            feature_weight,
                        )?;
                        let loss_value = tape.scalar(parts.loss);
                        if !loss_value.is_finite() {
                            return Err(TrainError::Divergence {
                                iteration,
                                phase,
                                epoch,
                                trace: Box::new(trace),
                            });
                        }
                        let mut grads = tape.backward(parts.loss);
                        grads.clip_global_norm(&active, tconfig.grad_clip);
                        adam.step(params.store_mut(), &grads, &active);
                        gen_step += 1;

                        let w = chunk.len() as f64;
                        sums.0 += parts.recon * w;
                        sums.1 += parts.kl * w;
                        if let Some(f) = parts.feature {
                            sums.2 += f * w;
                            feature_seen = true;
                        }
                    }
                    trace.epochs.push(EpochRecord {
                        iteration,
                        phase,
                        epoch,
                        recon: Some(sums.0 / n as f64),
                        kl: Some(sums.1 / n as f64),
                        feature: feature_seen.then_some(sums.2 / n as f64),
                        estimator: None,
                    });
                }
            }
            TrainPhase::Estimator => {
                params.store_mut().set_frozen(&[Owner::Encoder, Owner::Decoder]);
                let active = params.store().ids_of(Owner::Estimator);
                let mut adam = Adam::new(tconfig.learning_rate);

                // the generator is frozen all phase, so reconstruct once
                let cached = reconstruct_all(
                    &params,
                    mconfig,
                    &tokens,
                    &cond_std,
                    tconfig.batch_size,
                    &mut rng,
                )?;

                for epoch in 1..=tconfig.estimator_epochs_per_phase {
                    indices.shuffle(&mut rng);
                    let mut sum = 0.0;
                    for chunk in indices.chunks(tconfig.batch_size) {
                        let soft: Vec<&SoftSequence> =
                            chunk.iter().map(|&i| &cached[i]).collect();
                        let truth = cond_matrix(&cond_std, chunk);
                        let mut tape = Tape::new();
                        let (loss, value) = estimator_loss_on_cached(
                            &mut tape, &params, mconfig, &soft, &truth,
                        )?;
                        if !value.is_finite() {
                            return Err(TrainError::Divergence {
                                iteration,
                                phase,
                                epoch,
                                trace: Box::new(trace),
                            });
                        }
                        let mut grads = tape.backward(loss);
                        grads.clip_global_norm(&active, tconfig.grad_clip);
                        adam.step(params.store_mut(), &grads, &active);
                        sum += value * chunk.len() as f64;
                    }
                    trace.epochs.push(EpochRecord {
                        iteration,
                        phase,
                        epoch,
                        recon: None,
                        kl: None,
                        feature: None,
                        estimator: Some(sum / n as f64),
                    });
                }
            }
        }

        params.store_mut().set_frozen(&[]);
        trace.boundaries.push(boundary(&params, phase_index + 1));
        on_boundary(phase_index + 1, &params, &stats);
    }

    params.store_mut().set_frozen(&[]);
    Ok(TrainOutput { params, trace, stats })
}

fn cond_matrix(cond_std: &[Vec<f64>], chunk: &[usize]) -> Array2<f64> {
    let dim = cond_std[0].len();
    let mut m = Array2::zeros((chunk.len(), dim));
    for (row, &i) in chunk.iter().enumerate() {
        for (col, &v) in cond_std[i].iter().enumerate() {
            m[[row, col]] = v;
        }
    }
    m
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Teacher-forced soft reconstructions of every record under the current
/// (frozen) generator, trimmed to each record's true length.
fn reconstruct_all(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[TokenSequence],
    cond_std: &[Vec<f64>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SoftSequence>, TrainError> {
    let mut out = Vec::with_capacity(tokens.len());
    let all: Vec<usize> = (0..tokens.len()).collect();
    for chunk in all.chunks(batch_size) {
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &tokens[i]).collect();
        let batch = TokenBatch::new(&seqs, config.max_nodes);
        let cond_arr = cond_matrix(cond_std, chunk);
        let noise = normal_matrix(rng, chunk.len(), config.latent_dim);
        let mut tape = Tape::new();
        let cond = tape.constant(cond_arr);
        let (mu, logvar) = encoder_forward(&mut tape, params, config, &batch, cond)?;
        let latent = reparameterize(&mut tape, mu, logvar, &noise);
        let dec = decoder_forward(&mut tape, params, config, latent, cond, &batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            let len = tokens[i].len();
            let steps = dec.probs[..len]
                .iter()
                .map(|step| {
                    std::array::from_fn(|s| tape.value(step[s]).row(row).to_vec())
                })
                .collect();
            out.push(SoftSequence { steps });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_manifest;
    use crate::dfs;
    use crate::graph::{FeatureName, Graph};
    use crate::model::tests::tiny_config;
    use rand::rngs::StdRng;
    use rand::Rng;

    fn toy_manifest(count: usize, seed: u64) -> DatasetManifest {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut graphs = Vec::new();
        while graphs.len() < count {
            let n = rng.gen_range(3..=5);
            let g = dfs::tests::random_connected_graph(&mut rng, n, 0.4);
            graphs.push(g);
        }
        build_manifest(&graphs, &[FeatureName::Aspl]).unwrap().0
    }

    fn tiny_tconfig() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            generator_epochs_per_phase: 2,
            estimator_epochs_per_phase: 2,
            alternate_iterations: 2,
            learning_rate: 1e-3,
            seed: 7,
            feature_loss_weight: 1.0,
            grad_clip: 5.0,
        }
    }

    fn config_for(manifest: &DatasetManifest) -> ModelConfig {
        model_config_for_manifest(&tiny_config(), manifest)
    }

    #[test]
    fn reconstruction_loss_examples() {
        let code = dfs::DfsCode::new(vec![dfs::DfsEdge::unlabeled(0, 1)]).unwrap();
        let seq = dfs::to_tokens(&code, 3).unwrap();
        // one-hot equal to target -> 0
        let one_hot = SoftSequence::one_hot(&seq);
        assert_eq!(reconstruction_loss(&[one_hot], &[&seq]).unwrap(), 0.0);
        // uniform prediction -> L*S*ln V
        let vocab = TokenSequence::vocab_sizes(3);
        let uniform = SoftSequence {
            steps: seq
                .steps()
                .iter()
                .map(|_| std::array::from_fn(|s| vec![1.0 / vocab[s] as f64; vocab[s]]))
                .collect(),
        };
        let expect: f64 = (0..seq.len())
            .map(|_| vocab.iter().map(|&v| (v as f64).ln()).sum::<f64>())
            .sum();
        assert!((reconstruction_loss(&[uniform], &[&seq]).unwrap() - expect).abs() < 1e-12);
        // length mismatch is a contract error
        let short = SoftSequence { steps: vec![] };
        assert!(matches!(
            reconstruction_loss(&[short], &[&seq]),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn reconstruction_loss_half_probability_is_ln2() {
        // single step, all slots sure except slot 0 at p=0.5 on the target
        let code = dfs::DfsCode::new(vec![dfs::DfsEdge::unlabeled(0, 1)]).unwrap();
        let seq = dfs::to_tokens(&code, 3).unwrap();
        let mut soft = SoftSequence::one_hot(&seq);
        let v0 = soft.steps[0][0].len();
        soft.steps[0][0] = vec![0.5 / (v0 - 1) as f64; v0];
        soft.steps[0][0][0] = 0.5; // target token of the first step is 0
        let loss = reconstruction_loss(&[soft], &[&seq]).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn kl_loss_examples() {
        let zeros = Array2::zeros((1, 3));
        assert_eq!(kl_loss(&zeros, &zeros), 0.0);
        let mu = ndarray::array![[1.0]];
        assert!((kl_loss(&mu, &Array2::zeros((1, 1))) - 0.5).abs() < 1e-12);
        let lv = ndarray::array![[2f64.ln()]];
        let expect = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_loss(&Array2::zeros((1, 1)), &lv) - expect).abs() < 1e-12);
        assert!((expect - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn feature_loss_examples() {
        let fv = |v: f64| FeatureVector::new(vec![(FeatureName::Aspl, v)]);
        assert_eq!(feature_loss(&[fv(3.0)], &[fv(3.0)]).unwrap(), 0.0);
        assert_eq!(feature_loss(&[fv(3.0)], &[fv(4.0)]).unwrap(), 1.0);
        // {2,4} vs {3,3} -> 1.0
        assert_eq!(
            feature_loss(&[fv(2.0), fv(4.0)], &[fv(3.0), fv(3.0)]).unwrap(),
            1.0
        );
        // order mismatch
        let other = FeatureVector::new(vec![(FeatureName::Clustering, 3.0)]);
        assert!(matches!(
            feature_loss(&[fv(1.0)], &[other]),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn generator_loss_requires_frozen_estimator() {
        let manifest = toy_manifest(4, 1);
        let mconfig = config_for(&manifest);
        let params = ModelParams::init(&mconfig, 3).unwrap();
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let cond = Array2::zeros((4, 1));
        let noise = Array2::zeros((4, mconfig.latent_dim));
        let mut tape = Tape::new();
        let err = generator_phase_loss(
            &mut tape, &params, &mconfig, &batch, &cond, &noise, 1.0, 1.0,
        );
        assert!(matches!(err, Err(TrainError::Contract(_))));
    }

    #[test]
    fn estimator_loss_requires_frozen_generator() {
        let manifest = toy_manifest(4, 2);
        let mconfig = config_for(&manifest);
        let params = ModelParams::init(&mconfig, 3).unwrap();
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let cond = Array2::zeros((4, 1));
        let noise = Array2::zeros((4, mconfig.latent_dim));
        let mut tape = Tape::new();
        assert!(matches!(
            estimator_phase_loss(&mut tape, &params, &mconfig, &batch, &cond, &noise),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn zero_feature_weight_reduces_to_baseline_loss() {
        let manifest = toy_manifest(5, 3);
        let mconfig = config_for(&manifest);
        let mut params = ModelParams::init(&mconfig, 5).unwrap();
        params.store_mut().set_frozen(&[Owner::Estimator]);
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let stats = FeatureStats::from_manifest(&manifest);
        let cond = cond_matrix(
            &manifest
                .records
                .iter()
                .map(|r| stats.standardize(&r.features.values()))
                .collect::<Vec<_>>(),
            &[0, 1, 2, 3, 4],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = normal_matrix(&mut rng, 5, mconfig.latent_dim);

        let mut tape = Tape::new();
        let parts = generator_phase_loss(
            &mut tape, &params, &mconfig, &batch, &cond, &noise, 1.0, 0.0,
        )
        .unwrap();
        assert!(parts.feature.is_none());
        let total = tape.scalar(parts.loss);
        // with weight 0 the total is exactly recon + kl_weight * kl
        assert!((total - (parts.recon + mconfig.kl_weight * parts.kl)).abs() < 1e-12);

        // and the tape components agree with the public ops on the same data
        let (mu, logvar) = {
            let mut t2 = Tape::new();
            let cond_v = t2.constant(cond.clone());
            let (mu, lv) = encoder_forward(&mut t2, &params, &mconfig, &batch, cond_v).unwrap();
            (t2.value(mu).clone(), t2.value(lv).clone())
        };
        assert!((parts.kl - kl_loss(&mu, &logvar)).abs() < 1e-9);
    }

    #[test]
    fn tape_recon_matches_public_op_on_soft_probs() {
        let manifest = toy_manifest(3, 4);
        let mconfig = config_for(&manifest);
        let mut params = ModelParams::init(&mconfig, 6).unwrap();
        params.store_mut().set_frozen(&[Owner::Estimator]);
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let cond = Array2::zeros((3, 1));
        let noise = Array2::zeros((3, mconfig.latent_dim));

        let mut tape = Tape::new();
        let cond_v = tape.constant(cond.clone());
        let (mu, logvar) = encoder_forward(&mut tape, &params, &mconfig, &batch, cond_v).unwrap();
        let latent = reparameterize(&mut tape, mu, logvar, &noise);
        let dec = decoder_forward(&mut tape, &params, &mconfig, latent, cond_v, &batch).unwrap();
        let mask_vars = batch.mask_vars(&mut tape);
        let recon_tape = recon_loss_on_tape(&mut tape, &dec.logits, &batch, &mask_vars);
        let recon_tape = tape.scalar(recon_tape);

        // soft sequences trimmed to true lengths, through the public op
        let softs: Vec<SoftSequence> = (0..3)
            .map(|i| SoftSequence {
                steps: dec.probs[..seqs[i].len()]
                    .iter()
                    .map(|step| std::array::from_fn(|s| tape.value(step[s]).row(i).to_vec()))
                    .collect(),
            })
            .collect();
        let recon_public = reconstruction_loss(&softs, &refs).unwrap();
        assert!((recon_tape - recon_public).abs() < 1e-9);
    }

    fn fd_grad_check(
        mut loss_of: impl FnMut(&ModelParams) -> f64,
        params: &mut ModelParams,
        grads: &Gradients,
        ids: &[ParamId],
        tol: f64,
    ) -> f64 {
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for &id in ids {
            let dim = params.store().get(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = params.store().get(id)[[r, c]];
                    params.store_mut().get_mut(id)[[r, c]] = orig + eps;
                    let plus = loss_of(params);
                    params.store_mut().get_mut(id)[[r, c]] = orig - eps;
                    let minus = loss_of(params);
                    params.store_mut().get_mut(id)[[r, c]] = orig;
                    let fd = (plus - minus) / (2.0 * eps);
                    let an = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max(rel);
                    assert!(
                        rel < tol,
                        "{} [{r},{c}]: analytic {an} vs fd {fd} (rel {rel})",
                        params.store().entry(id).name
                    );
                }
            }
        }
        worst
    }

    #[test]
    fn generator_phase_gradient_matches_finite_differences() {
        let manifest = toy_manifest(3, 9);
        let mconfig = config_for(&manifest);
        let mut params = ModelParams::init(&mconfig, 11).unwrap();
        params.store_mut().set_frozen(&[Owner::Estimator]);
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let stats = FeatureStats::from_manifest(&manifest);
        let cond = cond_matrix(
            &manifest
                .records
                .iter()
                .map(|r| stats.standardize(&r.features.values()))
                .collect::<Vec<_>>(),
            &[0, 1, 2],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = normal_matrix(&mut rng, 3, mconfig.latent_dim);

        let mut tape = Tape::new();
        let parts = generator_phase_loss(
            &mut tape, &params, &mconfig, &batch, &cond, &noise, 0.7, 1.3,
        )
        .unwrap();
        let grads = tape.backward(parts.loss);
        let active = params.store().ids_of_any(&[Owner::Encoder, Owner::Decoder]);
        // estimator params are frozen constants: no gradient exists for them
        for id in params.store().ids_of(Owner::Estimator) {
            assert!(grads.get(id).is_none());
        }
        let loss_of = |p: &ModelParams| {
            let mut t = Tape::new();
            let parts =
                generator_phase_loss(&mut t, p, &mconfig, &batch, &cond, &noise, 0.7, 1.3)
                    .unwrap();
            t.scalar(parts.loss)
        };
        fd_grad_check(loss_of, &mut params, &grads, &active, 1e-4);
    }

    #[test]
    fn estimator_phase_gradient_matches_finite_differences() {
        let manifest = toy_manifest(3, 10);
        let mconfig = config_for(&manifest);
        let mut params = ModelParams::init(&mconfig, 12).unwrap();
        params.store_mut().set_frozen(&[Owner::Encoder, Owner::Decoder]);
        let seqs: Vec<TokenSequence> = manifest
            .records
            .iter()
            .map(|r| dfs::to_tokens(&r.code, mconfig.max_nodes).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, mconfig.max_nodes);
        let cond = Array2::from_elem((3, 1), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = normal_matrix(&mut rng, 3, mconfig.latent_dim);

        let mut tape = Tape::new();
        let (loss, _) =
            estimator_phase_loss(&mut tape, &params, &mconfig, &batch, &cond, &noise).unwrap();
        let grads = tape.backward(loss);
        let active = params.store().ids_of(Owner::Estimator);
        for id in params.store().ids_of_any(&[Owner::Encoder, Owner::Decoder]) {
            assert!(grads.get(id).is_none());
        }
        let loss_of = |p: &ModelParams| {
            let mut t = Tape::new();
            let (_, v) =
                estimator_phase_loss(&mut t, p, &mconfig, &batch, &cond, &noise).unwrap();
            v
        };
        fd_grad_check(loss_of, &mut params, &grads, &active, 1e-4);
    }

    #[test]
    fn alternate_run_keeps_frozen_partitions_bit_identical() {
        let manifest = toy_manifest(12, 20);
        let mconfig = config_for(&manifest);
        let tconfig = tiny_tconfig();
        let out = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        let b = &out.trace.boundaries;
        assert_eq!(b.len(), 5); // initial + 4 phases
        // phase order A,B,A,B: generator phases leave the estimator hash
        // unchanged and vice versa
        assert_eq!(b[0].estimator_hash, b[1].estimator_hash);
        assert_ne!(b[0].generator_hash, b[1].generator_hash);
        assert_eq!(b[1].generator_hash, b[2].generator_hash);
        assert_ne!(b[1].estimator_hash, b[2].estimator_hash);
        assert_eq!(b[2].estimator_hash, b[3].estimator_hash);
        assert_ne!(b[2].generator_hash, b[3].generator_hash);
        assert_eq!(b[3].generator_hash, b[4].generator_hash);
        assert_ne!(b[3].estimator_hash, b[4].estimator_hash);
    }

    #[test]
    fn phase_order_is_generator_then_estimator() {
        let manifest = toy_manifest(8, 21);
        let mconfig = config_for(&manifest);
        let tconfig = tiny_tconfig();
        let out = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        let seq: Vec<(usize, TrainPhase)> = out
            .trace
            .epochs
            .iter()
            .map(|e| (e.iteration, e.phase))
            .collect();
        let mut expect = Vec::new();
        for it in 1..=2 {
            for _ in 0..tconfig.generator_epochs_per_phase {
                expect.push((it, TrainPhase::Generator));
            }
            for _ in 0..tconfig.estimator_epochs_per_phase {
                expect.push((it, TrainPhase::Estimator));
            }
        }
        assert_eq!(seq, expect);
        // warm-up iteration trains without the feature term; later ones with
        let first_gen = out.trace.epochs.iter().find(|e| e.iteration == 1 && e.phase == TrainPhase::Generator).unwrap();
        assert!(first_gen.feature.is_none());
        let second_gen = out.trace.epochs.iter().find(|e| e.iteration == 2 && e.phase == TrainPhase::Generator).unwrap();
        assert!(second_gen.feature.is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let manifest = toy_manifest(10, 22);
        let mconfig = config_for(&manifest);
        let tconfig = tiny_tconfig();
        let a = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        let b = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(
            a.params.store().hash_partition(&Owner::ALL),
            b.params.store().hash_partition(&Owner::ALL)
        );
    }

    #[test]
    fn resume_from_phase_boundary_reproduces_trace() {
        let manifest = toy_manifest(10, 23);
        let mconfig = config_for(&manifest);
        let tconfig = tiny_tconfig();
        let full = train_alternate(&manifest, &mconfig, &tconfig).unwrap();

        // capture params after two phases, then resume
        let mut snapshot = None;
        let _ = train_alternate_with(&manifest, &mconfig, &tconfig, None, |done, p, _| {
            if done == 2 {
                snapshot = Some(p.clone());
            }
        })
        .unwrap();
        let resumed = train_alternate_with(
            &manifest,
            &mconfig,
            &tconfig,
            Some((snapshot.unwrap(), 2)),
            |_, _, _| {},
        )
        .unwrap();
        let tail: Vec<&EpochRecord> =
            full.trace.epochs.iter().filter(|e| e.iteration == 2).collect();
        let resumed_epochs: Vec<&EpochRecord> = resumed.trace.epochs.iter().collect();
        assert_eq!(tail, resumed_epochs);
        assert_eq!(
            full.params.store().hash_partition(&Owner::ALL),
            resumed.params.store().hash_partition(&Owner::ALL)
        );
    }

    #[test]
    fn estimator_loss_trends_down_on_toy_set() {
        let manifest = toy_manifest(20, 24);
        let mconfig = config_for(&manifest);
        let mut tconfig = tiny_tconfig();
        tconfig.batch_size = 20;
        tconfig.generator_epochs_per_phase = 1;
        tconfig.estimator_epochs_per_phase = 200; // 200 steps at full batch
        tconfig.alternate_iterations = 1;
        tconfig.learning_rate = 3e-3;
        let out = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        let est: Vec<f64> = out
            .trace
            .epochs
            .iter()
            .filter_map(|e| e.estimator)
            .collect();
        assert_eq!(est.len(), 200);
        let head = est[..50].iter().sum::<f64>() / 50.0;
        let tail = est[150..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < head,
            "estimator loss did not decrease: first-50 mean {head}, last-50 mean {tail}"
        );
    }

    #[test]
    fn divergent_learning_rate_reports_divergence_with_trace() {
        let manifest = toy_manifest(6, 25);
        let mconfig = config_for(&manifest);
        let mut tconfig = tiny_tconfig();
        tconfig.learning_rate = 1e18;
        tconfig.generator_epochs_per_phase = 30;
        match train_alternate(&manifest, &mconfig, &tconfig) {
            Err(TrainError::Divergence { trace, .. }) => {
                assert!(!trace.boundaries.is_empty());
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ()).err()),
        }
    }

    #[test]
    fn trace_csv_has_expected_shape() {
        let manifest = toy_manifest(6, 26);
        let mconfig = config_for(&manifest);
        let tconfig = tiny_tconfig();
        let out = train_alternate(&manifest, &mconfig, &tconfig).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,phase,epoch,recon,kl,feature,estimator");
        assert_eq!(lines.len(), 1 + out.trace.epochs.len());
        assert!(lines[1].starts_with("1,generator,1,"));
    }
}

//! Trajectory-action alignment: a small transformer encoder over 16 control
//! tokens, trained with a symmetrized multi-positive contrastive loss so its
//! outputs land in the action-text embedding space, then frozen for the rest
//! of the pipeline.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{ControlTensor, CONTROL_DIMS, CONTROL_KNOTS};
use crate::math::nn::{gaussian, Linear, Stack};
use crate::math::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::math::tape::{AttentionMask, Grads, ParamId, ParamStore, Tape, Var};
use crate::math::tensor::{cosine, Tensor};
use crate::par;
use crate::rng;
use crate::synthworld::ActionBank;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AlignConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop once held-out retrieval R@1 reaches this level.
    pub target_r1: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            layers: 4,
            width: 128,
            heads: 4,
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            target_r1: 0.97,
        }
    }
}

/// One contrastive training triple.
#[derive(Clone, Debug)]
pub struct AlignSample {
    pub control: ControlTensor,
    pub bank_label: usize,
    pub text_id: usize,
    /// Frozen text embedding of the bank label (`e_i`).
    pub target_embedding: Vec<f64>,
}

/// Control-token transformer with a learned 6-to-width input projection,
/// learned positional embeddings, mean pooling, and an l2-normalized
/// projection into the action-embedding space.
#[derive(Clone, Debug)]
pub struct TrajEncoder {
    pub width: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    input_proj: Linear,
    pos_emb: ParamId,
    stack: Stack,
    out_proj: Linear,
}

impl TrajEncoder {
    pub fn init(store: &mut ParamStore, cfg: &AlignConfig, d: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "traj-encoder-init");
        let input_proj = Linear::init(store, "enc.input", CONTROL_DIMS, cfg.width, true, &mut r);
        let pos_emb = store.add(
            "enc.pos",
            gaussian(vec![CONTROL_KNOTS, cfg.width], 0.02, &mut r),
        );
        let stack = Stack::init(store, "enc.stack", cfg.layers, cfg.width, cfg.heads, &mut r);
        let out_proj = Linear::init(store, "enc.out", cfg.width, d, true, &mut r);
        TrajEncoder {
            width: cfg.width,
            d,
            layers: cfg.layers,
            heads: cfg.heads,
            input_proj,
            pos_emb,
            stack,
            out_proj,
        }
    }

    pub fn attach(store: &ParamStore, cfg: &AlignConfig, d: usize) -> Result<Self> {
        Ok(TrajEncoder {
            width: cfg.width,
            d,
            layers: cfg.layers,
            heads: cfg.heads,
            input_proj: Linear::attach(store, "enc.input")?,
            pos_emb: store
                .by_name("enc.pos")
                .ok_or_else(|| Error::MissingArtifact("param enc.pos".into()))?,
            stack: Stack::attach(store, "enc.stack", cfg.layers, cfg.heads)?,
            out_proj: Linear::attach(store, "enc.out")?,
        })
    }

    /// Unit-norm embedding of one control tensor, as a `[1,d]` row.
    pub fn forward(&self, tape: &mut Tape, control: &ControlTensor) -> Result<Var> {
        let x = tape.constant(&control.to_tensor());
        let x = self.input_proj.forward(tape, x);
        let pos = tape.param(self.pos_emb);
        let x = tape.add(x, pos);
        let mask = Arc::new(AttentionMask::full(CONTROL_KNOTS, CONTROL_KNOTS));
        let x = self.stack.forward(tape, x, &mask)?;
        let pooled = tape.mean_rows(x); // [width]
        let out = self.out_proj.forward(tape, pooled); // [1,d]
        Ok(tape.l2_normalize_rows(out))
    }

    /// Frozen-encoder embedding as plain values.
    pub fn encode(&self, store: &ParamStore, control: &ControlTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let z = self.forward(&mut tape, control)?;
        Ok(tape.value(z).to_vec())
    }
}

/// Positive mask from text ids: `M[i][j] = 1[t_i = t_j]`.
pub fn positive_mask(text_ids: &[usize]) -> AttentionMask {
    let b = text_ids.len();
    AttentionMask::from_fn(b, b, |i, j| text_ids[i] == text_ids[j])
}

/// Multi-positive cross-entropy over a logit matrix:
/// `-(1/B) Σ_i [ log Σ_{j: M_ij} e^{l_ij} - log Σ_j e^{l_ij} ]`.
///
/// Zero exactly when each row's probability mass sits entirely on its
/// positives; the diagonal counts as a positive, so every row has one.
pub fn mp_cross_entropy(tape: &mut Tape, logits: Var, positives: &AttentionMask) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != positives.rows || shape[1] != positives.cols {
        return Err(Error::Shape(format!(
            "logits {shape:?} vs positives {}x{}",
            positives.rows, positives.cols
        )));
    }
    positives.validate()?;
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mp_cross_entropy logits".into()));
    }
    let pos = Arc::new(positives.clone());
    let full = Arc::new(AttentionMask::full(positives.rows, positives.cols));
    let pos_lse = tape.masked_lse_rows(logits, pos);
    let all_lse = tape.masked_lse_rows(logits, full);
    let per_row = tape.sub(all_lse, pos_lse);
    Ok(tape.mean_all(per_row))
}

/// Temperature-scaled logits `l_ij = τ z_i·e_j` with τ = clamp(exp(log_temp), 1, 100).
pub fn scaled_logits(tape: &mut Tape, z: Var, e: Var, log_temp: Var) -> Var {
    let tau = tape.exp(log_temp);
    let tau = tape.clamp_const(tau, 1.0, 100.0);
    let raw = tape.matmul_tb(z, e);
    tape.mul_scalar_var(raw, tau)
}

/// Symmetrized alignment loss `½(mpCE(l, M) + mpCE(lᵀ, Mᵀ))`.
pub fn align_loss_on_tape(
    tape: &mut Tape,
    z: Var,
    targets: &Tensor,
    text_ids: &[usize],
    log_temp: Var,
) -> Result<Var> {
    let b = text_ids.len();
    if b < 2 {
        return Err(Error::Invalid(format!("alignment batch needs B >= 2, got {b}")));
    }
    let e = tape.constant(targets);
    let logits = scaled_logits(tape, z, e, log_temp);
    let mask = positive_mask(text_ids);
    let fwd = mp_cross_entropy(tape, logits, &mask)?;
    let logits_t = tape.transpose(logits);
    let bwd = mp_cross_entropy(tape, logits_t, &mask.transposed())?;
    let sum = tape.add(fwd, bwd);
    Ok(tape.scale_const(sum, 0.5))
}

pub struct AlignmentModel {
    pub store: ParamStore,
    pub encoder: TrajEncoder,
    pub log_temp: ParamId,
    pub config: AlignConfig,
}

#[derive(Clone, Debug, Default)]
pub struct AlignReport {
    pub epochs_run: usize,
    pub final_holdout_r1: f64,
    pub loss_per_epoch: Vec<f64>,
}

/// Initial temperature 1/0.07, parameterized as a learnable log-temperature.
pub(crate) const INIT_LOG_TEMP: f64 = 2.659_260_036_932_778; // ln(1/0.07)

pub fn init_alignment(cfg: &AlignConfig, d: usize, seed: u64) -> AlignmentModel {
    let mut store = ParamStore::new();
    let encoder = TrajEncoder::init(&mut store, cfg, d, seed);
    let log_temp = store.add("enc.log_temp", Tensor::scalar(INIT_LOG_TEMP));
    AlignmentModel {
        store,
        encoder,
        log_temp,
        config: cfg.clone(),
    }
}

pub fn attach_alignment(store: ParamStore, cfg: &AlignConfig, d: usize) -> Result<AlignmentModel> {
    let encoder = TrajEncoder::attach(&store, cfg, d)?;
    let log_temp = store
        .by_name("enc.log_temp")
        .ok_or_else(|| Error::MissingArtifact("param enc.log_temp".into()))?;
    Ok(AlignmentModel {
        store,
        encoder,
        log_temp,
        config: cfg.clone(),
    })
}

/// Held-out trajectory-to-text retrieval R@1: encode each control, take the
/// top bank label by cosine, count a hit when its text id matches.
pub fn holdout_r1(model: &AlignmentModel, bank: &ActionBank, samples: &[AlignSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits: Vec<u32> = par::par_map(samples, |s| {
        let z = model.encoder.encode(&model.store, &s.control).unwrap();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for l in 0..bank.len() {
            let c = cosine(&z, bank.embedding(l));
            if c > best.0 {
                best = (c, l);
            }
        }
        u32::from(bank.text_id(best.1) == s.text_id)
    });
    hits.iter().sum::<u32>() as f64 / samples.len() as f64
}

/// Gradient-accumulation chunk size; fixed so reductions are deterministic
/// regardless of thread count.
pub(crate) const GRAD_CHUNK: usize = 8;

/// Train the encoder with the symmetrized multi-positive objective and
/// freeze it. Aborts on a non-finite loss.
pub fn train_alignment(
    samples: &[AlignSample],
    holdout: &[AlignSample],
    bank: &ActionBank,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<(AlignmentModel, AlignReport)> {
    if samples.len() < 2 {
        return Err(Error::Invalid(format!(
            "alignment corpus needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = bank.embeddings.shape[1];
    let mut model = init_alignment(cfg, d, seed);
    let mut opt = OptimizerState::new(
        &model.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut shuffle_rng = rng::stream(seed, "align-shuffle");
    let mut report = AlignReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            if batch_idx.len() < 2 {
                continue;
            }
            let batch: Vec<&AlignSample> = batch_idx.iter().map(|&i| &samples[i]).collect();
            let loss = align_train_step(&mut model, &mut opt, &batch)?;
            epoch_loss += loss;
            batches += 1;
        }
        report.loss_per_epoch.push(epoch_loss / batches.max(1) as f64);
        report.epochs_run = epoch + 1;
        let r1 = holdout_r1(&model, bank, holdout);
        report.final_holdout_r1 = r1;
        if r1 >= cfg.target_r1 {
            break;
        }
    }
    Ok((model, report))
}

fn align_train_step(
    model: &mut AlignmentModel,
    opt: &mut OptimizerState,
    batch: &[&AlignSample],
) -> Result<f64> {
    let b = batch.len();
    let d = model.encoder.d;
    let store = &model.store;
    let encoder = &model.encoder;

    // stage 1: per-sample encoder forwards, tapes kept for the seeded backward
    let forwards: Vec<Result<(Tape, Var)>> = par::par_map(batch, |s| {
        let mut tape = Tape::new(store);
        let z = encoder.forward(&mut tape, &s.control)?;
        Ok((tape, z))
    });
    let mut tapes = Vec::with_capacity(b);
    for f in forwards {
        tapes.push(f?);
    }

    // stage 2: batch loss over the pooled embeddings
    let mut z_data = Vec::with_capacity(b * d);
    for (tape, z) in &tapes {
        z_data.extend_from_slice(tape.value(*z));
    }
    let mut targets = Vec::with_capacity(b * d);
    let mut text_ids = Vec::with_capacity(b);
    for s in batch {
        targets.extend_from_slice(&s.target_embedding);
        text_ids.push(s.text_id);
    }
    let target_t = Tensor::new(vec![b, d], targets)?;

    let mut loss_tape = Tape::new(store);
    let z_mat = loss_tape.grad_input(&Tensor::new(vec![b, d], z_data)?);
    let lt = loss_tape.param(model.log_temp);
    let loss = align_loss_on_tape(&mut loss_tape, z_mat, &target_t, &text_ids, lt)?;
    let loss_value = loss_tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("alignment loss = {loss_value}")));
    }
    let bp = loss_tape.backward_scalar(loss)?;
    let mut grads = Grads::new(store.len());
    loss_tape.param_grads_into(&bp, &mut grads);
    let z_grad = bp
        .grad(z_mat)
        .ok_or_else(|| Error::Invalid("alignment loss ignored embeddings".into()))?
        .to_vec();

    // stage 3: seeded per-sample backwards, reduced over fixed-size chunks
    let chunk_grads: Vec<Result<Grads>> = par::par_chunk_map(b, GRAD_CHUNK, |range| {
        let mut acc = Grads::new(store.len());
        for i in range {
            let (tape, z) = &tapes[i];
            let seed_grad = z_grad[i * d..(i + 1) * d].to_vec();
            let bp = tape.backward(&[(*z, seed_grad)])?;
            tape.param_grads_into(&bp, &mut acc);
        }
        Ok(acc)
    });
    for cg in chunk_grads {
        grads.merge(&cg?);
    }
    drop(tapes);
    adamw_step(opt, &mut model.store, &grads)?;
    Ok(loss_value)
}

//! Causal plan predictor: 8 learnable query tokens per endpoint compress the
//! visual tokens, trajectory embeddings are projected and added in, mid
//! tokens sum five learnable inputs, and a structured attention mask keeps
//! Start/Goal bidirectional, mids causal, and context blind to mids. Trained
//! with a cosine term per role plus a duplicate-aware InfoNCE over the pooled
//! predictions.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{mp_cross_entropy, positive_mask, AlignmentModel};
use crate::error::{Error, Result};
use crate::geometry::ControlTensor;
use crate::math::nn::{gaussian, Linear, Stack};
use crate::math::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::math::tape::{AttentionMask, Grads, ParamId, ParamStore, Tape, Var};
use crate::math::tensor::{cosine, Tensor};
use crate::par;
use crate::rng;
use crate::synthworld::{ActionBank, Corpus, PlanWindow};

pub const MIN_HORIZON: usize = 3;
pub const MAX_HORIZON: usize = 8;
pub const ENDPOINT_QUERIES: usize = 8;
pub const CONTEXT_TOKENS: usize = 2 * ENDPOINT_QUERIES;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictorConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// InfoNCE weight λ.
    pub lambda: f64,
    /// Per-sample probability of zeroing all mid trajectory embeddings.
    pub traj_dropout: f64,
    /// Per-sample probability of masking the goal context.
    pub goal_dropout: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            layers: 4,
            width: 128,
            heads: 4,
            epochs: 12,
            batch_size: 32,
            lr: 6e-4,
            weight_decay: 0.01,
            lambda: 0.5,
            traj_dropout: 0.1,
            goal_dropout: 0.0,
        }
    }
}

/// One planning instance as raw data (tokens, labels, controls).
#[derive(Clone, Debug)]
pub struct PlanSample {
    pub start_tokens: Tensor,
    pub goal_tokens: Tensor,
    pub horizon: usize,
    pub mid_labels: Vec<usize>,
    pub mid_text_ids: Vec<usize>,
    pub mid_controls: Vec<ControlTensor>,
    pub start_control: ControlTensor,
    pub goal_control: ControlTensor,
    pub start_label: usize,
    pub start_text_id: usize,
    pub goal_label: usize,
    pub goal_text_id: usize,
    pub scenario: usize,
}

impl PlanSample {
    pub fn mids(&self) -> usize {
        self.horizon - 2
    }

    pub fn validate(&self, bank: &ActionBank) -> Result<()> {
        if !(MIN_HORIZON..=MAX_HORIZON).contains(&self.horizon) {
            return Err(Error::Invalid(format!("horizon {} outside 3..8", self.horizon)));
        }
        if self.mid_labels.len() != self.mids() || self.mid_controls.len() != self.mids() {
            return Err(Error::Invalid("h must equal H-2".into()));
        }
        for &l in self
            .mid_labels
            .iter()
            .chain([&self.start_label, &self.goal_label])
        {
            if l >= bank.len() {
                return Err(Error::Invalid(format!("label {l} outside bank")));
            }
        }
        Ok(())
    }

    /// Extract a plan sample from `horizon` consecutive segments.
    pub fn from_window(corpus: &Corpus, win: &PlanWindow) -> Result<PlanSample> {
        let segs = win.segs(corpus);
        let controls = |i: usize| -> Result<ControlTensor> {
            segs[i]
                .controls
                .clone()
                .ok_or_else(|| Error::MissingArtifact("segment controls (run preprocess)".into()))
        };
        let mids = &segs[1..segs.len() - 1];
        Ok(PlanSample {
            start_tokens: segs[0].visual_tokens.clone(),
            goal_tokens: segs[segs.len() - 1].visual_tokens.clone(),
            horizon: win.horizon,
            mid_labels: mids.iter().map(|s| s.bank_label).collect(),
            mid_text_ids: mids.iter().map(|s| s.text_id).collect(),
            mid_controls: (1..segs.len() - 1).map(controls).collect::<Result<_>>()?,
            start_control: controls(0)?,
            goal_control: controls(segs.len() - 1)?,
            start_label: segs[0].bank_label,
            start_text_id: segs[0].text_id,
            goal_label: segs[segs.len() - 1].bank_label,
            goal_text_id: segs[segs.len() - 1].text_id,
            scenario: segs[0].scenario,
        })
    }
}

/// Everything a frozen forward pass needs: visual tokens plus trajectory
/// embeddings already encoded by the frozen alignment encoder.
#[derive(Clone, Debug)]
pub struct PlanContext {
    pub start_tokens: Tensor,
    pub goal_tokens: Tensor,
    pub horizon: usize,
    pub start_traj: Vec<f64>,
    pub goal_traj: Vec<f64>,
    pub mid_traj: Vec<Vec<f64>>,
}

impl PlanContext {
    pub fn from_sample(sample: &PlanSample, align: &AlignmentModel) -> Result<PlanContext> {
        Ok(PlanContext {
            start_tokens: sample.start_tokens.clone(),
            goal_tokens: sample.goal_tokens.clone(),
            horizon: sample.horizon,
            start_traj: align.encoder.encode(&align.store, &sample.start_control)?,
            goal_traj: align.encoder.encode(&align.store, &sample.goal_control)?,
            mid_traj: sample
                .mid_controls
                .iter()
                .map(|c| align.encoder.encode(&align.store, c))
                .collect::<Result<_>>()?,
        })
    }

    pub fn mids(&self) -> usize {
        self.horizon - 2
    }
}

/// How mid trajectory embeddings are supplied at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajMode {
    /// Use the context's mid trajectory embeddings (ground truth or retrieved).
    Provided,
    /// Zero every mid trajectory embedding.
    Zeroed,
}

#[derive(Clone, Debug)]
pub struct PlanOutput {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub mids: Vec<Vec<f64>>,
    /// Mean compressed start/goal tokens (pre-transformer), for the scorer query.
    pub pooled_start_ctx: Vec<f64>,
    pub pooled_goal_ctx: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PredictorModel {
    pub cfg: PredictorConfig,
    pub d: usize,
    pub d_v: usize,
    q_start: ParamId,
    q_goal: ParamId,
    wk_ctx: Linear,
    wv_ctx: Linear,
    traj_proj: Linear,
    mid_query: ParamId,
    step_pos: ParamId,
    horizon_emb: ParamId,
    type_emb: ParamId,
    stack: Stack,
    out_proj: Linear,
    pub log_temp: ParamId,
}

/// Structured attention mask over `16 + h` positions: the 16 context
/// positions attend to context only; mid `16+i` attends to all context and
/// to mids up to itself, so later mids cannot leak into earlier ones.
pub fn structured_mask(h: usize) -> AttentionMask {
    assert!(h >= 1, "structured_mask needs h >= 1");
    let n = CONTEXT_TOKENS + h;
    AttentionMask::from_fn(n, n, |i, j| {
        if i < CONTEXT_TOKENS {
            j < CONTEXT_TOKENS
        } else {
            j < CONTEXT_TOKENS || j <= i
        }
    })
}

impl PredictorModel {
    pub fn init(
        store: &mut ParamStore,
        cfg: &PredictorConfig,
        d: usize,
        d_v: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "predictor-init");
        let w = cfg.width;
        let q_start = store.add("pred.q_start", gaussian(vec![ENDPOINT_QUERIES, w], 0.02, &mut r));
        let q_goal = store.add("pred.q_goal", gaussian(vec![ENDPOINT_QUERIES, w], 0.02, &mut r));
        let wk_ctx = Linear::init(store, "pred.wk_ctx", d_v, w, true, &mut r);
        let wv_ctx = Linear::init(store, "pred.wv_ctx", d_v, w, true, &mut r);
        // bias-free so a zero trajectory embedding contributes exactly nothing
        let traj_proj = Linear::init(store, "pred.traj_proj", d, w, false, &mut r);
        let mid_query = store.add("pred.mid_query", gaussian(vec![1, w], 0.02, &mut r));
        let step_pos = store.add(
            "pred.step_pos",
            gaussian(vec![MAX_HORIZON - 2, w], 0.02, &mut r),
        );
        let horizon_emb = store.add(
            "pred.horizon_emb",
            gaussian(vec![MAX_HORIZON - MIN_HORIZON + 1, w], 0.02, &mut r),
        );
        let type_emb = store.add("pred.type_emb", gaussian(vec![3, w], 0.02, &mut r));
        let stack = Stack::init(store, "pred.stack", cfg.layers, w, cfg.heads, &mut r);
        let out_proj = Linear::init(store, "pred.out", w, d, true, &mut r);
        let log_temp = store.add("pred.log_temp", Tensor::scalar(crate::alignment::INIT_LOG_TEMP));
        PredictorModel {
            cfg: cfg.clone(),
            d,
            d_v,
            q_start,
            q_goal,
            wk_ctx,
            wv_ctx,
            traj_proj,
            mid_query,
            step_pos,
            horizon_emb,
            type_emb,
            stack,
            out_proj,
            log_temp,
        }
    }

    pub fn attach(store: &ParamStore, cfg: &PredictorConfig, d: usize, d_v: usize) -> Result<Self> {
        let need = |name: &str| {
            store
                .by_name(name)
                .ok_or_else(|| Error::MissingArtifact(format!("param {name}")))
        };
        Ok(PredictorModel {
            cfg: cfg.clone(),
            d,
            d_v,
            q_start: need("pred.q_start")?,
            q_goal: need("pred.q_goal")?,
            wk_ctx: Linear::attach(store, "pred.wk_ctx")?,
            wv_ctx: Linear::attach(store, "pred.wv_ctx")?,
            traj_proj: Linear::attach(store, "pred.traj_proj")?,
            mid_query: need("pred.mid_query")?,
            step_pos: need("pred.step_pos")?,
            horizon_emb: need("pred.horizon_emb")?,
            type_emb: need("pred.type_emb")?,
            stack: Stack::attach(store, "pred.stack", cfg.layers, cfg.heads)?,
            out_proj: Linear::attach(store, "pred.out")?,
            log_temp: need("pred.log_temp")?,
        })
    }

    /// 8 learnable queries cross-attend into the clip's token grid; the
    /// trajectory embedding is projected and added to every compressed token.
    pub fn compress_context(
        &self,
        tape: &mut Tape,
        tokens: &Tensor,
        queries: ParamId,
        traj: &[f64],
    ) -> Result<Var> {
        if tokens.shape.len() != 2 || tokens.shape[0] == 0 || tokens.shape[1] != self.d_v {
            return Err(Error::Invalid(format!(
                "token grid {:?} (want [n_tok>0, {}])",
                tokens.shape, self.d_v
            )));
        }
        let n_tok = tokens.shape[0];
        let toks = tape.constant(tokens);
        let keys = self.wk_ctx.forward(tape, toks);
        let values = self.wv_ctx.forward(tape, toks);
        let q = tape.param(queries);
        let scores = tape.matmul_tb(q, keys);
        let scaled = tape.scale_const(scores, 1.0 / (self.cfg.width as f64).sqrt());
        let mask = Arc::new(AttentionMask::full(ENDPOINT_QUERIES, n_tok));
        let weights = tape.masked_softmax_rows(scaled, mask);
        let read = tape.matmul(weights, values);
        let z = tape.constant(&Tensor::new(vec![1, self.d], traj.to_vec())?);
        let zp = self.traj_proj.forward(tape, z);
        Ok(tape.add_row_broadcast(read, zp))
    }

    /// Full forward pass on a tape. Returns the prediction rows
    /// `[S, Mid_1.., Mid_h, G]` as a `[(2+h), d]` unit-norm matrix plus the
    /// compressed context tokens.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        ctx: &PlanContext,
        traj_mode: TrajMode,
        goal_masked: bool,
    ) -> Result<(Var, Var, Var)> {
        if !(MIN_HORIZON..=MAX_HORIZON).contains(&ctx.horizon) {
            return Err(Error::Invalid(format!("horizon {} outside 3..8", ctx.horizon)));
        }
        let h = ctx.mids();
        if traj_mode == TrajMode::Provided && ctx.mid_traj.len() != h {
            return Err(Error::Invalid(format!(
                "mode requires {h} mid trajectory embeddings, got {}",
                ctx.mid_traj.len()
            )));
        }
        let w = self.cfg.width;

        let start8 = self.compress_context(tape, &ctx.start_tokens, self.q_start, &ctx.start_traj)?;
        let goal8 = self.compress_context(tape, &ctx.goal_tokens, self.q_goal, &ctx.goal_traj)?;
        let goal8 = if goal_masked {
            tape.scale_const(goal8, 0.0)
        } else {
            goal8
        };
        let type_emb = tape.param(self.type_emb);
        let t_start = tape.slice_rows(type_emb, 0, 1);
        let t_goal = tape.slice_rows(type_emb, 1, 2);
        let t_mid = tape.slice_rows(type_emb, 2, 3);
        let start8 = tape.add_row_broadcast(start8, t_start);
        let goal8 = tape.add_row_broadcast(goal8, t_goal);

        let zero_traj = vec![0.0; self.d];
        let mid_query = tape.param(self.mid_query);
        let step_pos = tape.param(self.step_pos);
        let horizon_emb = tape.param(self.horizon_emb);
        let h_row = tape.slice_rows(horizon_emb, ctx.horizon - MIN_HORIZON, ctx.horizon - MIN_HORIZON + 1);
        let mut rows = vec![start8, goal8];
        for i in 0..h {
            let zvals = match traj_mode {
                TrajMode::Provided => &ctx.mid_traj[i],
                TrajMode::Zeroed => &zero_traj,
            };
            let z = tape.constant(&Tensor::new(vec![1, self.d], zvals.clone())?);
            let zp = self.traj_proj.forward(tape, z);
            let sp = tape.slice_rows(step_pos, i, i + 1);
            let tok = tape.add(zp, mid_query);
            let tok = tape.add(tok, sp);
            let tok = tape.add(tok, h_row);
            let tok = tape.add_row_broadcast(tok, t_mid);
            rows.push(tok);
        }
        let seq = tape.concat_rows(&rows);
        debug_assert_eq!(tape.shape(seq), &[CONTEXT_TOKENS + h, w]);

        let mask = Arc::new(structured_mask(h));
        let out = self.stack.forward(tape, seq, &mask)?;

        let start_out = tape.slice_rows(out, 0, ENDPOINT_QUERIES);
        let goal_out = tape.slice_rows(out, ENDPOINT_QUERIES, CONTEXT_TOKENS);
        let mids_out = tape.slice_rows(out, CONTEXT_TOKENS, CONTEXT_TOKENS + h);
        let s_pool = tape.mean_rows(start_out);
        let g_pool = tape.mean_rows(goal_out);
        let s_pred = self.out_proj.forward(tape, s_pool);
        let g_pred = self.out_proj.forward(tape, g_pool);
        let m_pred = self.out_proj.forward(tape, mids_out);
        let preds = tape.concat_rows(&[s_pred, m_pred, g_pred]);
        let preds = tape.l2_normalize_rows(preds);
        Ok((preds, start8, goal8))
    }
}

/// Frozen-model plan prediction.
pub fn predict_plan(
    model: &PredictorModel,
    store: &ParamStore,
    ctx: &PlanContext,
    traj_mode: TrajMode,
    goal_masked: bool,
) -> Result<PlanOutput> {
    let mut tape = Tape::new(store);
    let (preds, start8, goal8) = model.forward_on_tape(&mut tape, ctx, traj_mode, goal_masked)?;
    let d = model.d;
    let h = ctx.mids();
    let pv = tape.value(preds);
    let row = |i: usize| pv[i * d..(i + 1) * d].to_vec();
    let pooled = |v: Var| {
        let vals = tape.value(v);
        let w = model.cfg.width;
        let mut out = vec![0.0; w];
        for r in 0..ENDPOINT_QUERIES {
            for c in 0..w {
                out[c] += vals[r * w + c];
            }
        }
        out.iter_mut().for_each(|x| *x /= ENDPOINT_QUERIES as f64);
        out
    };
    Ok(PlanOutput {
        start: row(0),
        mids: (1..=h).map(row).collect(),
        goal: row(h + 1),
        pooled_start_ctx: pooled(start8),
        pooled_goal_ctx: pooled(goal8),
    })
}

/// Pooled predictor loss on a tape: `Σ_roles (1 - cos) / B` plus
/// `λ · ½(mpCE + mpCEᵀ)` over the batch-pooled prediction/target logits.
pub fn predictor_loss_on_tape(
    tape: &mut Tape,
    pooled_preds: Var,
    targets: &Tensor,
    text_ids: &[usize],
    n_samples: usize,
    lambda: f64,
    log_temp: Var,
) -> Result<Var> {
    let p = text_ids.len();
    if p == 0 {
        return Err(Error::Invalid("empty prediction pool".into()));
    }
    if tape.shape(pooled_preds) != [p, targets.shape[1]] || targets.shape[0] != p {
        return Err(Error::Shape("pool/target mismatch".into()));
    }
    // cosine term: predictions and targets are unit rows, so cos = dot
    let t = Arc::new(targets.clone());
    let dots = tape.mul_const_tensor(pooled_preds, t);
    let dot_sum = tape.sum_all(dots);
    let p_const = tape.constant_scalar(p as f64);
    let cos_term = tape.sub(p_const, dot_sum);
    let cos_term = tape.scale_const(cos_term, 1.0 / n_samples as f64);
    if lambda == 0.0 {
        return Ok(cos_term);
    }
    let e = tape.constant(targets);
    let logits = crate::alignment::scaled_logits(tape, pooled_preds, e, log_temp);
    let mask = positive_mask(text_ids);
    let fwd = mp_cross_entropy(tape, logits, &mask)?;
    let logits_t = tape.transpose(logits);
    let bwd = mp_cross_entropy(tape, logits_t, &mask.transposed())?;
    let nce = tape.add(fwd, bwd);
    let nce = tape.scale_const(nce, 0.5 * lambda);
    Ok(tape.add(cos_term, nce))
}

/// Ranked top-k bank labels by cosine; ties broken by lower bank index.
pub fn readout(prediction: &[f64], bank: &ActionBank, k: usize) -> Vec<usize> {
    assert!(!bank.is_empty(), "empty bank");
    let k = k.min(bank.len());
    let mut scored: Vec<(usize, f64)> = (0..bank.len())
        .map(|l| (l, cosine(prediction, bank.embedding(l))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(l, _)| l).collect()
}

/// One prepared training instance: context plus targets.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub ctx: PlanContext,
    /// Target rows `[S, Mid.., G]` (bank embeddings of the true labels).
    pub targets: Tensor,
    /// Text ids in the same role order.
    pub text_ids: Vec<usize>,
}

impl TrainItem {
    pub fn new(sample: &PlanSample, bank: &ActionBank, align: &AlignmentModel) -> Result<Self> {
        sample.validate(bank)?;
        let ctx = PlanContext::from_sample(sample, align)?;
        let mut rows = vec![bank.embedding(sample.start_label).to_vec()];
        let mut text_ids = vec![sample.start_text_id];
        for (i, &l) in sample.mid_labels.iter().enumerate() {
            rows.push(bank.embedding(l).to_vec());
            text_ids.push(sample.mid_text_ids[i]);
        }
        rows.push(bank.embedding(sample.goal_label).to_vec());
        text_ids.push(sample.goal_text_id);
        Ok(TrainItem {
            ctx,
            targets: Tensor::from_rows(&rows),
            text_ids,
        })
    }
}

pub struct TrainedPredictor {
    pub store: ParamStore,
    pub model: PredictorModel,
}

#[derive(Clone, Debug, Default)]
pub struct PredictorReport {
    pub loss_per_epoch: Vec<f64>,
}

/// Train across mixed horizons with per-sample trajectory and goal dropout.
pub fn train_predictor(
    items: &[TrainItem],
    cfg: &PredictorConfig,
    d: usize,
    d_v: usize,
    seed: u64,
) -> Result<(TrainedPredictor, PredictorReport)> {
    if items.is_empty() {
        return Err(Error::Invalid("empty predictor corpus".into()));
    }
    let mut store = ParamStore::new();
    let model = PredictorModel::init(&mut store, cfg, d, d_v, seed);
    let mut opt = OptimizerState::new(
        &store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut shuffle_rng = rng::stream(seed, "pred-shuffle");
    let mut dropout_rng = rng::stream(seed, "pred-dropout");
    let mut report = PredictorReport::default();

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            // dropout decisions drawn on the main thread, in batch order
            let batch: Vec<(&TrainItem, TrajMode, bool)> = batch_idx
                .iter()
                .map(|&i| {
                    let traj = if dropout_rng.gen_bool(cfg.traj_dropout.clamp(0.0, 1.0)) {
                        TrajMode::Zeroed
                    } else {
                        TrajMode::Provided
                    };
                    let goal_masked = dropout_rng.gen_bool(cfg.goal_dropout.clamp(0.0, 1.0));
                    (&items[i], traj, goal_masked)
                })
                .collect();
            let loss = predictor_train_step(&model, &mut store, &mut opt, cfg, &batch)?;
            epoch_loss += loss;
            batches += 1;
        }
        report.loss_per_epoch.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((TrainedPredictor { store, model }, report))
}

fn predictor_train_step(
    model: &PredictorModel,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    cfg: &PredictorConfig,
    batch: &[(&TrainItem, TrajMode, bool)],
) -> Result<f64> {
    let d = model.d;
    let frozen: &ParamStore = store;

    let forwards: Vec<Result<(Tape, Var, usize)>> = par::par_map(batch, |(item, traj, goal_masked)| {
        let mut tape = Tape::new(frozen);
        let (preds, _, _) = model.forward_on_tape(&mut tape, &item.ctx, *traj, *goal_masked)?;
        let rows = tape.shape(preds)[0];
        Ok((tape, preds, rows))
    });
    let mut tapes = Vec::with_capacity(batch.len());
    for f in forwards {
        tapes.push(f?);
    }

    // pool all prediction rows across the batch
    let mut pool_rows = Vec::new();
    let mut targets = Vec::new();
    let mut text_ids = Vec::new();
    let mut ranges = Vec::with_capacity(batch.len());
    let mut off = 0usize;
    for ((item, _, _), (tape, preds, rows)) in batch.iter().zip(&tapes) {
        pool_rows.extend_from_slice(tape.value(*preds));
        targets.extend_from_slice(&item.targets.data);
        text_ids.extend_from_slice(&item.text_ids);
        ranges.push(off..off + rows);
        off += rows;
    }
    let pool = Tensor::new(vec![off, d], pool_rows)?;
    let target_t = Tensor::new(vec![off, d], targets)?;

    let mut loss_tape = Tape::new(frozen);
    let pool_var = loss_tape.grad_input(&pool);
    let lt = loss_tape.param(model.log_temp);
    let loss = predictor_loss_on_tape(
        &mut loss_tape,
        pool_var,
        &target_t,
        &text_ids,
        batch.len(),
        cfg.lambda,
        lt,
    )?;
    let loss_value = loss_tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("predictor loss = {loss_value}")));
    }
    let bp = loss_tape.backward_scalar(loss)?;
    let mut grads = Grads::new(frozen.len());
    loss_tape.param_grads_into(&bp, &mut grads);
    let pool_grad = bp
        .grad(pool_var)
        .ok_or_else(|| Error::Invalid("loss ignored predictions".into()))?
        .to_vec();

    let chunk_grads: Vec<Result<Grads>> =
        par::par_chunk_map(batch.len(), crate::alignment::GRAD_CHUNK, |range| {
            let mut acc = Grads::new(frozen.len());
            for i in range {
                let (tape, preds, _) = &tapes[i];
                let r = &ranges[i];
                let seed_grad = pool_grad[r.start * d..r.end * d].to_vec();
                let bp = tape.backward(&[(*preds, seed_grad)])?;
                tape.param_grads_into(&bp, &mut acc);
            }
            Ok(acc)
        });
    for cg in chunk_grads {
        grads.merge(&cg?);
    }
    drop(tapes);
    adamw_step(opt, store, &grads)?;
    Ok(loss_value)
}

/// Frozen-model batch eval loss (same formula as training, no gradients).
pub fn eval_loss(
    model: &PredictorModel,
    store: &ParamStore,
    items: &[(TrainItem, TrajMode, bool)],
    batch_size: usize,
    lambda: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("empty eval set".into()));
    }
    let d = model.d;
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in items.chunks(batch_size) {
        let outs: Vec<Result<(Vec<f64>, usize)>> = par::par_map(chunk, |(item, traj, gm)| {
            let mut tape = Tape::new(store);
            let (preds, _, _) = model.forward_on_tape(&mut tape, &item.ctx, *traj, *gm)?;
            Ok((tape.value(preds).to_vec(), tape.shape(preds)[0]))
        });
        let mut pool = Vec::new();
        let mut targets = Vec::new();
        let mut text_ids = Vec::new();
        for (o, (item, _, _)) in outs.into_iter().zip(chunk) {
            let (vals, _rows) = o?;
            pool.extend(vals);
            targets.extend_from_slice(&item.targets.data);
            text_ids.extend_from_slice(&item.text_ids);
        }
        let n = text_ids.len();
        let mut tape = Tape::new(store);
        let pool_var = tape.grad_input(&Tensor::new(vec![n, d], pool)?);
        let lt = tape.param(model.log_temp);
        let loss = predictor_loss_on_tape(
            &mut tape,
            pool_var,
            &Tensor::new(vec![n, d], targets)?,
            &text_ids,
            chunk.len(),
            lambda,
            lt,
        )?;
        total += tape.scalar_value(loss);
        batches += 1;
    }
    Ok(total / batches as f64)
}

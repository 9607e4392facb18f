//! Latent-space planning baseline and its failure analysis: a latent
//! regression predictor over (start, goal, controls), cross-entropy-method
//! search under the l1-to-goal objective, latent-geometry and monotonicity
//! probes, and the score-accuracy correlation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::nn::{gaussian, Linear, Stack};
use crate::math::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::math::tape::{AttentionMask, Grads, ParamId, ParamStore, Tape, Var};
use crate::math::tensor::{cosine, l1_distance, Tensor};
use crate::par;
use crate::predictor::{MAX_HORIZON, MIN_HORIZON};
use crate::rng;
use crate::synthworld::Corpus;

/// Mean absolute distance between a predicted final latent and the goal.
pub fn l1_to_goal(pred_final: &[f64], z_goal: &[f64]) -> Result<f64> {
    if pred_final.len() != z_goal.len() {
        return Err(Error::Shape(format!(
            "latent dims {} vs {}",
            pred_final.len(),
            z_goal.len()
        )));
    }
    Ok(l1_distance(pred_final, z_goal))
}

// ---- CEM ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
    pub seed: u64,
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::Invalid("population must be positive".into()));
        }
        if !(0.0 < self.elite_fraction && self.elite_fraction < 1.0) {
            return Err(Error::Invalid("elite_fraction must be in (0,1)".into()));
        }
        if self.elite_count() == 0 {
            return Err(Error::Invalid("elite count must be >= 1".into()));
        }
        if self.init_mean.len() != self.init_std.len() || self.init_mean.is_empty() {
            return Err(Error::Invalid("init mean/std must be non-empty and matched".into()));
        }
        if self.init_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("init std must be > 0".into()));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction) as usize).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct CemOutcome {
    pub best: Vec<f64>,
    pub best_score: f64,
    /// Best score seen up to and including each round (monotone non-increasing).
    pub best_per_round: Vec<f64>,
    pub evaluations: usize,
}

/// Iterative Gaussian refit on elites, minimizing `objective`. The initial
/// population counts as round 0; `iterations` refit rounds follow. Returns
/// the argmin over every sample evaluated.
pub fn cem_search<F>(objective: F, cfg: &CemConfig) -> Result<CemOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let dim = cfg.init_mean.len();
    let elite = cfg.elite_count();
    let mut mean = cfg.init_mean.clone();
    let mut std = cfg.init_std.clone();
    let mut draw_rng = rng::stream(cfg.seed, "cem-draws");
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut best_per_round = Vec::with_capacity(cfg.iterations + 1);
    let mut evaluations = 0usize;

    for _round in 0..=cfg.iterations {
        // draws are sequential on the main thread; scoring is parallel
        let pop: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..dim)
                    .map(|c| mean[c] + std[c] * normal.sample(&mut draw_rng))
                    .collect()
            })
            .collect();
        let scores = par::par_map(&pop, |x| objective(x));
        evaluations += pop.len();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("cem objective".into()));
        }
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let round_best = order[0];
        if best.as_ref().map_or(true, |(s, _)| scores[round_best] < *s) {
            best = Some((scores[round_best], pop[round_best].clone()));
        }
        best_per_round.push(best.as_ref().unwrap().0);

        // refit on this round's elites
        let elites: Vec<&Vec<f64>> = order[..elite].iter().map(|&i| &pop[i]).collect();
        for c in 0..dim {
            let m: f64 = elites.iter().map(|e| e[c]).sum::<f64>() / elite as f64;
            let v: f64 =
                elites.iter().map(|e| (e[c] - m) * (e[c] - m)).sum::<f64>() / elite as f64;
            mean[c] = m;
            std[c] = v.sqrt().max(1e-8);
        }
    }
    let (best_score, best) = best.unwrap();
    Ok(CemOutcome {
        best,
        best_score,
        best_per_round,
        evaluations,
    })
}

// ---- latent regression predictor ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LatentConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Trajectory-conditioned (Oracle/CEM) vs control-free (No-Traj) variant.
    pub use_controls: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            layers: 4,
            width: 64,
            heads: 4,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            use_controls: true,
        }
    }
}

/// One latent-regression instance: endpoint latents, flattened per-mid
/// controls, ground-truth mid latents.
#[derive(Clone, Debug)]
pub struct LatentItem {
    pub z_start: Vec<f64>,
    pub z_goal: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl LatentItem {
    pub fn from_window(corpus: &Corpus, win: &crate::synthworld::PlanWindow) -> Result<Self> {
        let segs = win.segs(corpus);
        let mids = &segs[1..segs.len() - 1];
        Ok(LatentItem {
            z_start: segs[0].latent(),
            z_goal: segs[segs.len() - 1].latent(),
            controls: mids
                .iter()
                .map(|s| {
                    s.controls
                        .as_ref()
                        .map(|c| c.flat())
                        .ok_or_else(|| Error::MissingArtifact("segment controls".into()))
                })
                .collect::<Result<_>>()?,
            targets: mids.iter().map(|s| s.latent()).collect(),
            horizon: win.horizon,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LatentPredictor {
    pub cfg: LatentConfig,
    pub d_v: usize,
    pub control_dim: usize,
    start_proj: Linear,
    goal_proj: Linear,
    control_proj: Linear,
    step_query: ParamId,
    step_pos: ParamId,
    horizon_emb: ParamId,
    type_emb: ParamId,
    stack: Stack,
    out_proj: Linear,
}

impl LatentPredictor {
    pub fn init(
        store: &mut ParamStore,
        cfg: &LatentConfig,
        d_v: usize,
        control_dim: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "latent-init");
        let w = cfg.width;
        LatentPredictor {
            cfg: cfg.clone(),
            d_v,
            control_dim,
            start_proj: Linear::init(store, "lat.start", d_v, w, true, &mut r),
            goal_proj: Linear::init(store, "lat.goal", d_v, w, true, &mut r),
            control_proj: Linear::init(store, "lat.control", control_dim, w, false, &mut r),
            step_query: store.add("lat.step_query", gaussian(vec![1, w], 0.02, &mut r)),
            step_pos: store.add(
                "lat.step_pos",
                gaussian(vec![MAX_HORIZON - 2, w], 0.02, &mut r),
            ),
            horizon_emb: store.add(
                "lat.horizon",
                gaussian(vec![MAX_HORIZON - MIN_HORIZON + 1, w], 0.02, &mut r),
            ),
            type_emb: store.add("lat.type", gaussian(vec![3, w], 0.02, &mut r)),
            stack: Stack::init(store, "lat.stack", cfg.layers, w, cfg.heads, &mut r),
            out_proj: Linear::init(store, "lat.out", w, d_v, true, &mut r),
        }
    }

    pub fn attach(store: &ParamStore, cfg: &LatentConfig, d_v: usize, control_dim: usize) -> Result<Self> {
        let need = |name: &str| {
            store
                .by_name(name)
                .ok_or_else(|| Error::MissingArtifact(format!("param {name}")))
        };
        Ok(LatentPredictor {
            cfg: cfg.clone(),
            d_v,
            control_dim,
            start_proj: Linear::attach(store, "lat.start")?,
            goal_proj: Linear::attach(store, "lat.goal")?,
            control_proj: Linear::attach(store, "lat.control")?,
            step_query: need("lat.step_query")?,
            step_pos: need("lat.step_pos")?,
            horizon_emb: need("lat.horizon")?,
            type_emb: need("lat.type")?,
            stack: Stack::attach(store, "lat.stack", cfg.layers, cfg.heads)?,
            out_proj: Linear::attach(store, "lat.out")?,
        })
    }

    /// Predicted mid latents `[h, d_v]` for one item; `controls` may be
    /// overridden (CEM feeds its samples through here).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        z_start: &[f64],
        z_goal: &[f64],
        controls: &[Vec<f64>],
        horizon: usize,
    ) -> Result<Var> {
        if !(MIN_HORIZON..=MAX_HORIZON).contains(&horizon) {
            return Err(Error::Invalid(format!("horizon {horizon} outside 3..8")));
        }
        let h = horizon - 2;
        if self.cfg.use_controls && controls.len() != h {
            return Err(Error::Invalid(format!(
                "need {h} control vectors, got {}",
                controls.len()
            )));
        }
        let type_emb = tape.param(self.type_emb);
        let t0 = tape.slice_rows(type_emb, 0, 1);
        let t1 = tape.slice_rows(type_emb, 1, 2);
        let t2 = tape.slice_rows(type_emb, 2, 3);
        let zs = tape.constant(&Tensor::new(vec![1, self.d_v], z_start.to_vec())?);
        let zg = tape.constant(&Tensor::new(vec![1, self.d_v], z_goal.to_vec())?);
        let start_tok = self.start_proj.forward(tape, zs);
        let start_tok = tape.add(start_tok, t0);
        let goal_tok = self.goal_proj.forward(tape, zg);
        let goal_tok = tape.add(goal_tok, t1);
        let step_query = tape.param(self.step_query);
        let step_pos = tape.param(self.step_pos);
        let h_emb = tape.param(self.horizon_emb);
        let h_row = tape.slice_rows(h_emb, horizon - MIN_HORIZON, horizon - MIN_HORIZON + 1);
        let mut rows = vec![start_tok, goal_tok];
        for i in 0..h {
            let base = if self.cfg.use_controls {
                let c = tape.constant(&Tensor::new(vec![1, self.control_dim], controls[i].clone())?);
                let cp = self.control_proj.forward(tape, c);
                tape.add(cp, step_query)
            } else {
                let zero = tape.constant(&Tensor::zeros(vec![1, self.cfg.width]));
                tape.add(zero, step_query)
            };
            let sp = tape.slice_rows(step_pos, i, i + 1);
            let tok = tape.add(base, sp);
            let tok = tape.add(tok, h_row);
            let tok = tape.add(tok, t2);
            rows.push(tok);
        }
        let seq = tape.concat_rows(&rows);
        let mask = Arc::new(AttentionMask::full(2 + h, 2 + h));
        let out = self.stack.forward(tape, seq, &mask)?;
        let mids = tape.slice_rows(out, 2, 2 + h);
        Ok(self.out_proj.forward(tape, mids))
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        z_start: &[f64],
        z_goal: &[f64],
        controls: &[Vec<f64>],
        horizon: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(store);
        let out = self.forward_on_tape(&mut tape, z_start, z_goal, controls, horizon)?;
        let v = tape.value(out);
        Ok((0..horizon - 2)
            .map(|i| v[i * self.d_v..(i + 1) * self.d_v].to_vec())
            .collect())
    }
}

pub struct TrainedLatent {
    pub store: ParamStore,
    pub model: LatentPredictor,
}

/// MSE regression onto ground-truth mid latents.
pub fn train_latent(
    items: &[LatentItem],
    cfg: &LatentConfig,
    d_v: usize,
    control_dim: usize,
    seed: u64,
) -> Result<TrainedLatent> {
    if items.is_empty() {
        return Err(Error::Invalid("empty latent corpus".into()));
    }
    let mut store = ParamStore::new();
    let model = LatentPredictor::init(&mut store, cfg, d_v, control_dim, seed);
    let mut opt = OptimizerState::new(
        &store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut shuffle_rng = rng::stream(seed, "latent-shuffle");
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &ParamStore = &store;
            let results: Vec<Result<(f64, Grads)>> =
                par::par_chunk_map(batch.len(), crate::alignment::GRAD_CHUNK, |range| {
                    let mut acc = Grads::new(frozen.len());
                    let mut loss_sum = 0.0;
                    for bi in range {
                        let item = &items[batch[bi]];
                        let mut tape = Tape::new(frozen);
                        let preds = model.forward_on_tape(
                            &mut tape,
                            &item.z_start,
                            &item.z_goal,
                            &item.controls,
                            item.horizon,
                        )?;
                        let h = item.horizon - 2;
                        let mut target = Vec::with_capacity(h * d_v);
                        for t in &item.targets {
                            target.extend_from_slice(t);
                        }
                        let tgt = tape.constant(&Tensor::new(vec![h, d_v], target)?);
                        let diff = tape.sub(preds, tgt);
                        let sq = tape.mul(diff, diff);
                        let loss = tape.mean_all(sq);
                        loss_sum += tape.scalar_value(loss);
                        let bp = tape.backward_scalar(loss)?;
                        tape.param_grads_into(&bp, &mut acc);
                    }
                    Ok((loss_sum, acc))
                });
            let mut grads = Grads::new(store.len());
            let mut total = 0.0;
            for r in results {
                let (l, g) = r?;
                total += l;
                grads.merge(&g);
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("latent loss = {total}")));
            }
            grads.scale(1.0 / batch.len() as f64);
            adamw_step(&mut opt, &mut store, &grads)?;
        }
    }
    Ok(TrainedLatent { store, model })
}

/// The production CEM objective: roll sampled controls through the frozen
/// latent predictor and score the final mid latent by l1 to the goal.
pub fn latent_l1_objective<'a>(
    latent: &'a TrainedLatent,
    z_start: &'a [f64],
    z_goal: &'a [f64],
    horizon: usize,
) -> impl Fn(&[f64]) -> f64 + Sync + 'a {
    let h = horizon - 2;
    let control_dim = latent.model.control_dim;
    move |flat: &[f64]| {
        let controls: Vec<Vec<f64>> = (0..h)
            .map(|i| flat[i * control_dim..(i + 1) * control_dim].to_vec())
            .collect();
        match latent
            .model
            .predict(&latent.store, z_start, z_goal, &controls, horizon)
        {
            Ok(preds) => l1_distance(preds.last().unwrap(), z_goal),
            Err(_) => f64::INFINITY,
        }
    }
}

// ---- probes ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairType {
    AdjacentSameRecording,
    FarSameRecording,
    SameActionCrossRecording,
    RandomCrossRecording,
}

impl PairType {
    pub fn name(&self) -> &'static str {
        match self {
            PairType::AdjacentSameRecording => "adjacent_same_recording",
            PairType::FarSameRecording => "far_same_recording",
            PairType::SameActionCrossRecording => "same_action_cross_recording",
            PairType::RandomCrossRecording => "random_cross_recording",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryRow {
    pub pair_type: PairType,
    pub mean_l1: f64,
    pub mean_cosine: f64,
    pub pairs: usize,
}

const MAX_PROBE_PAIRS: usize = 4000;
const FAR_GAP: usize = 3;

/// Mean latent l1/cosine per pair type. Types with no admissible pairs are
/// omitted; errors only when nothing is admissible.
pub fn pair_geometry_probe(corpus: &Corpus, seed: u64) -> Result<Vec<GeometryRow>> {
    struct Item {
        take: usize,
        seg: usize,
        text_id: usize,
        latent: Vec<f64>,
    }
    let items: Vec<Item> = corpus
        .takes
        .iter()
        .flat_map(|t| {
            t.segments.iter().map(|s| Item {
                take: s.take_id,
                seg: s.segment_index,
                text_id: s.text_id,
                latent: s.latent(),
            })
        })
        .collect();
    if items.len() < 2 {
        return Err(Error::Invalid("probe needs at least 2 segments".into()));
    }
    let n = items.len();
    let mut pairs: Vec<(PairType, Vec<(usize, usize)>)> = vec![
        (PairType::AdjacentSameRecording, Vec::new()),
        (PairType::FarSameRecording, Vec::new()),
        (PairType::SameActionCrossRecording, Vec::new()),
        (PairType::RandomCrossRecording, Vec::new()),
    ];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&items[i], &items[j]);
            if a.take == b.take {
                let gap = a.seg.abs_diff(b.seg);
                if gap == 1 {
                    pairs[0].1.push((i, j));
                } else if gap >= FAR_GAP {
                    pairs[1].1.push((i, j));
                }
            } else {
                if a.text_id == b.text_id {
                    pairs[2].1.push((i, j));
                }
                pairs[3].1.push((i, j));
            }
        }
    }
    let mut probe_rng = rng::stream(seed, "geometry-probe");
    let mut rows = Vec::new();
    for (ty, candidates) in pairs {
        if candidates.is_empty() {
            continue;
        }
        let chosen: Vec<(usize, usize)> = if candidates.len() > MAX_PROBE_PAIRS {
            (0..MAX_PROBE_PAIRS)
                .map(|_| candidates[probe_rng.gen_range(0..candidates.len())])
                .collect()
        } else {
            candidates
        };
        let mut l1 = 0.0;
        let mut cos = 0.0;
        for &(i, j) in &chosen {
            l1 += l1_distance(&items[i].latent, &items[j].latent);
            cos += cosine(&items[i].latent, &items[j].latent);
        }
        rows.push(GeometryRow {
            pair_type: ty,
            mean_l1: l1 / chosen.len() as f64,
            mean_cosine: cos / chosen.len() as f64,
            pairs: chosen.len(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no admissible pair types".into()));
    }
    Ok(rows)
}

/// Fraction of latent sequences whose l1-to-goal strictly decreases along
/// `[z_start, z_1, .., z_h, z_goal]`.
pub fn monotonicity_fraction(sequences: &[Vec<Vec<f64>>]) -> f64 {
    if sequences.is_empty() {
        return 0.0;
    }
    let monotone = sequences
        .iter()
        .filter(|seq| {
            let goal = seq.last().unwrap();
            let dists: Vec<f64> = seq.iter().map(|z| l1_distance(z, goal)).collect();
            dists.windows(2).all(|w| w[0] > w[1])
        })
        .count();
    monotone as f64 / sequences.len() as f64
}

/// Latent sequences of every window at one horizon.
pub fn latent_sequences(corpus: &Corpus, horizon: usize) -> Vec<Vec<Vec<f64>>> {
    corpus
        .windows(horizon)
        .iter()
        .map(|w| w.segs(corpus).iter().map(|s| s.latent()).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

/// Pearson correlation with a Fisher-z 95% interval.
pub fn score_accuracy_correlation(scores: &[f64], accuracies: &[f64]) -> Result<Correlation> {
    let n = scores.len();
    if n != accuracies.len() || n < 3 {
        return Err(Error::Invalid(format!("need >= 3 paired observations, got {n}")));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (mx, my) = (mean(scores), mean(accuracies));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in scores.iter().zip(accuracies) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("constant input: correlation undefined".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let (lo, hi) = if n > 3 && r.abs() < 1.0 {
        let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
        let se = 1.0 / ((n - 3) as f64).sqrt();
        let (zl, zh) = (z - 1.959964 * se, z + 1.959964 * se);
        (zl.tanh(), zh.tanh())
    } else {
        (r, r)
    };
    Ok(Correlation {
        r,
        n,
        ci95_low: lo,
        ci95_high: hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_corpus, WorldConfig};

    #[test]
    fn l1_trivial_and_seeded_oracle() {
        assert_eq!(l1_to_goal(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_to_goal(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(l1_to_goal(&[1.0], &[1.0, 2.0]).is_err());
        let mut r = rng::stream(1, "l1");
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| r.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| r.gen_range(-3.0..3.0)).collect();
            let want = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / 16.0;
            assert!((l1_to_goal(&a, &b).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cem_finds_known_optimum() {
        // minimize ||x - x*|| with x* inside the init support
        let target = vec![0.4, -0.2, 0.7, 0.1, -0.5, 0.3];
        let objective = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let cfg = CemConfig {
            population: 64,
            elite_fraction: 0.1,
            iterations: 5,
            init_mean: vec![0.0; 6],
            init_std: vec![1.0; 6],
            seed: 0,
        };
        let out = cem_search(objective, &cfg).unwrap();
        let dist = objective(&out.best);
        assert!(dist <= 0.05, "best is {dist} from the optimum");
        assert_eq!(out.evaluations, 64 * 6);
    }

    #[test]
    fn cem_zero_iterations_scores_initial_population_only() {
        let cfg = CemConfig {
            population: 32,
            elite_fraction: 0.25,
            iterations: 0,
            init_mean: vec![0.0; 3],
            init_std: vec![1.0; 3],
            seed: 7,
        };
        let out = cem_search(|x| x.iter().map(|v| v * v).sum(), &cfg).unwrap();
        assert_eq!(out.evaluations, 32);
        assert_eq!(out.best_per_round.len(), 1);
    }

    #[test]
    fn cem_degenerate_std_at_optimum_returns_it() {
        let target = [1.5, -2.5];
        let cfg = CemConfig {
            population: 16,
            elite_fraction: 0.25,
            iterations: 2,
            init_mean: target.to_vec(),
            init_std: vec![1e-9; 2],
            seed: 3,
        };
        let out = cem_search(
            |x| {
                x.iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            },
            &cfg,
        )
        .unwrap();
        assert!(out.best_score < 1e-7);
        assert!((out.best[0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn cem_best_score_monotone_across_rounds() {
        let cfg = CemConfig {
            population: 40,
            elite_fraction: 0.15,
            iterations: 6,
            init_mean: vec![2.0; 4],
            init_std: vec![1.5; 4],
            seed: 11,
        };
        let out = cem_search(|x| x.iter().map(|v| (v - 0.3).abs()).sum(), &cfg).unwrap();
        for w in out.best_per_round.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn cem_validates_config_and_objective() {
        let bad = CemConfig {
            population: 10,
            elite_fraction: 0.0,
            iterations: 1,
            init_mean: vec![0.0],
            init_std: vec![1.0],
            seed: 0,
        };
        assert!(cem_search(|_| 0.0, &bad).is_err());
        let cfg = CemConfig {
            population: 4,
            elite_fraction: 0.5,
            iterations: 0,
            init_mean: vec![0.0],
            init_std: vec![1.0],
            seed: 0,
        };
        assert!(cem_search(|_| f64::NAN, &cfg).is_err());
    }

    #[test]
    fn identical_latents_make_all_probe_rows_equal() {
        let mut world = generate_corpus(&WorldConfig {
            n_takes: 6,
            segments_per_take: 6,
            n_actions: 8,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        // overwrite every token grid with one constant grid
        let constant = Tensor::new(vec![16, 64], vec![0.5; 16 * 64]).unwrap();
        for take in &mut world.train.takes {
            for seg in &mut take.segments {
                seg.visual_tokens = constant.clone();
            }
        }
        let rows = pair_geometry_probe(&world.train, 0).unwrap();
        for row in rows {
            assert!(row.mean_l1.abs() < 1e-12);
            assert!((row.mean_cosine - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_dominant_corpus_reproduces_probe_ordering() {
        // scene variance 4x action variance: same-recording pairs closest,
        // then same-action cross-recording, then random cross-recording
        let world = generate_corpus(&WorldConfig {
            n_takes: 12,
            segments_per_take: 8,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let rows = pair_geometry_probe(&world.train, 0).unwrap();
        let l1 = |ty: PairType| {
            rows.iter()
                .find(|r| r.pair_type == ty)
                .map(|r| r.mean_l1)
                .unwrap()
        };
        let adj = l1(PairType::AdjacentSameRecording);
        let far = l1(PairType::FarSameRecording);
        let same_action = l1(PairType::SameActionCrossRecording);
        let random = l1(PairType::RandomCrossRecording);
        assert!(adj < same_action, "{adj} vs {same_action}");
        assert!(far < same_action, "{far} vs {same_action}");
        assert!(same_action < random, "{same_action} vs {random}");
    }

    #[test]
    fn zero_scene_variance_inverts_the_ordering() {
        let world = generate_corpus(&WorldConfig {
            n_takes: 12,
            segments_per_take: 8,
            scene_variance: 0.0,
            action_variance: 1.0,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        let rows = pair_geometry_probe(&world.train, 0).unwrap();
        let same_action = rows
            .iter()
            .find(|r| r.pair_type == PairType::SameActionCrossRecording)
            .unwrap()
            .mean_l1;
        for row in &rows {
            if row.pair_type != PairType::SameActionCrossRecording {
                assert!(
                    same_action < row.mean_l1,
                    "same-action pairs must be closest without scene structure"
                );
            }
        }
    }

    #[test]
    fn two_point_corpus_uses_single_admissible_pair() {
        let mut world = generate_corpus(&WorldConfig {
            n_takes: 4,
            segments_per_take: 2,
            n_actions: 4,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        world.train.takes.truncate(1);
        let rows = pair_geometry_probe(&world.train, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].pair_type, PairType::AdjacentSameRecording);
        assert_eq!(rows[0].pairs, 1);
    }

    #[test]
    fn monotonicity_trivial_cases() {
        // straight-line interpolation: strictly decreasing distances
        let goal = vec![1.0; 4];
        let seq: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let u = i as f64 / 4.0;
                goal.iter().map(|g| g * u).collect()
            })
            .collect();
        assert_eq!(monotonicity_fraction(&[seq.clone()]), 1.0);
        // move away then return
        let away = vec![
            vec![0.5; 4],
            vec![-1.0; 4],
            goal.clone(),
        ];
        assert_eq!(monotonicity_fraction(&[away]), 0.0);
    }

    #[test]
    fn monotonicity_collapses_with_horizon_on_synthetic_corpus() {
        let world = generate_corpus(&WorldConfig {
            n_takes: 16,
            segments_per_take: 10,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let fractions: Vec<f64> = (MIN_HORIZON..=MAX_HORIZON)
            .map(|h| monotonicity_fraction(&latent_sequences(&world.train, h)))
            .collect();
        for w in fractions.windows(2) {
            assert!(
                w[1] <= w[0] + 0.05,
                "fractions should not increase with horizon: {fractions:?}"
            );
        }
        assert!(
            fractions[MAX_HORIZON - MIN_HORIZON] < 0.5 * fractions[0].max(1e-9),
            "H=8 fraction must be under half of H=3: {fractions:?}"
        );
    }

    #[test]
    fn correlation_trivial_and_errors() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y_neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((score_accuracy_correlation(&x, &y_neg).unwrap().r + 1.0).abs() < 1e-12);
        assert!((score_accuracy_correlation(&x, &x).unwrap().r - 1.0).abs() < 1e-12);
        assert!(score_accuracy_correlation(&x, &vec![2.0; 4]).is_err());
        assert!(score_accuracy_correlation(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn latent_predictor_learns_regression() {
        // with controls carrying the target signal, MSE training on a tiny
        // synthetic mapping should shrink the holdout error well below the
        // control-free variant
        let mut r = rng::stream(13, "latent-learn");
        let d_v = 8;
        let control_dim = 6;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let dirs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d_v).map(|_| normal.sample(&mut r)).collect())
            .collect();
        let make = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<LatentItem> {
            (0..n)
                .map(|_| {
                    let ids: Vec<usize> = (0..2).map(|_| r.gen_range(0..4)).collect();
                    let controls: Vec<Vec<f64>> = ids
                        .iter()
                        .map(|&id| {
                            let mut c = vec![0.0; control_dim];
                            c[id] = 1.0;
                            c
                        })
                        .collect();
                    let targets: Vec<Vec<f64>> = ids.iter().map(|&id| dirs[id].clone()).collect();
                    LatentItem {
                        z_start: (0..d_v).map(|_| normal.sample(r)).collect(),
                        z_goal: (0..d_v).map(|_| normal.sample(r)).collect(),
                        controls,
                        targets,
                        horizon: 4,
                    }
                })
                .collect()
        };
        let train = make(&mut r, 80);
        let hold = make(&mut r, 20);
        let cfg = LatentConfig {
            layers: 2,
            width: 32,
            heads: 2,
            epochs: 30,
            ..Default::default()
        };
        let trained = train_latent(&train, &cfg, d_v, control_dim, 0).unwrap();
        let mse = |t: &TrainedLatent, items: &[LatentItem]| -> f64 {
            let mut total = 0.0;
            let mut n = 0;
            for it in items {
                let preds = t
                    .model
                    .predict(&t.store, &it.z_start, &it.z_goal, &it.controls, it.horizon)
                    .unwrap();
                for (p, tgt) in preds.iter().zip(&it.targets) {
                    total += p
                        .iter()
                        .zip(tgt)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                    n += p.len();
                }
            }
            total / n as f64
        };
        let err = mse(&trained, &hold);
        assert!(err < 0.35, "holdout mse {err}");
        let blind = train_latent(
            &train,
            &LatentConfig {
                use_controls: false,
                ..cfg
            },
            d_v,
            control_dim,
            0,
        )
        .unwrap();
        let err_blind = mse(&blind, &hold);
        assert!(
            err < 0.5 * err_blind,
            "controls must matter: {err} vs {err_blind}"
        );
    }
}

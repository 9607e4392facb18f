//! Evaluation driver: runs the frozen models over test windows in each
//! inference mode (no-trajectory, oracle trajectory, gate-then-rank scorer,
//! latent-space CEM), scores them with the metrics module, and collects the
//! selector and retrieval diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::cem::{
    cem_search, latent_l1_objective, CemConfig, TrainedLatent,
};
use crate::error::{Error, Result};
use crate::math::tensor::cosine;
use crate::metrics::{aggregate, sample_metrics, EvalReport, SampleMetrics, SequencePrediction};
use crate::par;
use crate::pilot::{
    build_candidate_set, candidate_utility, gate_then_rank_infer, pool_oracle, ranked_text_ids,
    scorer_features, CandidateSet, RetrievalMode, TrainedScorer, TrajectoryBank,
};
use crate::predictor::{predict_plan, PlanContext, PlanOutput, TrainedPredictor, TrajMode};
use crate::synthworld::{ActionBank, Corpus, PlanWindow, World};

pub const EVAL_HORIZONS: [usize; 6] = [3, 4, 5, 6, 7, 8];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalSettings {
    /// Retrieval pool size for the scorer path.
    pub k: usize,
    /// Pool sizes for the selection-headroom sweep.
    pub pool_ks: Vec<usize>,
    pub cem_population: usize,
    pub cem_elite_fraction: f64,
    pub cem_iterations: usize,
    /// Cap on eval windows per horizon for the CEM comparison.
    pub cem_max_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 16,
            pool_ks: vec![1, 5, 16],
            cem_population: 64,
            cem_elite_fraction: 0.1,
            cem_iterations: 5,
            cem_max_samples: 12,
        }
    }
}

/// A test window with its precomputed context and ground truth. Carries the
/// visual-latent view of the same window for the latent-pipeline modes.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub window: PlanWindow,
    pub ctx: PlanContext,
    pub truth_text_ids: Vec<usize>,
    pub gt_mid_labels: Vec<usize>,
    pub scenario: usize,
    pub latent_start: Vec<f64>,
    pub latent_goal: Vec<f64>,
    /// Flattened raw mid controls (the latent predictor's conditioning).
    pub mid_control_flat: Vec<Vec<f64>>,
}

/// Build eval samples from every test window, reusing per-segment latents.
pub fn eval_samples(
    corpus: &Corpus,
    align: &AlignmentModel,
    horizons: &[usize],
) -> Result<Vec<EvalSample>> {
    let latents = encode_segment_latents(corpus, align)?;
    let mut out = Vec::new();
    for &h in horizons {
        for win in corpus.windows(h) {
            let segs = win.segs(corpus);
            let n = segs.len();
            let z = |i: usize| latents[win.take_idx][win.start_seg + i].clone();
            out.push(EvalSample {
                window: win,
                ctx: PlanContext {
                    start_tokens: segs[0].visual_tokens.clone(),
                    goal_tokens: segs[n - 1].visual_tokens.clone(),
                    horizon: h,
                    start_traj: z(0),
                    goal_traj: z(n - 1),
                    mid_traj: (1..n - 1).map(z).collect(),
                },
                truth_text_ids: segs.iter().map(|s| s.text_id).collect(),
                gt_mid_labels: segs[1..n - 1].iter().map(|s| s.bank_label).collect(),
                scenario: segs[0].scenario,
                latent_start: segs[0].latent(),
                latent_goal: segs[n - 1].latent(),
                mid_control_flat: segs[1..n - 1]
                    .iter()
                    .map(|s| {
                        s.controls
                            .as_ref()
                            .map(|c| c.flat())
                            .ok_or_else(|| Error::MissingArtifact("controls".into()))
                    })
                    .collect::<Result<_>>()?,
            });
        }
    }
    Ok(out)
}

/// Frozen-encoder latents for every segment, `[take][segment]`.
pub fn encode_segment_latents(
    corpus: &Corpus,
    align: &AlignmentModel,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let takes: Vec<usize> = (0..corpus.takes.len()).collect();
    let encoded: Vec<Result<Vec<Vec<f64>>>> = par::par_map(&takes, |&ti| {
        corpus.takes[ti]
            .segments
            .iter()
            .map(|s| {
                let c = s.controls.as_ref().ok_or_else(|| {
                    Error::MissingArtifact("segment controls (run preprocess)".into())
                })?;
                align.encoder.encode(&align.store, c)
            })
            .collect()
    });
    encoded.into_iter().collect()
}

fn prediction_rows(plan: &PlanOutput) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = vec![&plan.start];
    rows.extend(plan.mids.iter().map(|m| m.as_slice()));
    rows.push(&plan.goal);
    rows
}

fn sequence_from_plan(
    plan: &PlanOutput,
    sample: &EvalSample,
    bank: &ActionBank,
) -> Result<SequencePrediction> {
    let ranked: Vec<Vec<usize>> = prediction_rows(plan)
        .iter()
        .map(|p| ranked_text_ids(p, bank, 5))
        .collect();
    SequencePrediction::new(ranked, sample.truth_text_ids.clone(), sample.ctx.horizon)
}

/// Per-horizon gate-positive rates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GateRates {
    pub per_horizon: Vec<(usize, f64, usize)>,
}

impl GateRates {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,gate_positive_rate,samples\n");
        for (h, r, n) in &self.per_horizon {
            out.push_str(&format!("{h},{r:.6},{n}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoolSweepRow {
    pub k: usize,
    pub horizon: usize,
    pub mid_r1: f64,
    pub mseq: f64,
    pub same_step_recall: f64,
    pub any_step_recall: f64,
    pub samples: usize,
}

pub fn pool_sweep_csv(rows: &[PoolSweepRow]) -> String {
    let mut out = String::from("k,horizon,mid_r1,mseq,same_step_recall,any_step_recall,samples\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.k, r.horizon, r.mid_r1, r.mseq, r.same_step_recall, r.any_step_recall, r.samples
        ));
    }
    out
}

#[derive(Debug, Default)]
pub struct PlanningEval {
    /// Reports keyed by mode name (`notraj`, `oracle`, `scorer`, ...).
    pub reports: BTreeMap<String, EvalReport>,
    pub gate_rates: GateRates,
    pub pool_sweep: Vec<PoolSweepRow>,
}

/// Evaluate the main pipeline on planning (goal observed) or anticipation
/// (goal masked; retrieval indexes by start only).
pub fn eval_plan_modes(
    samples: &[EvalSample],
    bank: &ActionBank,
    predictor: &TrainedPredictor,
    scorer: Option<(&TrainedScorer, &TrajectoryBank)>,
    settings: &EvalSettings,
    goal_masked: bool,
) -> Result<PlanningEval> {
    if samples.is_empty() {
        return Err(Error::Invalid("no eval samples".into()));
    }
    let retrieval_mode = if goal_masked {
        RetrievalMode::Anticipation
    } else {
        RetrievalMode::Planning
    };

    struct PerSample {
        horizon: usize,
        notraj: SampleMetrics,
        oracle: SampleMetrics,
        scorer: Option<(SampleMetrics, bool)>,
        pool: Vec<(usize, SampleMetrics, f64, f64)>,
    }

    let results: Vec<Result<PerSample>> = par::par_map(samples, |s| {
        let notraj_plan = predict_plan(
            &predictor.model,
            &predictor.store,
            &s.ctx,
            TrajMode::Zeroed,
            goal_masked,
        )?;
        let oracle_plan = predict_plan(
            &predictor.model,
            &predictor.store,
            &s.ctx,
            TrajMode::Provided,
            goal_masked,
        )?;
        let notraj = sample_metrics(&sequence_from_plan(&notraj_plan, s, bank)?);
        let oracle = sample_metrics(&sequence_from_plan(&oracle_plan, s, bank)?);
        let mut scorer_out = None;
        let mut pool_rows = Vec::new();
        if let Some((sc, traj_bank)) = scorer {
            let set = build_candidate_set(
                predictor,
                traj_bank,
                &s.ctx,
                settings.k.max(settings.pool_ks.iter().copied().max().unwrap_or(1)),
                retrieval_mode,
                goal_masked,
                None,
            )?;
            // scorer path uses the configured K
            let scorer_set = CandidateSet {
                candidates: set.candidates[..settings.k.min(set.candidates.len())].to_vec(),
                ..set.clone()
            };
            let feats = scorer_features(&scorer_set, traj_bank, bank);
            let (chosen, fired) = gate_then_rank_infer(&sc.model, &sc.store, &scorer_set, &feats)?;
            scorer_out = Some((
                sample_metrics(&sequence_from_plan(chosen, s, bank)?),
                fired,
            ));
            // pool-oracle sweep over K
            let utilities: Vec<f64> = set
                .candidates
                .iter()
                .map(|c| candidate_utility(&c.plan.mids, &s.gt_mid_labels, bank).u)
                .collect();
            let gt_texts: Vec<usize> =
                s.truth_text_ids[1..s.truth_text_ids.len() - 1].to_vec();
            for &k in &settings.pool_ks {
                let k = k.min(set.candidates.len());
                if k == 0 {
                    continue;
                }
                let sub = CandidateSet {
                    candidates: set.candidates[..k].to_vec(),
                    ..set.clone()
                };
                let outcome = pool_oracle(&sub, traj_bank, &utilities[..k], &gt_texts);
                let picked = &sub.candidates[outcome.best_idx].plan;
                pool_rows.push((
                    k,
                    sample_metrics(&sequence_from_plan(picked, s, bank)?),
                    outcome.same_step_recall,
                    outcome.any_step_recall,
                ));
            }
        }
        Ok(PerSample {
            horizon: s.ctx.horizon,
            notraj,
            oracle,
            scorer: scorer_out,
            pool: pool_rows,
        })
    });

    let mut notraj = Vec::new();
    let mut oracle = Vec::new();
    let mut scorer_rows = Vec::new();
    let mut gate_by_h: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut pool_acc: BTreeMap<(usize, usize), (Vec<SampleMetrics>, f64, f64)> = BTreeMap::new();
    for r in results {
        let r = r?;
        notraj.push((r.horizon, r.notraj));
        oracle.push((r.horizon, r.oracle));
        if let Some((m, fired)) = r.scorer {
            scorer_rows.push((r.horizon, m));
            let e = gate_by_h.entry(r.horizon).or_default();
            e.0 += usize::from(fired);
            e.1 += 1;
        }
        for (k, m, same, any) in r.pool {
            let e = pool_acc.entry((k, r.horizon)).or_default();
            e.0.push(m);
            e.1 += same;
            e.2 += any;
        }
    }

    let mut reports = BTreeMap::new();
    reports.insert("notraj".to_string(), aggregate(&notraj)?);
    reports.insert("oracle".to_string(), aggregate(&oracle)?);
    if !scorer_rows.is_empty() {
        reports.insert("scorer".to_string(), aggregate(&scorer_rows)?);
    }
    let gate_rates = GateRates {
        per_horizon: gate_by_h
            .into_iter()
            .map(|(h, (pos, n))| (h, pos as f64 / n as f64, n))
            .collect(),
    };
    let mut pool_sweep = Vec::new();
    for ((k, h), (ms, same, any)) in pool_acc {
        let n = ms.len();
        let mid_r1 = ms.iter().map(|m| m.m_at_1).sum::<f64>() / n as f64;
        let mseq = ms.iter().map(|m| m.mseq).sum::<f64>() / n as f64;
        pool_sweep.push(PoolSweepRow {
            k,
            horizon: h,
            mid_r1,
            mseq,
            same_step_recall: same / n as f64,
            any_step_recall: any / n as f64,
            samples: n,
        });
    }
    Ok(PlanningEval {
        reports,
        gate_rates,
        pool_sweep,
    })
}

// ---- latent pipeline (CEM diagnostic) readout ----

/// Nearest-centroid readout in visual-latent space, fit on train segments.
#[derive(Clone, Debug)]
pub struct LatentReadout {
    pub text_ids: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl LatentReadout {
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for seg in corpus.segments() {
            let z = seg.latent();
            let e = sums.entry(seg.text_id).or_insert_with(|| (vec![0.0; z.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&z) {
                *a += b;
            }
            e.1 += 1;
        }
        if sums.is_empty() {
            return Err(Error::Invalid("empty corpus for readout".into()));
        }
        let mut text_ids = Vec::new();
        let mut centroids = Vec::new();
        for (t, (mut sum, n)) in sums {
            sum.iter_mut().for_each(|v| *v /= n as f64);
            text_ids.push(t);
            centroids.push(sum);
        }
        Ok(LatentReadout { text_ids, centroids })
    }

    /// Text ids ranked by centroid cosine, best first.
    pub fn rank(&self, z: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, cosine(z, c)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(i, _)| self.text_ids[i])
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct CemComparison {
    /// Reports for the three latent-pipeline modes.
    pub reports: BTreeMap<String, EvalReport>,
    /// (objective score, per-step accuracy) pairs collected from the CEM runs.
    pub score_accuracy_pairs: Vec<(f64, f64)>,
}

/// Evaluate the latent-space recipe: control-free predictor (`latent_notraj`),
/// trajectory-conditioned predictor with ground-truth controls
/// (`latent_oracle`), and the same predictor with CEM-searched controls
/// (`cem`). Control-space search is seeded from the bank's empirical
/// mean/std per horizon.
#[allow(clippy::too_many_arguments)]
pub fn eval_cem_comparison(
    samples: &[EvalSample],
    readout: &LatentReadout,
    latent_traj: &TrainedLatent,
    latent_notraj: &TrainedLatent,
    settings: &EvalSettings,
    control_stats: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    seed: u64,
) -> Result<CemComparison> {
    if samples.is_empty() {
        return Err(Error::Invalid("no eval samples".into()));
    }
    // cap per horizon, keeping corpus order
    let mut chosen: Vec<&EvalSample> = Vec::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        let c = counts.entry(s.ctx.horizon).or_default();
        if *c < settings.cem_max_samples {
            chosen.push(s);
            *c += 1;
        }
    }

    struct Row {
        horizon: usize,
        notraj: SampleMetrics,
        oracle: SampleMetrics,
        cem: SampleMetrics,
        pairs: Vec<(f64, f64)>,
    }

    let results: Vec<Result<Row>> = par::par_map(&chosen, |s| {
        let h = s.ctx.horizon;
        let win = s.window;
        // latent-pipeline inputs come from the eval corpus segments
        let z_start = &s.latent_start;
        let z_goal = &s.latent_goal;
        let gt_controls = &s.mid_control_flat;

        let score_plan = |mids: &[Vec<f64>]| -> Result<SampleMetrics> {
            let mut ranked = vec![readout.rank(z_start, 5)];
            for m in mids {
                ranked.push(readout.rank(m, 5));
            }
            ranked.push(readout.rank(z_goal, 5));
            let sp = SequencePrediction::new(ranked, s.truth_text_ids.clone(), h)?;
            Ok(sample_metrics(&sp))
        };

        let notraj_mids =
            latent_notraj
                .model
                .predict(&latent_notraj.store, z_start, z_goal, &[], h)?;
        let oracle_mids =
            latent_traj
                .model
                .predict(&latent_traj.store, z_start, z_goal, gt_controls, h)?;

        let (mean, std) = control_stats
            .get(&h)
            .ok_or_else(|| Error::MissingArtifact(format!("control stats for H={h}")))?;
        let objective = latent_l1_objective(latent_traj, z_start, z_goal, h);
        let cem_cfg = CemConfig {
            population: settings.cem_population,
            elite_fraction: settings.cem_elite_fraction,
            iterations: settings.cem_iterations,
            init_mean: mean.clone(),
            init_std: std.clone(),
            seed: crate::rng::derive_seed(
                seed,
                &format!("cem-{}-{}-{}", win.take_idx, win.start_seg, h),
            ),
        };
        let outcome = cem_search(&objective, &cem_cfg)?;
        let control_dim = latent_traj.model.control_dim;
        let best_controls: Vec<Vec<f64>> = (0..h - 2)
            .map(|i| outcome.best[i * control_dim..(i + 1) * control_dim].to_vec())
            .collect();
        let cem_mids =
            latent_traj
                .model
                .predict(&latent_traj.store, z_start, z_goal, &best_controls, h)?;

        // score-accuracy pairs: a few random control draws scored both ways
        let mut pair_rng = crate::rng::stream(
            seed,
            &format!("score-acc-{}-{}", win.take_idx, win.start_seg),
        );
        let mut pairs = Vec::new();
        let gt_texts: Vec<usize> = s.truth_text_ids[1..s.truth_text_ids.len() - 1].to_vec();
        for _ in 0..8 {
            use rand_distr::Distribution;
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let draw: Vec<f64> = (0..mean.len())
                .map(|c| mean[c] + std[c] * normal.sample(&mut pair_rng))
                .collect();
            let score = objective(&draw);
            let draw_controls: Vec<Vec<f64>> = (0..h - 2)
                .map(|i| draw[i * control_dim..(i + 1) * control_dim].to_vec())
                .collect();
            let mids =
                latent_traj
                    .model
                    .predict(&latent_traj.store, z_start, z_goal, &draw_controls, h)?;
            let acc = mids
                .iter()
                .zip(&gt_texts)
                .filter(|(m, gt)| readout.rank(m, 1).first() == Some(gt))
                .count() as f64
                / gt_texts.len() as f64;
            pairs.push((score, acc));
        }

        Ok(Row {
            horizon: h,
            notraj: score_plan(&notraj_mids)?,
            oracle: score_plan(&oracle_mids)?,
            cem: score_plan(&cem_mids)?,
            pairs,
        })
    });

    let mut notraj = Vec::new();
    let mut oracle = Vec::new();
    let mut cem_rows = Vec::new();
    let mut pairs = Vec::new();
    for r in results {
        let r = r?;
        notraj.push((r.horizon, r.notraj));
        oracle.push((r.horizon, r.oracle));
        cem_rows.push((r.horizon, r.cem));
        pairs.extend(r.pairs);
    }
    let mut reports = BTreeMap::new();
    reports.insert("latent_notraj".to_string(), aggregate(&notraj)?);
    reports.insert("latent_oracle".to_string(), aggregate(&oracle)?);
    reports.insert("cem".to_string(), aggregate(&cem_rows)?);
    Ok(CemComparison {
        reports,
        score_accuracy_pairs: pairs,
    })
}

/// Per-horizon empirical mean/std of flattened mid-control vectors over the
/// training bank (CEM's init distribution).
pub fn control_stats(train: &Corpus, horizons: &[usize]) -> Result<BTreeMap<usize, (Vec<f64>, Vec<f64>)>> {
    let mut out = BTreeMap::new();
    for &h in horizons {
        let windows = train.windows(h);
        if windows.is_empty() {
            continue;
        }
        let dim = (h - 2) * crate::geometry::CONTROL_KNOTS * crate::geometry::CONTROL_DIMS;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        let mut n = 0.0;
        for win in &windows {
            let segs = win.segs(train);
            let mut flat = Vec::with_capacity(dim);
            for s in &segs[1..segs.len() - 1] {
                flat.extend(
                    s.controls
                        .as_ref()
                        .ok_or_else(|| Error::MissingArtifact("controls".into()))?
                        .flat(),
                );
            }
            n += 1.0;
            for c in 0..dim {
                mean[c] += flat[c];
                m2[c] += flat[c] * flat[c];
            }
        }
        let std: Vec<f64> = (0..dim)
            .map(|c| {
                let m = mean[c] / n;
                ((m2[c] / n - m * m).max(1e-12)).sqrt()
            })
            .collect();
        mean.iter_mut().for_each(|v| *v /= n);
        out.insert(h, (mean, std));
    }
    Ok(out)
}

/// The world handle most eval entry points need.
pub fn world_eval_samples(world: &World, align: &AlignmentModel) -> Result<Vec<EvalSample>> {
    eval_samples(&world.test, align, &EVAL_HORIZONS)
}

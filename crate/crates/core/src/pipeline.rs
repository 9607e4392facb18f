//! Pipeline driver: one JSON config pins a whole experiment, stages run in
//! order (generate, preprocess, train-align, train-predictor, build-bank,
//! train-scorer, train-latent, eval, diagnose), every stage is idempotent
//! given identical inputs and seed, and re-running a completed stage is a
//! byte-wise no-op on its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{
    attach_alignment, train_alignment, AlignConfig, AlignReport, AlignSample, AlignmentModel,
};
use crate::cem::{train_latent, LatentConfig, LatentItem, TrainedLatent};
use crate::error::{Error, Result};
use crate::eval::{
    control_stats, eval_cem_comparison, eval_plan_modes, eval_samples, pool_sweep_csv,
    CemComparison, EvalSample, EvalSettings, LatentReadout, PlanningEval, EVAL_HORIZONS,
};
use crate::geometry::resample_controls;
use crate::math::checkpoint;
use crate::metrics::METRIC_NAMES;
use crate::pilot::{
    build_bank, build_candidate_set, candidate_utility, scorer_features, train_scorer,
    RetrievalMode, ScorerConfig, ScorerModel, ScorerReport, ScorerTrainItem, TrainedScorer,
    TrajectoryBank,
};
use crate::predictor::{
    PlanContext, PredictorConfig, PredictorModel, TrainItem, TrainedPredictor,
};
use crate::synthworld::{
    emit_controls_manifest, emit_manifest, generate_corpus, load_world, ActionBank, Corpus, World,
};
use crate::{cem, par};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the world seed follows it.
    pub seed: u64,
    pub world: crate::synthworld::WorldConfig,
    pub align: AlignConfig,
    pub predictor: PredictorConfig,
    /// Goal-dropout probability for the anticipation checkpoint.
    pub goal_dropout_variant: f64,
    pub scorer: ScorerConfig,
    /// Cap on training windows rolled out for the scorer.
    pub scorer_max_train_windows: usize,
    pub latent: LatentConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: Default::default(),
            align: Default::default(),
            predictor: Default::default(),
            goal_dropout_variant: 0.5,
            scorer: Default::default(),
            scorer_max_train_windows: 240,
            latent: Default::default(),
            eval: Default::default(),
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn world_config(&self) -> crate::synthworld::WorldConfig {
        let mut wc = self.world.clone();
        wc.seed = self.seed;
        wc
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Preprocess,
    TrainAlign,
    TrainPredictor,
    BuildBank,
    TrainScorer,
    TrainLatent,
    Eval,
    Diagnose,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Generate,
        Stage::Preprocess,
        Stage::TrainAlign,
        Stage::TrainPredictor,
        Stage::BuildBank,
        Stage::TrainScorer,
        Stage::TrainLatent,
        Stage::Eval,
        Stage::Diagnose,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Preprocess => "preprocess",
            Stage::TrainAlign => "train-align",
            Stage::TrainPredictor => "train-predictor",
            Stage::BuildBank => "build-bank",
            Stage::TrainScorer => "train-scorer",
            Stage::TrainLatent => "train-latent",
            Stage::Eval => "eval",
            Stage::Diagnose => "diagnose",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .find(|s| s.name() == name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown stage '{name}'")))
    }
}

pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: &Path) -> Self {
        OutputLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

// ---- corpus preparation ----

/// Compute relative-control tensors for every segment (the preprocess stage).
pub fn preprocess_world(world: &mut World) -> Result<()> {
    for corpus in [&mut world.train, &mut world.test] {
        let jobs: Vec<(usize, usize)> = corpus
            .takes
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.segments.len()).map(move |si| (ti, si)))
            .collect();
        let computed: Vec<Result<crate::geometry::ControlTensor>> = par::par_map(&jobs, |(ti, si)| {
            let seg = &corpus.takes[*ti].segments[*si];
            resample_controls(&seg.poses, seg.interval)
        });
        for ((ti, si), c) in jobs.into_iter().zip(computed) {
            corpus.takes[ti].segments[si].controls = Some(c?);
        }
    }
    Ok(())
}

pub fn align_samples_from(corpus: &Corpus, bank: &ActionBank) -> Result<Vec<AlignSample>> {
    corpus
        .segments()
        .map(|s| {
            Ok(AlignSample {
                control: s
                    .controls
                    .clone()
                    .ok_or_else(|| Error::MissingArtifact("controls (run preprocess)".into()))?,
                bank_label: s.bank_label,
                text_id: s.text_id,
                target_embedding: bank.embedding(s.bank_label).to_vec(),
            })
        })
        .collect()
}

/// Predictor training items for every window at every horizon, reusing
/// per-segment trajectory latents.
pub fn train_items_from(
    corpus: &Corpus,
    bank: &ActionBank,
    align: &AlignmentModel,
) -> Result<Vec<TrainItem>> {
    let latents = crate::eval::encode_segment_latents(corpus, align)?;
    let mut items = Vec::new();
    for &h in &EVAL_HORIZONS {
        for win in corpus.windows(h) {
            let segs = win.segs(corpus);
            let n = segs.len();
            let z = |i: usize| latents[win.take_idx][win.start_seg + i].clone();
            let ctx = PlanContext {
                start_tokens: segs[0].visual_tokens.clone(),
                goal_tokens: segs[n - 1].visual_tokens.clone(),
                horizon: h,
                start_traj: z(0),
                goal_traj: z(n - 1),
                mid_traj: (1..n - 1).map(z).collect(),
            };
            let mut rows = vec![bank.embedding(segs[0].bank_label).to_vec()];
            let mut text_ids = vec![segs[0].text_id];
            for s in &segs[1..n - 1] {
                rows.push(bank.embedding(s.bank_label).to_vec());
                text_ids.push(s.text_id);
            }
            rows.push(bank.embedding(segs[n - 1].bank_label).to_vec());
            text_ids.push(segs[n - 1].text_id);
            items.push(TrainItem {
                ctx,
                targets: crate::math::tensor::Tensor::from_rows(&rows),
                text_ids,
            });
        }
    }
    Ok(items)
}

pub fn latent_items_from(corpus: &Corpus) -> Result<Vec<LatentItem>> {
    let mut items = Vec::new();
    for &h in &EVAL_HORIZONS {
        for win in corpus.windows(h) {
            items.push(LatentItem::from_window(corpus, &win)?);
        }
    }
    Ok(items)
}

/// Roll K candidates for a deterministic subset of training windows and
/// attach their utilities (the expensive, cacheable part of scorer training).
pub fn scorer_items_from(
    world: &World,
    align: &AlignmentModel,
    predictor: &TrainedPredictor,
    traj_bank: &TrajectoryBank,
    k: usize,
    max_windows: usize,
) -> Result<Vec<ScorerTrainItem>> {
    let samples = eval_samples(&world.train, align, &EVAL_HORIZONS)?;
    let stride_pick: Vec<&EvalSample> = if samples.len() > max_windows {
        (0..max_windows)
            .map(|i| &samples[i * samples.len() / max_windows])
            .collect()
    } else {
        samples.iter().collect()
    };
    let items: Vec<Result<ScorerTrainItem>> = par::par_map(&stride_pick, |s| {
        let set = build_candidate_set(
            predictor,
            traj_bank,
            &s.ctx,
            k,
            RetrievalMode::Planning,
            false,
            Some(s.window),
        )?;
        let utilities: Vec<f64> = set
            .candidates
            .iter()
            .map(|c| candidate_utility(&c.plan.mids, &s.gt_mid_labels, &world.bank).u)
            .collect();
        let fallback_utility =
            candidate_utility(&set.fallback.mids, &s.gt_mid_labels, &world.bank).u;
        Ok(ScorerTrainItem {
            feats: scorer_features(&set, traj_bank, &world.bank),
            utilities,
            fallback_utility,
        })
    });
    items.into_iter().collect()
}

// ---- in-memory artifact construction (used by tests and the file stages) ----

pub struct Artifacts {
    pub config: RunConfig,
    pub world: World,
    pub align: AlignmentModel,
    pub align_report: AlignReport,
    pub predictor: TrainedPredictor,
    pub predictor_goaldrop: TrainedPredictor,
    pub bank: TrajectoryBank,
    pub scorer: TrainedScorer,
    pub scorer_report: ScorerReport,
    pub latent_traj: TrainedLatent,
    pub latent_notraj: TrainedLatent,
}

pub fn build_artifacts(cfg: &RunConfig) -> Result<Artifacts> {
    let mut world = generate_corpus(&cfg.world_config())?;
    preprocess_world(&mut world)?;

    let train_samples = align_samples_from(&world.train, &world.bank)?;
    let holdout = align_samples_from(&world.test, &world.bank)?;
    let (align, align_report) =
        train_alignment(&train_samples, &holdout, &world.bank, &cfg.align, cfg.seed)?;

    let items = train_items_from(&world.train, &world.bank, &align)?;
    let d = world.bank.embeddings.shape[1];
    let d_v = world.config.d_v;
    let (predictor, _) = crate::predictor::train_predictor(&items, &cfg.predictor, d, d_v, cfg.seed)?;
    let goaldrop_cfg = PredictorConfig {
        goal_dropout: cfg.goal_dropout_variant,
        ..cfg.predictor.clone()
    };
    let (predictor_goaldrop, _) =
        crate::predictor::train_predictor(&items, &goaldrop_cfg, d, d_v, cfg.seed)?;

    let bank = build_bank(&world.train, &world.bank, &align, &EVAL_HORIZONS)?;
    let scorer_items = scorer_items_from(
        &world,
        &align,
        &predictor,
        &bank,
        cfg.scorer.k,
        cfg.scorer_max_train_windows,
    )?;
    let (scorer, scorer_report) = train_scorer(&scorer_items, &cfg.scorer, cfg.seed)?;

    let latent_items = latent_items_from(&world.train)?;
    let control_dim = crate::geometry::CONTROL_KNOTS * crate::geometry::CONTROL_DIMS;
    let latent_traj = train_latent(&latent_items, &cfg.latent, d_v, control_dim, cfg.seed)?;
    let notraj_cfg = LatentConfig {
        use_controls: false,
        ..cfg.latent.clone()
    };
    let latent_notraj = train_latent(&latent_items, &notraj_cfg, d_v, control_dim, cfg.seed)?;

    Ok(Artifacts {
        config: cfg.clone(),
        world,
        align,
        align_report,
        predictor,
        predictor_goaldrop,
        bank,
        scorer,
        scorer_report,
        latent_traj,
        latent_notraj,
    })
}

// ---- file-based stages ----

fn all_exist(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.exists())
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (produced by stage '{produced_by}')",
            path.display()
        )));
    }
    Ok(())
}

fn write_if_changed(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn load_world_checked(cfg: &RunConfig, layout: &OutputLayout, stage: &str) -> Result<World> {
    require(&layout.world_dir().join("manifest_train.jsonl"), "generate")?;
    let world = load_world(&cfg.world_config(), &layout.world_dir())?;
    if stage != "preprocess" {
        let has_controls = world
            .train
            .segments()
            .next()
            .map(|s| s.controls.is_some())
            .unwrap_or(false);
        if !has_controls {
            return Err(Error::MissingArtifact(
                "control manifests (produced by stage 'preprocess')".into(),
            ));
        }
    }
    Ok(world)
}

fn load_align(cfg: &RunConfig, layout: &OutputLayout, d: usize) -> Result<AlignmentModel> {
    require(&layout.ckpt("align.ckpt"), "train-align")?;
    let store = checkpoint::load(&layout.ckpt("align.ckpt"))?;
    attach_alignment(store, &cfg.align, d)
}

fn load_predictor(
    cfg: &PredictorConfig,
    path: &Path,
    d: usize,
    d_v: usize,
) -> Result<TrainedPredictor> {
    let store = checkpoint::load(path)?;
    let model = PredictorModel::attach(&store, cfg, d, d_v)?;
    Ok(TrainedPredictor { store, model })
}

fn save_bank(bank: &TrajectoryBank, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string(&bank.entries)?)?;
    Ok(())
}

fn load_bank(path: &Path) -> Result<TrajectoryBank> {
    require(path, "build-bank")?;
    let entries: Vec<crate::pilot::BankEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(TrajectoryBank::from_entries(entries))
}

fn load_latent(cfg: &LatentConfig, path: &Path, d_v: usize) -> Result<TrainedLatent> {
    let store = checkpoint::load(path)?;
    let control_dim = crate::geometry::CONTROL_KNOTS * crate::geometry::CONTROL_DIMS;
    let model = crate::cem::LatentPredictor::attach(&store, cfg, d_v, control_dim)?;
    Ok(TrainedLatent { store, model })
}

/// Run the requested stages against `out_dir`, skipping any whose outputs
/// already exist. Returns one log line per stage.
pub fn run_pipeline(
    cfg: &RunConfig,
    stages: &[Stage],
    out_dir: &Path,
    emit_tables: bool,
) -> Result<Vec<String>> {
    let layout = OutputLayout::new(out_dir);
    let mut log = Vec::new();
    let d = cfg.world.d;
    let d_v = cfg.world.d_v;
    for stage in stages {
        let ran = match stage {
            Stage::Generate => {
                let outs = [
                    layout.world_dir().join("manifest_train.jsonl"),
                    layout.world_dir().join("manifest_test.jsonl"),
                    layout.world_dir().join("bank.json"),
                ];
                if all_exist(&outs) {
                    false
                } else {
                    let world = generate_corpus(&cfg.world_config())?;
                    emit_manifest(&world, &layout.world_dir())?;
                    true
                }
            }
            Stage::Preprocess => {
                let outs = [
                    layout.world_dir().join("manifest_train_controls.jsonl"),
                    layout.world_dir().join("manifest_test_controls.jsonl"),
                ];
                if all_exist(&outs) {
                    false
                } else {
                    let mut world = load_world_checked(cfg, &layout, "preprocess")?;
                    preprocess_world(&mut world)?;
                    emit_controls_manifest(&world, &layout.world_dir())?;
                    true
                }
            }
            Stage::TrainAlign => {
                if layout.ckpt("align.ckpt").exists() {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "train-align")?;
                    let train = align_samples_from(&world.train, &world.bank)?;
                    let holdout = align_samples_from(&world.test, &world.bank)?;
                    let (model, report) =
                        train_alignment(&train, &holdout, &world.bank, &cfg.align, cfg.seed)?;
                    checkpoint::save(&model.store, &layout.ckpt("align.ckpt"))?;
                    log.push(format!(
                        "train-align: {} epochs, holdout R@1 {:.3}",
                        report.epochs_run, report.final_holdout_r1
                    ));
                    true
                }
            }
            Stage::TrainPredictor => {
                let outs = [
                    layout.ckpt("predictor.ckpt"),
                    layout.ckpt("predictor_goaldrop.ckpt"),
                ];
                if all_exist(&outs) {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "train-predictor")?;
                    let align = load_align(cfg, &layout, d)?;
                    let items = train_items_from(&world.train, &world.bank, &align)?;
                    let (pred, _) = crate::predictor::train_predictor(
                        &items,
                        &cfg.predictor,
                        d,
                        d_v,
                        cfg.seed,
                    )?;
                    checkpoint::save(&pred.store, &layout.ckpt("predictor.ckpt"))?;
                    let gd_cfg = PredictorConfig {
                        goal_dropout: cfg.goal_dropout_variant,
                        ..cfg.predictor.clone()
                    };
                    let (pred_gd, _) =
                        crate::predictor::train_predictor(&items, &gd_cfg, d, d_v, cfg.seed)?;
                    checkpoint::save(&pred_gd.store, &layout.ckpt("predictor_goaldrop.ckpt"))?;
                    true
                }
            }
            Stage::BuildBank => {
                if layout.ckpt("traj_bank.json").exists() {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "build-bank")?;
                    let align = load_align(cfg, &layout, d)?;
                    let bank = build_bank(&world.train, &world.bank, &align, &EVAL_HORIZONS)?;
                    save_bank(&bank, &layout.ckpt("traj_bank.json"))?;
                    true
                }
            }
            Stage::TrainScorer => {
                if layout.ckpt("scorer.ckpt").exists() {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "train-scorer")?;
                    let align = load_align(cfg, &layout, d)?;
                    let predictor =
                        load_predictor(&cfg.predictor, &layout.ckpt("predictor.ckpt"), d, d_v)?;
                    let bank = load_bank(&layout.ckpt("traj_bank.json"))?;
                    let items = scorer_items_from(
                        &world,
                        &align,
                        &predictor,
                        &bank,
                        cfg.scorer.k,
                        cfg.scorer_max_train_windows,
                    )?;
                    let (scorer, report) = train_scorer(&items, &cfg.scorer, cfg.seed)?;
                    checkpoint::save(&scorer.store, &layout.ckpt("scorer.ckpt"))?;
                    log.push(format!(
                        "train-scorer: gate-positive fraction {:.3}",
                        report.gate_positive_fraction
                    ));
                    true
                }
            }
            Stage::TrainLatent => {
                let outs = [
                    layout.ckpt("latent_traj.ckpt"),
                    layout.ckpt("latent_notraj.ckpt"),
                ];
                if all_exist(&outs) {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "train-latent")?;
                    let items = latent_items_from(&world.train)?;
                    let control_dim =
                        crate::geometry::CONTROL_KNOTS * crate::geometry::CONTROL_DIMS;
                    let lt = train_latent(&items, &cfg.latent, d_v, control_dim, cfg.seed)?;
                    checkpoint::save(&lt.store, &layout.ckpt("latent_traj.ckpt"))?;
                    let nt_cfg = LatentConfig {
                        use_controls: false,
                        ..cfg.latent.clone()
                    };
                    let nt = train_latent(&items, &nt_cfg, d_v, control_dim, cfg.seed)?;
                    checkpoint::save(&nt.store, &layout.ckpt("latent_notraj.ckpt"))?;
                    true
                }
            }
            Stage::Eval => {
                if layout.report("report_overall.csv").exists() {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "eval")?;
                    let align = load_align(cfg, &layout, d)?;
                    let predictor =
                        load_predictor(&cfg.predictor, &layout.ckpt("predictor.ckpt"), d, d_v)?;
                    let gd_cfg = PredictorConfig {
                        goal_dropout: cfg.goal_dropout_variant,
                        ..cfg.predictor.clone()
                    };
                    let predictor_gd = load_predictor(
                        &gd_cfg,
                        &layout.ckpt("predictor_goaldrop.ckpt"),
                        d,
                        d_v,
                    )?;
                    let bank = load_bank(&layout.ckpt("traj_bank.json"))?;
                    let scorer_store = checkpoint::load(&layout.ckpt("scorer.ckpt"))?;
                    let scorer = TrainedScorer {
                        model: ScorerModel::attach(&scorer_store, &cfg.scorer)?,
                        store: scorer_store,
                    };
                    let latent_traj =
                        load_latent(&cfg.latent, &layout.ckpt("latent_traj.ckpt"), d_v)?;
                    let nt_cfg = LatentConfig {
                        use_controls: false,
                        ..cfg.latent.clone()
                    };
                    let latent_notraj =
                        load_latent(&nt_cfg, &layout.ckpt("latent_notraj.ckpt"), d_v)?;
                    run_eval_stage(
                        cfg,
                        &layout,
                        &world,
                        &align,
                        &predictor,
                        &predictor_gd,
                        &bank,
                        &scorer,
                        &latent_traj,
                        &latent_notraj,
                        emit_tables,
                        &mut log,
                    )?;
                    true
                }
            }
            Stage::Diagnose => {
                if layout.report("diagnostics_geometry.csv").exists() {
                    false
                } else {
                    let world = load_world_checked(cfg, &layout, "diagnose")?;
                    let align = load_align(cfg, &layout, d)?;
                    let predictor =
                        load_predictor(&cfg.predictor, &layout.ckpt("predictor.ckpt"), d, d_v)?;
                    let gd_cfg = PredictorConfig {
                        goal_dropout: cfg.goal_dropout_variant,
                        ..cfg.predictor.clone()
                    };
                    let predictor_gd = load_predictor(
                        &gd_cfg,
                        &layout.ckpt("predictor_goaldrop.ckpt"),
                        d,
                        d_v,
                    )?;
                    run_diagnose_stage(cfg, &layout, &world, &align, &predictor, &predictor_gd)?;
                    true
                }
            }
        };
        log.push(format!(
            "{}: {}",
            stage.name(),
            if ran { "done" } else { "skipped (outputs exist)" }
        ));
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn run_eval_stage(
    cfg: &RunConfig,
    layout: &OutputLayout,
    world: &World,
    align: &AlignmentModel,
    predictor: &TrainedPredictor,
    predictor_gd: &TrainedPredictor,
    bank: &TrajectoryBank,
    scorer: &TrainedScorer,
    latent_traj: &TrainedLatent,
    latent_notraj: &TrainedLatent,
    emit_tables: bool,
    log: &mut Vec<String>,
) -> Result<()> {
    let samples = eval_samples(&world.test, align, &EVAL_HORIZONS)?;
    let planning = eval_plan_modes(
        &samples,
        &world.bank,
        predictor,
        Some((scorer, bank)),
        &cfg.eval,
        false,
    )?;
    let anticipation = eval_plan_modes(
        &samples,
        &world.bank,
        predictor_gd,
        Some((scorer, bank)),
        &cfg.eval,
        true,
    )?;
    let readout = LatentReadout::fit(&world.train)?;
    let stats = control_stats(&world.train, &EVAL_HORIZONS)?;
    let cem = eval_cem_comparison(
        &samples,
        &readout,
        latent_traj,
        latent_notraj,
        &cfg.eval,
        &stats,
        cfg.seed,
    )?;
    write_eval_outputs(layout, &planning, &anticipation, &cem, emit_tables, log)
}

pub fn write_eval_outputs(
    layout: &OutputLayout,
    planning: &PlanningEval,
    anticipation: &PlanningEval,
    cem: &CemComparison,
    emit_tables: bool,
    log: &mut Vec<String>,
) -> Result<()> {
    let mut overall = String::from("method,horizon,samples,metric,value\n");
    let mut tables = String::new();
    let mut emit_mode = |mode: &str, report: &crate::metrics::EvalReport| -> Result<()> {
        for (h, n, m) in &report.per_horizon {
            let mut csv = String::from("metric,value\n");
            for (name, v) in METRIC_NAMES.iter().zip(m.as_array()) {
                csv.push_str(&format!("{name},{v:.6}\n"));
            }
            let _ = n;
            write_if_changed(&layout.report(&format!("report_{mode}_{h}.csv")), &csv)?;
        }
        for line in report.to_csv(mode).lines().skip(1) {
            overall.push_str(line);
            overall.push('\n');
        }
        tables.push_str(&report.to_table(mode));
        tables.push('\n');
        Ok(())
    };
    for (mode, report) in &planning.reports {
        emit_mode(mode, report)?;
    }
    for (mode, report) in &anticipation.reports {
        emit_mode(&format!("{mode}_goalmasked"), report)?;
    }
    emit_mode("cem", &cem.reports["cem"])?;

    write_if_changed(&layout.report("gate_rates.csv"), &planning.gate_rates.to_csv())?;
    write_if_changed(
        &layout.report("pool_oracle.csv"),
        &pool_sweep_csv(&planning.pool_sweep),
    )?;

    // latent-pipeline comparison rows
    let mut cem_csv = String::from("horizon,latent_notraj_mid_r1,latent_oracle_mid_r1,cem_mid_r1\n");
    let by_h = |name: &str, h: usize| -> f64 {
        cem.reports[name]
            .mean(h)
            .map(|m| m.m_at_1)
            .unwrap_or(f64::NAN)
    };
    let horizons: Vec<usize> = cem.reports["cem"].per_horizon.iter().map(|(h, _, _)| *h).collect();
    for h in horizons {
        cem_csv.push_str(&format!(
            "{h},{:.6},{:.6},{:.6}\n",
            by_h("latent_notraj", h),
            by_h("latent_oracle", h),
            by_h("cem", h)
        ));
    }
    write_if_changed(&layout.report("cem_comparison.csv"), &cem_csv)?;

    let (scores, accs): (Vec<f64>, Vec<f64>) = cem.score_accuracy_pairs.iter().copied().unzip();
    let corr_csv = match cem::score_accuracy_correlation(&scores, &accs) {
        Ok(c) => format!(
            "pearson_r,n,ci95_low,ci95_high\n{:.6},{},{:.6},{:.6}\n",
            c.r, c.n, c.ci95_low, c.ci95_high
        ),
        Err(_) => "pearson_r,n,ci95_low,ci95_high\nnan,0,nan,nan\n".to_string(),
    };
    write_if_changed(&layout.report("score_accuracy.csv"), &corr_csv)?;

    write_if_changed(&layout.report("report_overall.csv"), &overall)?;
    if emit_tables {
        write_if_changed(&layout.report("tables.txt"), &tables)?;
        log.push(tables);
    }
    Ok(())
}

fn run_diagnose_stage(
    cfg: &RunConfig,
    layout: &OutputLayout,
    world: &World,
    align: &AlignmentModel,
    predictor: &TrainedPredictor,
    predictor_gd: &TrainedPredictor,
) -> Result<()> {
    // latent-geometry probe
    let rows = cem::pair_geometry_probe(&world.train, cfg.seed)?;
    let mut geo = String::from("pair_type,mean_l1,mean_cosine,pairs\n");
    for r in &rows {
        geo.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.pair_type.name(),
            r.mean_l1,
            r.mean_cosine,
            r.pairs
        ));
    }
    write_if_changed(&layout.report("diagnostics_geometry.csv"), &geo)?;

    // goal-progress monotonicity by horizon
    let mut mono = String::from("horizon,monotone_fraction,sequences\n");
    for &h in &EVAL_HORIZONS {
        let seqs = cem::latent_sequences(&world.train, h);
        mono.push_str(&format!(
            "{h},{:.6},{}\n",
            cem::monotonicity_fraction(&seqs),
            seqs.len()
        ));
    }
    write_if_changed(&layout.report("diagnostics_monotonicity.csv"), &mono)?;

    // goal-dropout effect: both checkpoints, goal present and masked
    let samples = eval_samples(&world.test, align, &EVAL_HORIZONS)?;
    let mut gd = String::from("checkpoint,goal,horizon,mid_r1_zeroed_traj,mid_r1_oracle_traj\n");
    for (name, pred) in [("p_goal_0", predictor), ("p_goal_50", predictor_gd)] {
        for (goal_name, masked) in [("present", false), ("masked", true)] {
            let ev = eval_plan_modes(&samples, &world.bank, pred, None, &cfg.eval, masked)?;
            for &h in &EVAL_HORIZONS {
                let nt = ev.reports["notraj"].mean(h).map(|m| m.m_at_1).unwrap_or(f64::NAN);
                let or = ev.reports["oracle"].mean(h).map(|m| m.m_at_1).unwrap_or(f64::NAN);
                gd.push_str(&format!("{name},{goal_name},{h},{nt:.6},{or:.6}\n"));
            }
        }
    }
    write_if_changed(&layout.report("goal_dropout_effect.csv"), &gd)?;
    Ok(())
}

/// Save every artifact of an in-memory build to the standard layout (used
/// by tests that then drive the file-based stages).
pub fn save_artifacts(artifacts: &Artifacts, out_dir: &Path) -> Result<()> {
    let layout = OutputLayout::new(out_dir);
    emit_manifest(&artifacts.world, &layout.world_dir())?;
    emit_controls_manifest(&artifacts.world, &layout.world_dir())?;
    checkpoint::save(&artifacts.align.store, &layout.ckpt("align.ckpt"))?;
    checkpoint::save(&artifacts.predictor.store, &layout.ckpt("predictor.ckpt"))?;
    checkpoint::save(
        &artifacts.predictor_goaldrop.store,
        &layout.ckpt("predictor_goaldrop.ckpt"),
    )?;
    save_bank(&artifacts.bank, &layout.ckpt("traj_bank.json"))?;
    checkpoint::save(&artifacts.scorer.store, &layout.ckpt("scorer.ckpt"))?;
    checkpoint::save(&artifacts.latent_traj.store, &layout.ckpt("latent_traj.ckpt"))?;
    checkpoint::save(
        &artifacts.latent_notraj.store,
        &layout.ckpt("latent_notraj.ckpt"),
    )?;
    Ok(())
}

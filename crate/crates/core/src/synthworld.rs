//! Seeded synthetic egocentric world.
//!
//! Each scenario defines a Markov chain over actions, so plans are partially
//! predictable from their endpoints. Each action has an archetype 6-DoF
//! motion curve (sums of sinusoidal primitives with per-segment phase
//! jitter); with probability `traj_informativeness` a segment's pose stream
//! follows its own action's archetype, otherwise a random one. Visual tokens
//! are `scene + within-take drift + action + noise`, with scene variance
//! dominating action variance so that raw latent distance tracks recording
//! identity more than action identity.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{poses_from_jsonl, poses_to_jsonl, ControlTensor, Pose, Quat};
use crate::math::tensor::Tensor;
use crate::rng;

pub const SEGMENT_DURATION: f64 = 2.0;
pub const POSES_PER_SEGMENT: usize = 41;
/// Every take with `id % TEST_TAKE_STRIDE == TEST_TAKE_STRIDE-1` is held out.
pub const TEST_TAKE_STRIDE: usize = 4;
/// Within-take scene drift variance, as a fraction of scene variance.
const DRIFT_FRACTION: f64 = 1.0 / 8.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub n_scenarios: usize,
    pub n_actions: usize,
    pub n_paraphrases_per_action: usize,
    pub n_takes: usize,
    pub segments_per_take: usize,
    pub d_v: usize,
    pub n_tok: usize,
    pub d: usize,
    pub scene_variance: f64,
    pub action_variance: f64,
    pub visual_noise: f64,
    pub traj_noise: f64,
    pub traj_informativeness: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_scenarios: 4,
            n_actions: 32,
            n_paraphrases_per_action: 2,
            n_takes: 24,
            segments_per_take: 10,
            d_v: 64,
            n_tok: 16,
            d: 32,
            scene_variance: 4.0,
            action_variance: 1.0,
            visual_noise: 0.25,
            traj_noise: 0.02,
            traj_informativeness: 0.9,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_actions == 0 || self.n_scenarios == 0 || self.n_takes == 0 {
            return Err(Error::Invalid("world needs actions, scenarios, takes".into()));
        }
        if self.n_paraphrases_per_action == 0 || self.segments_per_take == 0 {
            return Err(Error::Invalid("paraphrases and segments must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.traj_informativeness) {
            return Err(Error::Invalid(format!(
                "traj_informativeness {} outside [0,1]",
                self.traj_informativeness
            )));
        }
        if self.scene_variance < 0.0 || self.action_variance < 0.0 || self.visual_noise < 0.0 {
            return Err(Error::Invalid("variances must be >= 0".into()));
        }
        Ok(())
    }
}

/// Open-vocabulary label list with unit-norm embeddings; paraphrases of one
/// action share a text id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionBank {
    pub labels: Vec<String>,
    pub embeddings: Tensor,
    pub text_ids: Vec<usize>,
}

impl ActionBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embedding(&self, label: usize) -> &[f64] {
        self.embeddings.row(label)
    }

    pub fn text_id(&self, label: usize) -> usize {
        self.text_ids[label]
    }

    pub fn n_text_ids(&self) -> usize {
        self.text_ids.iter().copied().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub take_id: usize,
    pub scenario: usize,
    pub segment_index: usize,
    /// Bank label (paraphrase-specific).
    pub bank_label: usize,
    /// Action / text id (paraphrases collapse onto this).
    pub text_id: usize,
    /// Action id the pose stream's archetype actually encodes.
    pub traj_text_id: usize,
    pub interval: (f64, f64),
    pub poses: Vec<Pose>,
    pub visual_tokens: Tensor,
    /// Token content before noise; `None` once a corpus is reloaded from disk.
    pub token_base: Option<Tensor>,
    /// Filled by the preprocess stage.
    pub controls: Option<ControlTensor>,
}

impl Segment {
    /// Mean visual token; the segment's latent for the diagnostics.
    pub fn latent(&self) -> Vec<f64> {
        let (m, n) = (self.visual_tokens.shape[0], self.visual_tokens.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.visual_tokens.data[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Take {
    pub id: usize,
    pub scenario: usize,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub takes: Vec<Take>,
}

impl Corpus {
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.takes.iter().flat_map(|t| t.segments.iter())
    }

    pub fn n_segments(&self) -> usize {
        self.takes.iter().map(|t| t.segments.len()).sum()
    }

    /// Consecutive-segment plan windows of the given horizon.
    pub fn windows(&self, horizon: usize) -> Vec<PlanWindow> {
        let mut out = Vec::new();
        for (ti, take) in self.takes.iter().enumerate() {
            if take.segments.len() >= horizon {
                for s in 0..=take.segments.len() - horizon {
                    out.push(PlanWindow {
                        take_idx: ti,
                        start_seg: s,
                        horizon,
                    });
                }
            }
        }
        out
    }
}

/// One planning instance: `horizon` consecutive segments of a take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanWindow {
    pub take_idx: usize,
    pub start_seg: usize,
    pub horizon: usize,
}

impl PlanWindow {
    pub fn mids(&self) -> usize {
        self.horizon - 2
    }

    pub fn segs<'a>(&self, corpus: &'a Corpus) -> &'a [Segment] {
        &corpus.takes[self.take_idx].segments[self.start_seg..self.start_seg + self.horizon]
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub bank: ActionBank,
    pub scenarios: Vec<Scenario>,
    pub train: Corpus,
    pub test: Corpus,
}

/// Markov chain over this scenario's action subset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub actions: Vec<usize>,
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
}

// ---- generation ----

const VERBS: [&str; 16] = [
    "grab", "cut", "stir", "pour", "wipe", "open", "close", "place", "lift", "turn", "press",
    "shake", "fold", "scoop", "rinse", "tighten",
];
const NOUNS: [&str; 16] = [
    "bowl", "knife", "pan", "lid", "cloth", "drawer", "valve", "board", "cup", "wrench", "jar",
    "whisk", "towel", "ladle", "sieve", "bolt",
];
const PARAPHRASE_SUFFIXES: [&str; 4] = ["", " slowly", " with care", " again"];

fn make_bank(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> ActionBank {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n_labels = cfg.n_actions * cfg.n_paraphrases_per_action;
    let mut labels = Vec::with_capacity(n_labels);
    let mut text_ids = Vec::with_capacity(n_labels);
    let mut rows = Vec::with_capacity(n_labels);
    for action in 0..cfg.n_actions {
        let verb = VERBS[action % VERBS.len()];
        let noun = NOUNS[(action / VERBS.len() + action) % NOUNS.len()];
        let base: Vec<f64> = (0..cfg.d).map(|_| normal.sample(rng)).collect();
        let base = crate::math::tensor::l2_normalized(&base);
        for p in 0..cfg.n_paraphrases_per_action {
            labels.push(format!(
                "{verb} the {noun}{}",
                PARAPHRASE_SUFFIXES[p % PARAPHRASE_SUFFIXES.len()]
            ));
            text_ids.push(action);
            let row: Vec<f64> = base
                .iter()
                .map(|v| v + 0.15 * normal.sample(rng))
                .collect();
            rows.push(crate::math::tensor::l2_normalized(&row));
        }
    }
    let mut data = Vec::with_capacity(n_labels * cfg.d);
    for r in &rows {
        data.extend_from_slice(r);
    }
    ActionBank {
        labels,
        embeddings: Tensor::new(vec![n_labels, cfg.d], data).unwrap(),
        text_ids,
    }
}

fn make_scenarios(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Scenario> {
    let per_scenario = cfg.n_actions.min(12).max(2);
    (0..cfg.n_scenarios)
        .map(|_| {
            let mut pool: Vec<usize> = (0..cfg.n_actions).collect();
            let mut actions = Vec::with_capacity(per_scenario);
            for _ in 0..per_scenario {
                let i = rng.gen_range(0..pool.len());
                actions.push(pool.swap_remove(i));
            }
            actions.sort_unstable();
            let k = actions.len();
            let mut trans = vec![vec![0.0; k]; k];
            for (i, row) in trans.iter_mut().enumerate() {
                // two successors, 0.7/0.3
                let mut s1 = rng.gen_range(0..k - 1);
                if s1 >= i {
                    s1 += 1;
                }
                let mut s2 = rng.gen_range(0..k - 1);
                if s2 >= i {
                    s2 += 1;
                }
                if s2 == s1 {
                    s2 = (s1 + 1) % k;
                    if s2 == i {
                        s2 = (s2 + 1) % k;
                    }
                }
                row[s1] += 0.7;
                row[s2] += 0.3;
            }
            Scenario {
                actions,
                init: vec![1.0 / k as f64; k],
                trans,
            }
        })
        .collect()
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Archetype motion curve for one action: 2 sinusoidal primitives per
/// translation axis plus smaller ones per rotation axis.
#[derive(Clone, Debug)]
struct Archetype {
    amp: [[f64; 2]; 6],
    freq: [[f64; 2]; 6],
    phase: [[f64; 2]; 6],
}

impl Archetype {
    fn for_action(seed: u64, action: usize) -> Self {
        let mut r = rng::stream(seed, &format!("archetype-{action}"));
        let mut amp = [[0.0; 2]; 6];
        let mut freq = [[0.0; 2]; 6];
        let mut phase = [[0.0; 2]; 6];
        for c in 0..6 {
            let scale = if c < 3 { 1.0 } else { 0.5 };
            for p in 0..2 {
                amp[c][p] = scale * r.gen_range(0.10..0.45);
                freq[c][p] = r.gen_range(0.5..2.5);
                phase[c][p] = r.gen_range(0.0..TAU);
            }
        }
        Archetype { amp, freq, phase }
    }

    /// Channel value at normalized time `u` with a per-segment phase shift.
    fn value(&self, c: usize, u: f64, jitter: f64) -> f64 {
        (0..2)
            .map(|p| self.amp[c][p] * (TAU * self.freq[c][p] * u + self.phase[c][p] + jitter).sin())
            .sum()
    }
}

fn segment_poses(
    arch: &Archetype,
    interval: (f64, f64),
    traj_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    let jitter = rng.gen_range(-0.4..0.4);
    let normal = Normal::new(0.0, traj_noise.max(0.0)).unwrap();
    let (t0, t1) = interval;
    (0..POSES_PER_SEGMENT)
        .map(|i| {
            let u = i as f64 / (POSES_PER_SEGMENT - 1) as f64;
            let mut tr = [0.0; 3];
            let mut rv = [0.0; 3];
            for c in 0..3 {
                tr[c] = arch.value(c, u, jitter) + normal.sample(rng);
                rv[c] = arch.value(c + 3, u, jitter);
            }
            Pose {
                t: t0 + u * (t1 - t0),
                translation: tr,
                rotation: crate::geometry::rotation_from_rotvec(rv),
            }
        })
        .collect()
}

fn token_noise(cfg: &WorldConfig, take: usize, seg: usize, salt: &str) -> Tensor {
    let mut r = rng::stream(cfg.seed, &format!("visual-noise{salt}-{take}-{seg}"));
    let normal = Normal::new(0.0, cfg.visual_noise.sqrt()).unwrap();
    let n = cfg.n_tok * cfg.d_v;
    Tensor::new(
        vec![cfg.n_tok, cfg.d_v],
        (0..n).map(|_| normal.sample(&mut r)).collect(),
    )
    .unwrap()
}

/// Build the seeded world: bank, scenario chains, takes, pose streams,
/// visual tokens, take-disjoint splits. Byte-deterministic per config.
pub fn generate_corpus(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let bank = make_bank(cfg, &mut rng::stream(cfg.seed, "bank"));
    let scenarios = make_scenarios(cfg, &mut rng::stream(cfg.seed, "scenarios"));
    let archetypes: Vec<Archetype> = (0..cfg.n_actions)
        .map(|a| Archetype::for_action(cfg.seed, a))
        .collect();
    let action_dirs: Vec<Vec<f64>> = {
        let mut r = rng::stream(cfg.seed, "action-latents");
        let normal = Normal::new(0.0, cfg.action_variance.sqrt()).unwrap();
        (0..cfg.n_actions)
            .map(|_| (0..cfg.d_v).map(|_| normal.sample(&mut r)).collect())
            .collect()
    };

    let mut train = Corpus::default();
    let mut test = Corpus::default();
    let scene_normal = Normal::new(0.0, cfg.scene_variance.sqrt()).unwrap();
    let drift_normal = Normal::new(0.0, (cfg.scene_variance * DRIFT_FRACTION).sqrt()).unwrap();

    for take_id in 0..cfg.n_takes {
        let scenario_id = take_id % cfg.n_scenarios;
        let scenario = &scenarios[scenario_id];
        let mut chain_rng = rng::stream(cfg.seed, &format!("take-chain-{take_id}"));
        let mut scene_rng = rng::stream(cfg.seed, &format!("take-scene-{take_id}"));
        let scene: Vec<f64> = (0..cfg.d_v).map(|_| scene_normal.sample(&mut scene_rng)).collect();

        let mut local = sample_categorical(&scenario.init, &mut chain_rng);
        let mut drift = vec![0.0; cfg.d_v];
        let mut segments = Vec::with_capacity(cfg.segments_per_take);
        for seg_idx in 0..cfg.segments_per_take {
            if seg_idx > 0 {
                local = sample_categorical(&scenario.trans[local], &mut chain_rng);
                for dv in drift.iter_mut() {
                    *dv += drift_normal.sample(&mut scene_rng);
                }
            }
            let text_id = scenario.actions[local];
            let mut seg_rng = rng::stream(cfg.seed, &format!("segment-{take_id}-{seg_idx}"));
            let paraphrase = seg_rng.gen_range(0..cfg.n_paraphrases_per_action);
            let bank_label = text_id * cfg.n_paraphrases_per_action + paraphrase;
            let traj_text_id = if seg_rng.gen_bool(cfg.traj_informativeness.clamp(0.0, 1.0)) {
                text_id
            } else {
                seg_rng.gen_range(0..cfg.n_actions)
            };
            let interval = (
                seg_idx as f64 * SEGMENT_DURATION,
                (seg_idx + 1) as f64 * SEGMENT_DURATION,
            );
            let poses = segment_poses(
                &archetypes[traj_text_id],
                interval,
                cfg.traj_noise,
                &mut seg_rng,
            );

            let mut base = Tensor::zeros(vec![cfg.n_tok, cfg.d_v]);
            for tok in 0..cfg.n_tok {
                for j in 0..cfg.d_v {
                    base.data[tok * cfg.d_v + j] = scene[j] + drift[j] + action_dirs[text_id][j];
                }
            }
            let noise = token_noise(cfg, take_id, seg_idx, "");
            let mut tokens = base.clone();
            for (t, n) in tokens.data.iter_mut().zip(&noise.data) {
                *t += n;
            }

            segments.push(Segment {
                take_id,
                scenario: scenario_id,
                segment_index: seg_idx,
                bank_label,
                text_id,
                traj_text_id,
                interval,
                poses,
                visual_tokens: tokens,
                token_base: Some(base),
                controls: None,
            });
        }
        let take = Take {
            id: take_id,
            scenario: scenario_id,
            segments,
        };
        if take_id % TEST_TAKE_STRIDE == TEST_TAKE_STRIDE - 1 {
            test.takes.push(take);
        } else {
            train.takes.push(take);
        }
    }

    Ok(World {
        config: cfg.clone(),
        bank,
        scenarios,
        train,
        test,
    })
}

/// Re-draw the additive visual-token noise (fresh stream named by `salt`)
/// while keeping scene/drift/action content fixed. Only works on corpora
/// that still carry their token bases.
pub fn regenerate_visual_noise(world: &World, corpus: &Corpus, salt: &str) -> Result<Corpus> {
    let cfg = &world.config;
    let mut out = corpus.clone();
    for take in &mut out.takes {
        for seg in &mut take.segments {
            let base = seg.token_base.as_ref().ok_or_else(|| {
                Error::Invalid("corpus was reloaded from disk; token bases unavailable".into())
            })?;
            let noise = token_noise(cfg, seg.take_id, seg.segment_index, salt);
            let mut tokens = base.clone();
            for (t, n) in tokens.data.iter_mut().zip(&noise.data) {
                *t += n;
            }
            seg.visual_tokens = tokens;
        }
    }
    Ok(out)
}

// ---- manifests and tensor files ----

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
    seed: u64,
    split: String,
    segments: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    take: usize,
    scenario: usize,
    segment_index: usize,
    action_id: usize,
    text_id: usize,
    interval: [f64; 2],
    pose_file: String,
    visual_token_file: String,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    controls: Option<Vec<[f64; 6]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control_interval: Option<[f64; 2]>,
}

const TENSOR_MAGIC: &[u8] = b"TPTEN-V1\n";

pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let mut r = fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Invalid(format!("{} is not a tensor file", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

fn manifest_path(dir: &Path, split: &str, with_controls: bool) -> std::path::PathBuf {
    if with_controls {
        dir.join(format!("manifest_{split}_controls.jsonl"))
    } else {
        dir.join(format!("manifest_{split}.jsonl"))
    }
}

fn emit_split(world: &World, corpus: &Corpus, split: &str, dir: &Path, with_controls: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    let header = ManifestHeader {
        manifest_version: 1,
        seed: world.config.seed,
        split: split.to_string(),
        segments: corpus.n_segments(),
    };
    lines.push_str(&serde_json::to_string(&header)?);
    lines.push('\n');
    for take in &corpus.takes {
        for seg in &take.segments {
            let pose_file = format!("poses/{split}_{:03}_{:02}.jsonl", take.id, seg.segment_index);
            let token_file = format!("tokens/{split}_{:03}_{:02}.bin", take.id, seg.segment_index);
            if !with_controls {
                fs::create_dir_all(dir.join("poses"))?;
                fs::write(dir.join(&pose_file), poses_to_jsonl(&seg.poses)?)?;
                write_tensor_file(&seg.visual_tokens, &dir.join(&token_file))?;
            }
            let rec = ManifestRecord {
                take: take.id,
                scenario: take.scenario,
                segment_index: seg.segment_index,
                action_id: seg.bank_label,
                text_id: seg.text_id,
                interval: [seg.interval.0, seg.interval.1],
                pose_file,
                visual_token_file: token_file,
                split: split.to_string(),
                controls: if with_controls {
                    Some(seg.controls.as_ref().map(|c| c.knots.clone()).ok_or_else(
                        || Error::Invalid("controls not computed before emission".into()),
                    )?)
                } else {
                    None
                },
                control_interval: if with_controls {
                    seg.controls.as_ref().map(|c| [c.interval.0, c.interval.1])
                } else {
                    None
                },
            };
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
    }
    fs::write(manifest_path(dir, split, with_controls), lines)?;
    Ok(())
}

/// Write `bank.json`, per-split manifests, pose JSONL files, and visual
/// token tensors under `dir`. Idempotent: same world, same bytes.
pub fn emit_manifest(world: &World, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bank_json = serde_json::to_string_pretty(&world.bank)?;
    fs::write(dir.join("bank.json"), bank_json)?;
    let scen_json = serde_json::to_string_pretty(&world.scenarios)?;
    fs::write(dir.join("scenarios.json"), scen_json)?;
    emit_split(world, &world.train, "train", dir, false)?;
    emit_split(world, &world.test, "test", dir, false)?;
    Ok(())
}

/// Write the control-augmented manifests (after preprocessing).
pub fn emit_controls_manifest(world: &World, dir: &Path) -> Result<()> {
    emit_split(world, &world.train, "train", dir, true)?;
    emit_split(world, &world.test, "test", dir, true)?;
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Corpus> {
    let with_controls = manifest_path(dir, split, true).exists();
    let path = manifest_path(dir, split, with_controls);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let _header: ManifestHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::Invalid("manifest missing header".into()))?,
    )?;
    let mut corpus = Corpus::default();
    for line in lines {
        let rec: ManifestRecord = serde_json::from_str(line)?;
        let poses = poses_from_jsonl(&fs::read_to_string(dir.join(&rec.pose_file))?)?;
        let tokens = read_tensor_file(&dir.join(&rec.visual_token_file))?;
        let seg = Segment {
            take_id: rec.take,
            scenario: rec.scenario,
            segment_index: rec.segment_index,
            bank_label: rec.action_id,
            text_id: rec.text_id,
            traj_text_id: usize::MAX, // not part of the on-disk contract
            interval: (rec.interval[0], rec.interval[1]),
            poses,
            visual_tokens: tokens,
            token_base: None,
            controls: rec.controls.map(|knots| ControlTensor {
                knots,
                interval: rec
                    .control_interval
                    .map(|iv| (iv[0], iv[1]))
                    .unwrap_or((rec.interval[0], rec.interval[1])),
            }),
        };
        match corpus.takes.last_mut() {
            Some(t) if t.id == rec.take => t.segments.push(seg),
            _ => corpus.takes.push(Take {
                id: rec.take,
                scenario: rec.scenario,
                segments: vec![seg],
            }),
        }
    }
    Ok(corpus)
}

/// Reload a world from an emitted directory.
pub fn load_world(cfg: &WorldConfig, dir: &Path) -> Result<World> {
    let bank: ActionBank = serde_json::from_str(
        &fs::read_to_string(dir.join("bank.json"))
            .map_err(|_| Error::MissingArtifact(dir.join("bank.json").display().to_string()))?,
    )?;
    let scenarios: Vec<Scenario> =
        serde_json::from_str(&fs::read_to_string(dir.join("scenarios.json")).map_err(|_| {
            Error::MissingArtifact(dir.join("scenarios.json").display().to_string())
        })?)?;
    Ok(World {
        config: cfg.clone(),
        bank,
        scenarios,
        train: load_split(dir, "train")?,
        test: load_split(dir, "test")?,
    })
}

/// Identity used by quaternion-free callers that need a placeholder pose.
pub fn rest_pose(t: f64) -> Pose {
    Pose {
        t,
        translation: [0.0; 3],
        rotation: Quat::IDENTITY,
    }
}

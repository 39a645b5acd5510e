use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::motion::{generate_motion, MotionClip, MotionFamily};
use super::render::{render, RenderedSequence};
use super::scene::{PatternKind, SceneSpec};
use super::skeleton::{retarget, EmbodimentSpec, Skeleton};
use super::SynthError;
use crate::rng::child_rng;

/// Frame geometry of every rendered sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Sizes of the procedural registry.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub embodiments: usize,
    pub motions: usize,
    pub scenes: usize,
    pub canvas: Canvas,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            embodiments: 5,
            motions: 20,
            scenes: 10,
            canvas: Canvas {
                frames: 16,
                height: 32,
                width: 32,
            },
            seed: 0,
        }
    }
}

/// Every asset the generator can combine: one skeleton, many bodies,
/// motions and scenes.
#[derive(Clone, Debug)]
pub struct World {
    pub skeleton: Skeleton,
    pub embodiments: Vec<EmbodimentSpec>,
    pub motions: Vec<MotionClip>,
    pub scenes: Vec<SceneSpec>,
    pub canvas: Canvas,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

// Reference proportions on a 32-pixel canvas, bone order of `Skeleton::humanoid`.
const BASE_LENGTHS: [f32; 13] = [
    6.0, 1.5, 3.5, 3.5, 1.5, 3.5, 3.5, 1.2, 4.5, 4.5, 1.2, 4.5, 4.5,
];
const TORSO: [usize; 1] = [0];
const ARMS: [usize; 4] = [2, 3, 5, 6];
const LEGS: [usize; 4] = [8, 9, 11, 12];

pub fn generate_embodiment(id: &str, index: usize, count: usize, scale: f32, rng: &mut ChaCha8Rng) -> EmbodimentSpec {
    let ft: f32 = rng.random_range(0.85..1.15);
    let fa: f32 = rng.random_range(0.8..1.2);
    let fl: f32 = rng.random_range(0.85..1.15);
    let mut lengths: Vec<f32> = BASE_LENGTHS.iter().map(|l| l * scale).collect();
    for &b in &TORSO {
        lengths[b] *= ft;
    }
    for &b in &ARMS {
        lengths[b] *= fa;
    }
    for &b in &LEGS {
        lengths[b] *= fl;
    }
    let torso_w = (rng.random_range(2.0..3.4f32) * scale).max(1.0);
    let limb_w = (rng.random_range(1.2..2.4f32) * scale).max(1.0);
    let mut widths = vec![limb_w; 13];
    for &b in &TORSO {
        widths[b] = torso_w;
    }
    let hue = index as f32 / count as f32 + rng.random_range(-0.04..0.04f32);
    let primary = hsv(hue, 0.85, 0.95);
    let secondary = hsv(hue + 0.12, 0.7, 0.8);
    let legs = hsv(hue - 0.1, 0.75, 0.6);
    let mut colors = vec![primary; 14];
    for &b in &ARMS {
        colors[b] = secondary;
    }
    for &b in &LEGS {
        colors[b] = legs;
    }
    colors[13] = hsv(hue + 0.5, 0.35, 1.0);
    EmbodimentSpec {
        id: id.to_string(),
        limb_lengths: lengths,
        limb_widths: widths,
        colors,
        head_radius: (rng.random_range(2.0..3.0f32) * scale).max(1.0),
    }
}

fn generate_scene(id: &str, canvas: Canvas, rng: &mut ChaCha8Rng) -> SceneSpec {
    let scale = canvas.height as f32 / 32.0;
    let pattern = PatternKind::ALL[rng.random_range(0..PatternKind::ALL.len())];
    let hue: f32 = rng.random();
    let va: f32 = rng.random_range(0.25..0.5);
    let vb: f32 = rng.random_range(0.55..0.8);
    let period = ((rng.random_range(3.0..8.0f32) * scale).round() as u32).max(1);
    let jx = (rng.random_range(-2.0..2.0f32) * scale).round() as i32;
    let jy = (rng.random_range(-1.0..1.0f32) * scale).round() as i32;
    SceneSpec {
        id: id.to_string(),
        pattern,
        color_a: hsv(hue, 0.25, va),
        color_b: hsv(hue + 0.08, 0.2, vb),
        period,
        camera_offset: [
            canvas.width as i32 / 2 + jx,
            (0.56 * canvas.height as f32).round() as i32 + jy,
        ],
    }
}

impl World {
    pub fn generate(cfg: &DataConfig) -> Result<World, SynthError> {
        let canvas = cfg.canvas;
        let scale = canvas.height.min(canvas.width) as f32 / 32.0;
        let skeleton = Skeleton::humanoid();
        let embodiments = (0..cfg.embodiments)
            .map(|i| {
                let mut rng = child_rng(cfg.seed, 0x1000 + i as u64);
                generate_embodiment(&format!("E{}", i), i, cfg.embodiments, scale, &mut rng)
            })
            .collect::<Vec<_>>();
        let motions = (0..cfg.motions)
            .map(|i| {
                let mut rng = child_rng(cfg.seed, 0x2000 + i as u64);
                let family = MotionFamily::ALL[i % MotionFamily::ALL.len()];
                generate_motion(format!("M{:02}", i), family, canvas.frames, scale, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut scenes = Vec::with_capacity(cfg.scenes);
        for i in 0..cfg.scenes {
            let mut rng = child_rng(cfg.seed, 0x3000 + i as u64);
            let mut scene = generate_scene(&format!("S{:02}", i), canvas, &mut rng);
            if !fits(&skeleton, &embodiments, &motions, &scene, canvas) {
                scene.camera_offset = [canvas.width as i32 / 2, (0.56 * canvas.height as f32).round() as i32];
                if !fits(&skeleton, &embodiments, &motions, &scene, canvas) {
                    return Err(SynthError::OutOfFrame {
                        frame: 0,
                        joint: 0,
                        x: scene.camera_offset[0] as f32,
                        y: scene.camera_offset[1] as f32,
                    });
                }
            }
            scenes.push(scene);
        }
        Ok(World {
            skeleton,
            embodiments,
            motions,
            scenes,
            canvas,
        })
    }

    pub fn embodiment(&self, id: &str) -> Result<&EmbodimentSpec, SynthError> {
        self.embodiments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| SynthError::UnknownEmbodiment(id.to_string()))
    }

    pub fn motion(&self, id: &str) -> Result<&MotionClip, SynthError> {
        self.motions
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| SynthError::UnknownId(id.to_string()))
    }

    pub fn scene(&self, id: &str) -> Result<&SceneSpec, SynthError> {
        self.scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| SynthError::UnknownId(id.to_string()))
    }

    /// Render one (embodiment, motion, scene) triple.
    pub fn render_triple(&self, emb: &str, motion: &str, scene: &str) -> Result<RenderedSequence, SynthError> {
        render_one(
            &self.skeleton,
            self.embodiment(emb)?,
            self.motion(motion)?,
            self.scene(scene)?,
            self.canvas,
        )
    }
}

fn fits(skeleton: &Skeleton, embs: &[EmbodimentSpec], motions: &[MotionClip], scene: &SceneSpec, canvas: Canvas) -> bool {
    embs.iter().all(|e| {
        motions
            .iter()
            .all(|m| render_one(skeleton, e, m, scene, canvas).is_ok())
    })
}

pub fn render_one(
    skeleton: &Skeleton,
    emb: &EmbodimentSpec,
    motion: &MotionClip,
    scene: &SceneSpec,
    canvas: Canvas,
) -> Result<RenderedSequence, SynthError> {
    let track = retarget(motion, skeleton, emb)?;
    render(&track, emb, scene, canvas.height, canvas.width)
}

/// Source and target renders of one motion in one scene on two bodies.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub source: RenderedSequence,
    pub target: RenderedSequence,
    pub target_embodiment: String,
}

impl PairedSample {
    pub fn check(&self) -> Result<(), SynthError> {
        let ok = self.source.motion_id == self.target.motion_id
            && self.source.motion_digest == self.target.motion_digest
            && self.source.scene_id == self.target.scene_id
            && self.source.embodiment_id != self.target.embodiment_id
            && self.target.embodiment_id == self.target_embodiment;
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidPair(format!(
                "{} -> {}",
                self.source.sequence_id(),
                self.target.sequence_id()
            )))
        }
    }
}

/// Index-level description of a pair: (source emb, target emb, motion, scene).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairPlan {
    pub source: usize,
    pub target: usize,
    pub motion: usize,
    pub scene: usize,
}

/// Seeded uniform choice of `budget` distinct ordered-pair triples, with every
/// embodiment guaranteed to appear as a target at least once.
pub fn plan_pairs(
    embodiments: usize,
    motions: usize,
    scenes: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<PairPlan>, SynthError> {
    if embodiments < 2 {
        return Err(SynthError::InsufficientEmbodiments(embodiments));
    }
    let mut all = Vec::new();
    for source in 0..embodiments {
        for target in 0..embodiments {
            if source == target {
                continue;
            }
            for motion in 0..motions {
                for scene in 0..scenes {
                    all.push(PairPlan {
                        source,
                        target,
                        motion,
                        scene,
                    });
                }
            }
        }
    }
    if budget > all.len() || budget < embodiments {
        return Err(SynthError::InvalidBudget {
            budget,
            available: all.len(),
            min: embodiments,
        });
    }
    let mut rng = child_rng(seed, 0x5000);
    all.shuffle(&mut rng);
    // Earliest shuffled triple per target first, then the rest in shuffled order.
    let mut chosen = Vec::with_capacity(budget);
    let mut taken = vec![false; all.len()];
    for e in 0..embodiments {
        let i = all.iter().position(|p| p.target == e).expect("every target has triples");
        taken[i] = true;
        chosen.push(i);
    }
    for (i, _) in all.iter().enumerate() {
        if chosen.len() == budget {
            break;
        }
        if !taken[i] {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| all[i]).collect())
}

/// Rendered motion-aligned pairs among `embodiments`.
pub fn build_paired_dataset(
    embodiments: &[EmbodimentSpec],
    motions: &[MotionClip],
    scenes: &[SceneSpec],
    skeleton: &Skeleton,
    canvas: Canvas,
    pair_budget: usize,
    seed: u64,
) -> Result<Vec<PairedSample>, SynthError> {
    let plans = plan_pairs(embodiments.len(), motions.len(), scenes.len(), pair_budget, seed)?;
    let mut cache: BTreeMap<(usize, usize, usize), RenderedSequence> = BTreeMap::new();
    let mut get = |e: usize, m: usize, s: usize| -> Result<RenderedSequence, SynthError> {
        if let Some(r) = cache.get(&(e, m, s)) {
            return Ok(r.clone());
        }
        let r = render_one(skeleton, &embodiments[e], &motions[m], &scenes[s], canvas)?;
        cache.insert((e, m, s), r.clone());
        Ok(r)
    };
    plans
        .iter()
        .map(|p| {
            Ok(PairedSample {
                source: get(p.source, p.motion, p.scene)?,
                target: get(p.target, p.motion, p.scene)?,
                target_embodiment: embodiments[p.target].id.clone(),
            })
        })
        .collect()
}

/// Seeded draws with replacement over (motion, scene) for one embodiment.
pub fn plan_unpaired(motions: usize, scenes: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>, SynthError> {
    if count == 0 || motions == 0 || scenes == 0 {
        return Err(SynthError::InvalidBudget {
            budget: count,
            available: motions * scenes,
            min: 1,
        });
    }
    let mut rng = child_rng(seed, 0x6000);
    Ok((0..count)
        .map(|_| (rng.random_range(0..motions), rng.random_range(0..scenes)))
        .collect())
}

pub fn build_unpaired_set(
    emb: &EmbodimentSpec,
    skeleton: &Skeleton,
    motions: &[MotionClip],
    scenes: &[SceneSpec],
    canvas: Canvas,
    count: usize,
    seed: u64,
) -> Result<Vec<RenderedSequence>, SynthError> {
    plan_unpaired(motions.len(), scenes.len(), count, seed)?
        .into_iter()
        .map(|(m, s)| render_one(skeleton, emb, &motions[m], &scenes[s], canvas))
        .collect()
}

/// Train/test partition of embodiments, motions and scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train_embodiments: Vec<String>,
    pub test_embodiment: String,
    pub train_motions: Vec<String>,
    pub test_motions: Vec<String>,
    pub train_scenes: Vec<String>,
    pub test_scenes: Vec<String>,
}

fn take_fraction(ids: &[String], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let n = ids.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test: BTreeSet<usize> = idx[..k].iter().copied().collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if test.contains(&i) {
            held.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    (train, held)
}

pub fn split_holdout(
    embodiments: &[String],
    motions: &[String],
    scenes: &[String],
    holdout_embodiment: &str,
    holdout_motion_fraction: f64,
    holdout_scene_fraction: f64,
    seed: u64,
) -> Result<HoldoutSplit, SynthError> {
    if !embodiments.iter().any(|e| e == holdout_embodiment) {
        return Err(SynthError::UnknownEmbodiment(holdout_embodiment.to_string()));
    }
    for f in [holdout_motion_fraction, holdout_scene_fraction] {
        if !(f > 0.0 && f < 1.0) {
            return Err(SynthError::InvalidFraction(f));
        }
    }
    let mut rng = child_rng(seed, 0x7000);
    let (train_motions, test_motions) = take_fraction(motions, holdout_motion_fraction, &mut rng);
    let (train_scenes, test_scenes) = take_fraction(scenes, holdout_scene_fraction, &mut rng);
    Ok(HoldoutSplit {
        train_embodiments: embodiments.iter().filter(|e| *e != holdout_embodiment).cloned().collect(),
        test_embodiment: holdout_embodiment.to_string(),
        train_motions,
        test_motions,
        train_scenes,
        test_scenes,
    })
}

/// (embodiment, motion, scene) id triple.
pub type Triple = (String, String, String);

impl HoldoutSplit {
    /// Every triple a training stage may render.
    pub fn train_triples(&self) -> BTreeSet<Triple> {
        let mut out = BTreeSet::new();
        for e in &self.train_embodiments {
            for m in &self.train_motions {
                for s in &self.train_scenes {
                    out.insert((e.clone(), m.clone(), s.clone()));
                }
            }
        }
        out
    }

    /// Target triples of the evaluation pairs: the held-out body on held-out
    /// motions and scenes.
    pub fn test_triples(&self) -> BTreeSet<Triple> {
        let mut out = BTreeSet::new();
        for m in &self.test_motions {
            for s in &self.test_scenes {
                out.insert((self.test_embodiment.clone(), m.clone(), s.clone()));
            }
        }
        out
    }

    /// Evaluation pairs as (source emb, target emb, motion, scene) ids.
    pub fn test_pairs(&self) -> Vec<(String, String, String, String)> {
        let mut out = Vec::new();
        for m in &self.test_motions {
            for s in &self.test_scenes {
                for src in &self.train_embodiments {
                    out.push((src.clone(), self.test_embodiment.clone(), m.clone(), s.clone()));
                }
            }
        }
        out
    }
}

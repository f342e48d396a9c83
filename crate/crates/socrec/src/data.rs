//! Trajectory ingestion, scene windowing, geometric preprocessing, and the
//! synthetic social-force scene generator.
//!
//! Input files follow the classic pedestrian-tracking convention: one
//! record per line, `frame_id ped_id x y`, whitespace-separated, meters.
//! Records are windowed into fixed 20-timestep [`Scene`]s (8 observed + 12
//! future) containing every pedestrian present for the whole window.

use crate::rng::derive;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Observed timesteps per scene.
pub const T_PAST: usize = 8;
/// Forecast timesteps per scene.
pub const T_FUTURE: usize = 12;
/// Total timesteps per scene.
pub const T_TOTAL: usize = T_PAST + T_FUTURE;
/// Seconds between consecutive timesteps.
pub const STEP_SECONDS: f64 = 0.4;
/// Raw-frame stride between timesteps in the standard benchmark files.
pub const DEFAULT_FRAME_STRIDE: u64 = 10;

/// Header line marking a dataset file written by this crate.
pub const DATASET_HEADER: &str = "# socrec-dataset v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One tracked observation: a pedestrian at a frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub frame_id: u64,
    pub ped_id: u64,
    pub x: f64,
    pub y: f64,
}

/// Where a scene came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    /// Windowed from an input file (or generated as base data).
    Real,
    /// Reconstructed-and-forecast from a difficult training sample.
    Pseudo,
    /// Produced by one of the non-model augmentation baselines.
    BaselineAug,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Real => "real",
            SourceTag::Pseudo => "pseudo",
            SourceTag::BaselineAug => "baseline-aug",
        }
    }
}

/// A fixed-length multi-pedestrian window: 8 observed timesteps followed
/// by 12 future ones, for `N ≥ 1` pedestrians all present throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Per agent, 20 `(x, y)` positions in meters.
    pub positions: Vec<[[f64; 2]; T_TOTAL]>,
    pub ped_ids: Vec<u64>,
    pub start_frame: u64,
    pub source_tag: SourceTag,
}

impl Scene {
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    /// The observed window, per agent.
    pub fn past(&self) -> Vec<[[f64; 2]; T_PAST]> {
        self.positions
            .iter()
            .map(|traj| {
                let mut p = [[0.0; 2]; T_PAST];
                p.copy_from_slice(&traj[..T_PAST]);
                p
            })
            .collect()
    }

    /// The future window, per agent.
    pub fn future(&self) -> Vec<[[f64; 2]; T_FUTURE]> {
        self.positions
            .iter()
            .map(|traj| {
                let mut f = [[0.0; 2]; T_FUTURE];
                f.copy_from_slice(&traj[T_PAST..]);
                f
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .flat_map(|t| t.iter())
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Observed positions with a random subset of cells zeroed out.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPast {
    /// Per agent, 8 `(x, y)` positions; masked cells are exactly `(0, 0)`.
    pub positions: Vec<[[f64; 2]; T_PAST]>,
    /// Per agent, true where the cell was masked.
    pub indicator: Vec<[bool; T_PAST]>,
}

impl MaskedPast {
    /// The observed window with nothing masked.
    pub fn unmasked(scene: &Scene) -> Self {
        Self {
            positions: scene.past(),
            indicator: vec![[false; T_PAST]; scene.n_agents()],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn masked_cells(&self) -> usize {
        self.indicator
            .iter()
            .flat_map(|row| row.iter())
            .filter(|m| **m)
            .count()
    }
}

/// The rigid motion applied by [`normalize_scene`]: positions are first
/// translated by `-translation`, then rotated about the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneTransform {
    pub translation: [f64; 2],
    /// Radians in `[0, 2π)`.
    pub rotation: f64,
}

impl SceneTransform {
    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.translation[0], p[1] - self.translation[1]);
        let (s, c) = self.rotation.sin_cos();
        [c * dx - s * dy, s * dx + c * dy]
    }

    pub fn invert_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (rx, ry) = (c * p[0] + s * p[1], -s * p[0] + c * p[1]);
        [rx + self.translation[0], ry + self.translation[1]]
    }

    pub fn invert_scene(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for traj in &mut out.positions {
            for p in traj.iter_mut() {
                *p = self.invert_point(*p);
            }
        }
        out
    }
}

/// Parses whitespace-separated `frame_id ped_id x y` lines. Empty lines
/// and `#` comments are skipped; anything else must be a full record.
pub fn parse_trajectory_file(text: &str) -> Result<Vec<TrackRecord>, DataError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                line: line_no,
                detail: format!("expected 4 fields (frame ped x y), got {}", fields.len()),
            });
        }
        let frame_id: u64 = parse_field(fields[0], "frame_id", line_no)?;
        let ped_id: u64 = parse_field(fields[1], "ped_id", line_no)?;
        let x: f64 = parse_field(fields[2], "x", line_no)?;
        let y: f64 = parse_field(fields[3], "y", line_no)?;
        if !x.is_finite() || !y.is_finite() {
            return Err(DataError::Parse {
                line: line_no,
                detail: "non-finite coordinate".to_string(),
            });
        }
        records.push(TrackRecord { frame_id, ped_id, x, y });
    }
    Ok(records)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, DataError> {
    s.parse().map_err(|_| DataError::Parse {
        line,
        detail: format!("field {name}: cannot parse {s:?}"),
    })
}

/// Windows records into 20-timestep scenes.
///
/// Every distinct frame in the data starts a candidate window of 20 frames
/// spaced `frame_stride` apart; a pedestrian joins the scene iff it is
/// observed at all 20 of them, and windows with no qualifying pedestrian
/// are dropped.
pub fn build_scenes(records: &[TrackRecord], frame_stride: u64) -> Vec<Scene> {
    assert!(frame_stride > 0, "frame stride must be positive");
    // frame -> ped -> position, ordered for determinism
    let mut by_frame: BTreeMap<u64, BTreeMap<u64, [f64; 2]>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame_id).or_default().insert(r.ped_id, [r.x, r.y]);
    }
    let mut scenes = Vec::new();
    for &start in by_frame.keys() {
        let frames: Vec<u64> = (0..T_TOTAL as u64).map(|t| start + t * frame_stride).collect();
        let Some(first) = by_frame.get(&frames[0]) else {
            continue;
        };
        let mut qualifying: Vec<u64> = first.keys().copied().collect();
        for f in &frames[1..] {
            match by_frame.get(f) {
                Some(peds) => qualifying.retain(|p| peds.contains_key(p)),
                None => qualifying.clear(),
            }
            if qualifying.is_empty() {
                break;
            }
        }
        if qualifying.is_empty() {
            continue;
        }
        let positions = qualifying
            .iter()
            .map(|ped| {
                let mut traj = [[0.0; 2]; T_TOTAL];
                for (t, f) in frames.iter().enumerate() {
                    traj[t] = by_frame[f][ped];
                }
                traj
            })
            .collect();
        scenes.push(Scene {
            positions,
            ped_ids: qualifying,
            start_frame: start,
            source_tag: SourceTag::Real,
        });
    }
    scenes
}

/// Centers a scene on its past-window centroid and rotates it by `angle`
/// radians about the origin, returning the transform for inversion.
pub fn normalize_scene_with_rotation(scene: &Scene, angle: f64) -> (Scene, SceneTransform) {
    let rotation = angle.rem_euclid(std::f64::consts::TAU);
    let mut mean = [0.0f64; 2];
    let count = (scene.n_agents() * T_PAST) as f64;
    for traj in &scene.positions {
        for p in &traj[..T_PAST] {
            mean[0] += p[0];
            mean[1] += p[1];
        }
    }
    mean[0] /= count;
    mean[1] /= count;
    let transform = SceneTransform { translation: mean, rotation };
    let mut out = scene.clone();
    for traj in &mut out.positions {
        for p in traj.iter_mut() {
            *p = transform.apply_point(*p);
        }
    }
    (out, transform)
}

/// Training-time normalization: centroid centering plus a rotation drawn
/// uniformly from `[0, 2π)`. Evaluation uses
/// [`normalize_scene_with_rotation`] with angle 0.
pub fn normalize_scene<R: Rng>(scene: &Scene, rng: &mut R) -> (Scene, SceneTransform) {
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    normalize_scene_with_rotation(scene, angle)
}

/// Zeroes `round(r_percent/100 · 8N)` distinct (agent, timestep) cells of
/// the observed window, chosen uniformly, and reports them in the
/// indicator.
pub fn mask_past<R: Rng>(scene: &Scene, r_percent: f64, rng: &mut R) -> MaskedPast {
    assert!((0.0..=100.0).contains(&r_percent), "mask ratio out of range");
    let n = scene.n_agents();
    let cells = n * T_PAST;
    let target = (r_percent / 100.0 * cells as f64).round() as usize;
    // partial Fisher-Yates: the first `target` entries are the masked cells
    let mut order: Vec<usize> = (0..cells).collect();
    for i in 0..target.min(cells) {
        let j = rng.gen_range(i..cells);
        order.swap(i, j);
    }
    let mut positions = scene.past();
    let mut indicator = vec![[false; T_PAST]; n];
    for &cell in &order[..target.min(cells)] {
        let (agent, t) = (cell / T_PAST, cell % T_PAST);
        positions[agent][t] = [0.0, 0.0];
        indicator[agent][t] = true;
    }
    MaskedPast { positions, indicator }
}

/// Configuration for [`generate_synthetic_dataset`].
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Preferred walking speed range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Pairwise repulsion strength; 0 disables interaction entirely.
    pub interaction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 50,
            agents_min: 2,
            agents_max: 4,
            speed_min: 0.8,
            speed_max: 1.6,
            interaction: 1.0,
        }
    }
}

/// Largest repulsive acceleration magnitude, m/s².
const MAX_REPULSION: f64 = 5.0;
/// Velocity relaxation time toward the preferred velocity, seconds.
const RELAXATION: f64 = 0.5;

/// Simulates goal-directed agents with pairwise repulsion, 20 steps of
/// 0.4 s each. Agents spawn on a circle and walk toward roughly antipodal
/// goals, so trajectories cross mid-window and interact. All randomness
/// comes from streams derived from `seed`, so repeated calls are
/// bit-identical, and the spawn draws do not depend on `interaction`.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Vec<Scene> {
    assert!(config.agents_min >= 1 && config.agents_min <= config.agents_max);
    assert!(config.speed_min > 0.0 && config.speed_min <= config.speed_max);
    let mut scenes = Vec::with_capacity(config.n_scenes);
    for idx in 0..config.n_scenes {
        let mut rng = derive(seed, "synth-scene", idx as u64);
        let n = rng.gen_range(config.agents_min..=config.agents_max);
        let mut pos = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        let mut goal = Vec::with_capacity(n);
        let mut speed = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rng.gen_range(config.speed_min..=config.speed_max);
            // spawn radius scaled so crossings land mid-window
            let radius = s * 4.0;
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            let jitter = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let p = [
                radius * angle.cos() + jitter[0],
                radius * angle.sin() + jitter[1],
            ];
            let goal_angle = angle + std::f64::consts::PI + rng.gen_range(-0.4..0.4);
            let g = [radius * goal_angle.cos(), radius * goal_angle.sin()];
            let dir = unit_toward(p, g);
            pos.push(p);
            vel.push([s * dir[0], s * dir[1]]);
            goal.push(g);
            speed.push(s);
        }
        let mut positions = vec![[[0.0; 2]; T_TOTAL]; n];
        for t in 0..T_TOTAL {
            for (a, traj) in positions.iter_mut().enumerate() {
                traj[t] = pos[a];
            }
            step_social_force(&mut pos, &mut vel, &goal, &speed, config.interaction);
        }
        scenes.push(Scene {
            positions,
            ped_ids: (0..n as u64).collect(),
            start_frame: idx as u64 * 1000,
            source_tag: SourceTag::Real,
        });
    }
    scenes
}

fn unit_toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let d = (dx * dx + dy * dy).sqrt();
    if d < 1e-9 {
        [0.0, 0.0]
    } else {
        [dx / d, dy / d]
    }
}

fn step_social_force(
    pos: &mut [[f64; 2]],
    vel: &mut [[f64; 2]],
    goal: &[[f64; 2]],
    speed: &[f64],
    interaction: f64,
) {
    let n = pos.len();
    let dt = STEP_SECONDS;
    let mut acc = vec![[0.0f64; 2]; n];
    for i in 0..n {
        // relax toward the preferred velocity
        let dir = unit_toward(pos[i], goal[i]);
        acc[i][0] += (speed[i] * dir[0] - vel[i][0]) / RELAXATION;
        acc[i][1] += (speed[i] * dir[1] - vel[i][1]) / RELAXATION;
        // pairwise repulsion decaying with squared distance
        for j in 0..n {
            if i == j {
                continue;
            }
            let (dx, dy) = (pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]);
            let d2 = dx * dx + dy * dy;
            let d = d2.sqrt();
            if d < 1e-9 {
                continue;
            }
            let magnitude = (interaction / (d2 + 0.1)).min(MAX_REPULSION);
            acc[i][0] += magnitude * dx / d;
            acc[i][1] += magnitude * dy / d;
        }
    }
    for i in 0..n {
        vel[i][0] += acc[i][0] * dt;
        vel[i][1] += acc[i][1] * dt;
        pos[i][0] += vel[i][0] * dt;
        pos[i][1] += vel[i][1] * dt;
    }
}

/// Serializes scenes to the line-oriented dataset format: the version
/// header, then per scene a tag comment and its records. Scenes are
/// re-based onto disjoint frame ranges so parsing the file back and
/// windowing it reproduces exactly one scene per block.
pub fn write_dataset(scenes: &[Scene]) -> String {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for (i, scene) in scenes.iter().enumerate() {
        let base = i as u64 * 1000;
        let _ = writeln!(out, "# scene {i} source={}", scene.source_tag.as_str());
        for t in 0..T_TOTAL {
            let frame = base + t as u64 * DEFAULT_FRAME_STRIDE;
            for (a, ped) in scene.ped_ids.iter().enumerate() {
                let p = scene.positions[a][t];
                let _ = writeln!(out, "{frame} {ped} {:.6} {:.6}", p[0], p[1]);
            }
        }
    }
    out
}

/// Parses a dataset file (or any trajectory file) and windows it into
/// scenes with the standard frame stride.
pub fn load_dataset(text: &str) -> Result<Vec<Scene>, DataError> {
    let records = parse_trajectory_file(text)?;
    Ok(build_scenes(&records, DEFAULT_FRAME_STRIDE))
}

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::splitmix;
use super::{render, render_stereo, ObstacleKind, SceneSpec, SynthError};
use crate::dataset::layout::{DatasetWriter, LabelRow, Manifest, SessionKind};
use crate::dataset::{
    split_by_environment, OdometryEntry, Provenance, Split, SplitAssignment, SplitRequest,
};

/// Environments per generated dataset and their 9/3/3 partition.
pub const NUM_ENVS: usize = 15;
const ENV_SPLIT: (usize, usize, usize) = (9, 3, 3);
const DRIVE_SESSION_LEN: usize = 100;
const CRUISE_MPS: f64 = 0.5;
/// Corridor distance units travelled per metre.
const DISTANCE_PER_M: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_pos: usize,
    pub train_neg: usize,
    pub val_pos: usize,
    pub val_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl DatasetCounts {
    pub fn total(&self) -> usize {
        self.train_pos + self.train_neg + self.val_pos + self.val_neg + self.test_pos + self.test_neg
    }

    fn for_split(&self, s: Split) -> (usize, usize) {
        match s {
            Split::Train => (self.train_pos, self.train_neg),
            Split::Val => (self.val_pos, self.val_neg),
            Split::Test => (self.test_pos, self.test_neg),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("train_pos", self.train_pos),
            ("train_neg", self.train_neg),
            ("val_pos", self.val_pos),
            ("val_neg", self.val_neg),
            ("test_pos", self.test_pos),
            ("test_neg", self.test_neg),
        ] {
            if v == 0 {
                return Err(SynthError::EmptyCount(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub count: usize,
    pub length: usize,
    pub frame_period_s: f64,
}

/// An approach toward (or drive past) an obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSequence {
    pub specs: Vec<SceneSpec>,
    pub velocities: Vec<f64>,
    pub frame_period_s: f64,
}

impl SynthSequence {
    pub fn labels(&self) -> Vec<bool> {
        self.specs.iter().map(SceneSpec::traversable).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.specs.len())
            .map(|i| i as f64 * self.frame_period_s)
            .collect()
    }
}

/// A named scripted sequence with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub specs: Vec<SceneSpec>,
}

impl Scenario {
    pub fn labels(&self) -> Vec<bool> {
        self.specs.iter().map(SceneSpec::traversable).collect()
    }
}

pub fn env_name(env: usize) -> String {
    format!("env_{env:02}")
}

fn env_index(name: &str) -> usize {
    name.trim_start_matches("env_").parse().expect("generated environment name")
}

/// Style seed (upper 32 bits) of environment `env` in dataset `dataset_seed`.
pub fn env_seed(dataset_seed: u64, env: usize) -> u64 {
    (splitmix(dataset_seed ^ (env as u64 + 1) * 0x51) & 0xFFFF_FFFF) << 32
}

/// Draws one independent labeled scene.
///
/// Positives mix open corridors, distant obstacles and floor shadows;
/// negatives are boxes, drop-offs or glass panes within the near half.
pub fn random_scene<R: Rng + ?Sized>(env_seed: u64, traversable: bool, baseline_px: u32, rng: &mut R) -> SceneSpec {
    let mut spec = SceneSpec {
        seed: env_seed | (rng.random::<u32>() as u64),
        corridor_width: rng.random_range(0.45..0.85),
        obstacle: None,
        lighting: rng.random_range(0.6..1.0),
        stereo_baseline_px: baseline_px,
    };
    let lateral = rng.random_range(-0.35..0.35);
    if traversable {
        let r: f64 = rng.random();
        if r < 0.4 {
        } else if r < 0.75 {
            let kind = [ObstacleKind::Box, ObstacleKind::DropOff][rng.random_range(0..2)];
            spec = spec.with_obstacle(kind, rng.random_range(0.6..1.0), lateral);
        } else {
            spec = spec.with_obstacle(ObstacleKind::ShadowBand, rng.random_range(0.0..0.9), 0.0);
        }
    } else {
        let r: f64 = rng.random();
        let kind = if r < 0.4 {
            ObstacleKind::Box
        } else if r < 0.7 {
            ObstacleKind::DropOff
        } else {
            ObstacleKind::GlassGlare
        };
        spec = spec.with_obstacle(kind, rng.random_range(0.0..0.42), lateral);
    }
    spec
}

/// Approach sequence: cruise while far, decelerate near the obstacle and
/// stop. Distance decreases monotonically, so the label flips at most once.
pub fn approach_sequence<R: Rng + ?Sized>(
    env_seed: u64,
    length: usize,
    frame_period_s: f64,
    baseline_px: u32,
    rng: &mut R,
) -> SynthSequence {
    let r: f64 = rng.random();
    let kind = if r < 0.25 {
        ObstacleKind::Box
    } else if r < 0.45 {
        ObstacleKind::DropOff
    } else if r < 0.65 {
        ObstacleKind::GlassGlare
    } else if r < 0.85 {
        ObstacleKind::ShadowBand
    } else {
        // open corridor drive; modeled as a far box that is never reached
        ObstacleKind::Box
    };
    let open = r >= 0.85;
    let blocks = kind.blocks() && !open;
    let width = rng.random_range(0.45..0.85);
    let lighting = rng.random_range(0.6..1.0);
    let lateral = rng.random_range(-0.3..0.3);
    let base_seed = env_seed | (rng.random::<u32>() as u64 & !0xFF);
    let mut d: f64 = rng.random_range(0.85..1.0);
    let d_stop: f64 = rng.random_range(0.05..0.35);
    let slow_from = 0.58;
    let mut specs = Vec::with_capacity(length);
    let mut velocities = Vec::with_capacity(length);
    for i in 0..length {
        let v = if !blocks || d > slow_from {
            CRUISE_MPS
        } else if d > d_stop {
            (CRUISE_MPS * (d - d_stop) / (slow_from - d_stop)).max(0.05)
        } else {
            0.0
        };
        let mut s = SceneSpec {
            seed: base_seed | (i as u64 & 0xFF),
            corridor_width: width,
            obstacle: None,
            lighting,
            stereo_baseline_px: baseline_px,
        };
        if open {
            s = s.with_obstacle(ObstacleKind::Box, 1.0, lateral);
        } else {
            s = s.with_obstacle(kind, d.clamp(0.0, 1.0), if kind == ObstacleKind::ShadowBand { 0.0 } else { lateral });
        }
        specs.push(s);
        velocities.push(v);
        if !open {
            d = (d - v * frame_period_s * DISTANCE_PER_M).max(0.0);
        }
    }
    SynthSequence {
        specs,
        velocities,
        frame_period_s,
    }
}

/// Glass-door and sun/shade scenarios for qualitative traces, staged in the
/// environments whose style seeds are given (one variant per environment).
pub fn scripted_scenarios(env_seeds: &[u64], baseline_px: u32) -> Vec<Scenario> {
    let mut out = Vec::new();
    let base = |env: u64, k: u64| {
        let mut s = SceneSpec::open(env | (0xA000 + k * 0x100));
        s.corridor_width = 0.65;
        s.lighting = 0.85;
        s.stereo_baseline_px = baseline_px;
        s
    };
    let test_envs = env_seeds;
    for (k, &env) in test_envs.iter().enumerate() {
        let specs = (0..18)
            .map(|i| {
                let mut s = base(env, k as u64);
                s.seed |= i;
                if i < 8 {
                    s.with_obstacle(ObstacleKind::GlassGlare, 0.3, 0.0)
                } else {
                    s
                }
            })
            .collect();
        out.push(Scenario { name: format!("door-opening-{k}"), specs });
    }
    for (k, &env) in test_envs.iter().enumerate() {
        let specs = (0..15)
            .map(|i| {
                let mut s = base(env, 10 + k as u64);
                s.seed |= i;
                s.with_obstacle(ObstacleKind::ShadowBand, (0.95 - i as f64 * 0.065).max(0.0), 0.0)
            })
            .collect();
        out.push(Scenario { name: format!("shadow-pass-{k}"), specs });
    }
    for (k, &env) in test_envs.iter().enumerate() {
        let specs = (0..16)
            .map(|i| {
                let mut s = base(env, 20 + k as u64);
                s.seed |= i;
                if (4..7).contains(&i) || (10..13).contains(&i) {
                    s.lighting = 0.6;
                    s.with_obstacle(ObstacleKind::ShadowBand, 0.15, 0.0)
                } else {
                    s
                }
            })
            .collect();
        out.push(Scenario { name: format!("sun-and-shade-{k}"), specs });
    }
    for (k, &env) in test_envs.iter().enumerate() {
        let specs = (0..16)
            .map(|i| {
                let mut s = base(env, 30 + k as u64);
                s.seed |= i;
                s.with_obstacle(ObstacleKind::GlassGlare, 0.95 - i as f64 * 0.055, 0.1)
            })
            .collect();
        out.push(Scenario { name: format!("glass-approach-{k}"), specs });
    }
    out
}

/// One session of a dataset plan, not yet rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSession {
    pub env: String,
    pub session: String,
    pub kind: SessionKind,
    pub specs: Vec<SceneSpec>,
    pub odometry: Vec<OdometryEntry>,
    /// Hand labels for labeled sessions; `None` elsewhere.
    pub hand_labels: Vec<Option<bool>>,
}

/// Fully specified dataset content: a pure function of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub seed: u64,
    pub stereo: bool,
    pub split: SplitAssignment,
    pub sessions: Vec<PlannedSession>,
    pub counts: BTreeMap<String, usize>,
}

impl DatasetPlan {
    pub fn build(
        seed: u64,
        counts: &DatasetCounts,
        sequences: &SequenceSpec,
        drive_frames: usize,
        stereo_baseline_px: Option<u32>,
    ) -> Result<Self, SynthError> {
        counts.validate()?;
        if !(sequences.frame_period_s > 0.0) {
            return Err(SynthError::OutOfRange {
                field: "frame_period_s",
                value: sequences.frame_period_s,
            });
        }
        let baseline = stereo_baseline_px.unwrap_or(0);
        let names: Vec<String> = (0..NUM_ENVS).map(env_name).collect();
        let split = split_by_environment(
            names.iter().map(String::as_str),
            &SplitRequest::Counts {
                train: ENV_SPLIT.0,
                val: ENV_SPLIT.1,
                test: ENV_SPLIT.2,
                seed,
            },
        )?;
        let period = sequences.frame_period_s;
        let mut sessions = Vec::new();

        for split_kind in Split::ALL {
            let envs = split.envs_in(split_kind);
            let (pos, neg) = counts.for_split(split_kind);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x1AB ^ split_kind as u64));
            let mut per_env: Vec<Vec<(SceneSpec, bool)>> = vec![Vec::new(); envs.len()];
            for i in 0..pos + neg {
                let traversable = i < pos;
                let e = i % envs.len();
                let es = env_seed(seed, env_index(envs[e]));
                per_env[e].push((random_scene(es, traversable, baseline, &mut rng), traversable));
            }
            for (e, items) in per_env.into_iter().enumerate() {
                if items.is_empty() {
                    continue;
                }
                let odometry = (0..items.len())
                    .map(|i| OdometryEntry {
                        frame_index: i,
                        timestamp_s: i as f64 * period,
                        velocity_mps: Some(0.0),
                    })
                    .collect();
                sessions.push(PlannedSession {
                    env: envs[e].to_string(),
                    session: "labeled".into(),
                    kind: SessionKind::Labeled,
                    hand_labels: items.iter().map(|(_, t)| Some(*t)).collect(),
                    specs: items.into_iter().map(|(s, _)| s).collect(),
                    odometry,
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5E0));
        for i in 0..sequences.count {
            let env = i % NUM_ENVS;
            let seq = approach_sequence(env_seed(seed, env), sequences.length, period, baseline, &mut rng);
            let odometry = seq
                .velocities
                .iter()
                .enumerate()
                .map(|(k, v)| OdometryEntry {
                    frame_index: k,
                    timestamp_s: k as f64 * period,
                    velocity_mps: Some(*v),
                })
                .collect();
            sessions.push(PlannedSession {
                env: env_name(env),
                session: format!("seq_{i:03}"),
                kind: SessionKind::Sequence,
                hand_labels: vec![None; seq.specs.len()],
                specs: seq.specs,
                odometry,
            });
        }

        let train_envs = split.envs_in(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xD21));
        let mut remaining = drive_frames;
        let mut k = 0;
        while remaining > 0 {
            let len = remaining.min(DRIVE_SESSION_LEN);
            let env = train_envs[k % train_envs.len()];
            let es = env_seed(seed, env_index(env));
            let mut specs = Vec::with_capacity(len);
            let mut odometry = Vec::with_capacity(len);
            let mut pause = 0;
            for i in 0..len {
                specs.push(random_scene(es, true, baseline, &mut rng));
                if pause == 0 && rng.random::<f64>() < 0.01 {
                    pause = 4;
                }
                let v = if pause > 0 {
                    pause -= 1;
                    0.0
                } else {
                    rng.random_range(0.35..0.65)
                };
                odometry.push(OdometryEntry {
                    frame_index: i,
                    timestamp_s: i as f64 * period,
                    velocity_mps: Some(v),
                });
            }
            sessions.push(PlannedSession {
                env: env.to_string(),
                session: format!("drive_{k:03}"),
                kind: SessionKind::Drive,
                hand_labels: vec![None; len],
                specs,
                odometry,
            });
            remaining -= len;
            k += 1;
        }

        let mut c = BTreeMap::new();
        for (name, v) in [
            ("train_pos", counts.train_pos),
            ("train_neg", counts.train_neg),
            ("val_pos", counts.val_pos),
            ("val_neg", counts.val_neg),
            ("test_pos", counts.test_pos),
            ("test_neg", counts.test_neg),
            ("sequences", sequences.count),
            ("sequence_length", sequences.length),
            ("drive_frames", drive_frames),
        ] {
            c.insert(name.to_string(), v);
        }
        c.insert(
            "frames".into(),
            sessions.iter().map(|s| s.specs.len()).sum(),
        );
        Ok(Self {
            seed,
            stereo: stereo_baseline_px.is_some(),
            split,
            sessions,
            counts: c,
        })
    }

    /// Scripted scenarios staged in the test environments.
    pub fn scenarios(&self, baseline_px: u32) -> Vec<Scenario> {
        let seeds: Vec<u64> = self
            .split
            .envs_in(Split::Test)
            .iter()
            .map(|e| env_seed(self.seed, env_index(e)))
            .collect();
        scripted_scenarios(&seeds, baseline_px)
    }

    pub fn render_spec(&self, spec: &SceneSpec) -> Result<ndarray::Array3<f32>, SynthError> {
        Ok(if self.stereo {
            render_stereo(spec)?.pixels
        } else {
            render(spec)?.pixels
        })
    }
}

/// Renders a dataset plan into the on-disk layout.
#[allow(clippy::too_many_arguments)]
pub fn make_dataset(
    out: &Path,
    seed: u64,
    counts: &DatasetCounts,
    sequences: &SequenceSpec,
    drive_frames: usize,
    stereo_baseline_px: Option<u32>,
) -> Result<Manifest, SynthError> {
    let plan = DatasetPlan::build(seed, counts, sequences, drive_frames, stereo_baseline_px)?;
    let mut writer = DatasetWriter::create(out, plan.stereo)?;
    for s in &plan.sessions {
        let frames = s
            .specs
            .iter()
            .map(|spec| plan.render_spec(spec))
            .collect::<Result<Vec<_>, _>>()?;
        writer.write_session(&s.env, &s.session, s.kind, &frames, &s.odometry)?;
        for (i, (spec, hand)) in s.specs.iter().zip(&s.hand_labels).enumerate() {
            writer.add_truth(&s.env, &s.session, i, spec.traversable());
            if let Some(t) = hand {
                writer.add_label(LabelRow {
                    env: s.env.clone(),
                    session: s.session.clone(),
                    frame_index: i,
                    label: if *t { 1.0 } else { 0.0 },
                    provenance: Provenance::Hand,
                });
            }
        }
    }
    Ok(writer.finish(seed, plan.counts, plan.split)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts_are_exact() {
        let counts = DatasetCounts { train_pos: 200, train_neg: 200, val_pos: 100, val_neg: 100, test_pos: 200, test_neg: 200 };
        let seqs = SequenceSpec { count: 20, length: 30, frame_period_s: 1.0 / 3.0 };
        let plan = DatasetPlan::build(5, &counts, &seqs, 0, None).unwrap();
        let labeled: Vec<bool> = plan
            .sessions
            .iter()
            .flat_map(|s| s.hand_labels.iter().flatten().copied())
            .collect();
        assert_eq!(labeled.len(), 1000);
        assert_eq!(labeled.iter().filter(|t| **t).count(), 500);
        let seq_frames: Vec<&PlannedSession> = plan.sessions.iter().filter(|s| s.kind == SessionKind::Sequence).collect();
        assert_eq!(seq_frames.len(), 20);
        assert_eq!(seq_frames.iter().map(|s| s.specs.len()).sum::<usize>(), 600);
        for s in &seq_frames {
            for w in s.odometry.windows(2) {
                assert!((w[1].timestamp_s - w[0].timestamp_s - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        // hand labels agree with the scene label rule
        for s in &plan.sessions {
            for (spec, h) in s.specs.iter().zip(&s.hand_labels) {
                if let Some(h) = h {
                    assert_eq!(*h, spec.traversable());
                }
            }
        }
    }

    #[test]
    fn sequence_labels_flip_at_most_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..40 {
            let seq = approach_sequence(7 << 32, 30, 1.0 / 3.0, 0, &mut rng);
            let labels = seq.labels();
            let flips = labels.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(flips <= 1);
            if flips == 1 {
                assert!(labels[0] && !labels[29]);
            }
            let d: Vec<f64> = seq.specs.iter().map(|s| s.obstacle.unwrap().distance).collect();
            assert!(d.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn empty_count_rejected() {
        let mut counts = DatasetCounts { train_pos: 1, train_neg: 1, val_pos: 1, val_neg: 1, test_pos: 1, test_neg: 1 };
        counts.val_neg = 0;
        let seqs = SequenceSpec { count: 0, length: 0, frame_period_s: 1.0 };
        assert!(matches!(
            DatasetPlan::build(0, &counts, &seqs, 0, None),
            Err(SynthError::EmptyCount("val_neg"))
        ));
    }
}

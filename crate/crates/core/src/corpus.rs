//! In-memory dataset at model resolution, built from a generation plan or
//! read back from the on-disk layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::layout::{load_frame, read_labels, read_odometry, read_truth, Manifest, SessionKind, LABELS};
use crate::dataset::{
    auto_annotate_sessions, downsample, AutoAnnotation, DatasetError, OdometryEntry, Provenance, SessionLog,
    Split, SplitAssignment, AUTO_MIN_VELOCITY, AUTO_WINDOW_S,
};
use crate::synthworld::{DatasetPlan, SynthError};

/// Identifies one frame of one session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub env: String,
    pub session: String,
    pub index: usize,
}

impl FrameKey {
    pub fn new(env: &str, session: &str, index: usize) -> Self {
        Self {
            env: env.into(),
            session: session.into(),
            index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSession {
    pub env: String,
    pub session: String,
    pub kind: SessionKind,
    /// `[n, S, S]` frames at model resolution.
    pub frames: Vec<Array3<f32>>,
    pub odometry: Vec<OdometryEntry>,
    /// Ground truth where known (generated data); never used for training.
    pub truth: Vec<Option<bool>>,
}

impl CorpusSession {
    pub fn log(&self) -> SessionLog {
        SessionLog {
            env: self.env.clone(),
            session: self.session.clone(),
            entries: self.odometry.clone(),
        }
    }

    pub fn key(&self, index: usize) -> FrameKey {
        FrameKey::new(&self.env, &self.session, index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub image_size: usize,
    pub channels: usize,
    pub split: SplitAssignment,
    pub sessions: Vec<CorpusSession>,
    /// Hand labels: frame → traversable.
    pub hand: BTreeMap<FrameKey, bool>,
}

fn reduce(px: &Array3<f32>, channels: usize, size: usize) -> Array3<f32> {
    let view = px.slice(s![0..channels, .., ..]).to_owned();
    downsample(&view, size)
}

impl Corpus {
    /// Renders every planned frame. `channels` is 3 (left view) or 6 (needs a
    /// stereo plan).
    pub fn from_plan(plan: &DatasetPlan, image_size: usize, channels: usize) -> Result<Self, SynthError> {
        let stereo_needed = channels == 6;
        if stereo_needed && !plan.stereo {
            return Err(SynthError::OutOfRange {
                field: "stereo_baseline_px",
                value: f64::NAN,
            });
        }
        let mut hand = BTreeMap::new();
        let mut sessions = Vec::with_capacity(plan.sessions.len());
        for ps in &plan.sessions {
            let mut frames = Vec::with_capacity(ps.specs.len());
            for spec in &ps.specs {
                let px = plan.render_spec(spec)?;
                frames.push(reduce(&px, channels, image_size));
            }
            for (i, h) in ps.hand_labels.iter().enumerate() {
                if let Some(t) = h {
                    hand.insert(FrameKey::new(&ps.env, &ps.session, i), *t);
                }
            }
            sessions.push(CorpusSession {
                env: ps.env.clone(),
                session: ps.session.clone(),
                kind: ps.kind,
                frames,
                odometry: ps.odometry.clone(),
                truth: ps.specs.iter().map(|s| Some(s.traversable())).collect(),
            });
        }
        Ok(Self {
            image_size,
            channels,
            split: plan.split.clone(),
            sessions,
            hand,
        })
    }

    /// Reads a dataset directory. Only hand labels are taken from
    /// `labels.csv`; `truth.csv` is attached when present.
    pub fn load(root: &Path, image_size: usize, channels: usize) -> Result<Self, DatasetError> {
        let manifest = Manifest::read(root)?;
        if channels == 6 && !manifest.stereo {
            return Err(DatasetError::Config("6-channel models need a stereo dataset".into()));
        }
        if channels != 3 && channels != 6 {
            return Err(DatasetError::Config(format!("unsupported channel count {channels}")));
        }
        let truth = if root.join(crate::dataset::layout::TRUTH).exists() {
            read_truth(root)?
        } else {
            BTreeMap::new()
        };
        let mut sessions = Vec::with_capacity(manifest.sessions.len());
        for meta in &manifest.sessions {
            let log = read_odometry(root, &meta.env, &meta.session)?;
            let mut frames = Vec::with_capacity(meta.frames);
            let mut t = Vec::with_capacity(meta.frames);
            for i in 0..meta.frames {
                let f = load_frame(root, manifest.stereo, &meta.env, &meta.session, i)?;
                frames.push(reduce(&f.pixels, channels, image_size));
                t.push(truth.get(&(meta.env.clone(), meta.session.clone(), i)).copied());
            }
            sessions.push(CorpusSession {
                env: meta.env.clone(),
                session: meta.session.clone(),
                kind: meta.kind,
                frames,
                odometry: log.entries,
                truth: t,
            });
        }
        let mut hand = BTreeMap::new();
        for row in read_labels(&root.join(LABELS))? {
            if row.provenance == Provenance::Hand {
                hand.insert(FrameKey::new(&row.env, &row.session, row.frame_index), row.label >= 0.5);
            }
        }
        Ok(Self {
            image_size,
            channels,
            split: manifest.split,
            sessions,
            hand,
        })
    }

    /// Same corpus restricted to the first three (left) channels.
    pub fn mono(&self) -> Self {
        let mut c = self.clone();
        c.channels = 3;
        for s in &mut c.sessions {
            for f in &mut s.frames {
                *f = f.slice(s![0..3, .., ..]).to_owned();
            }
        }
        c
    }

    pub fn session(&self, env: &str, session: &str) -> Option<&CorpusSession> {
        self.sessions.iter().find(|s| s.env == env && s.session == session)
    }

    pub fn frame(&self, key: &FrameKey) -> &Array3<f32> {
        &self
            .session(&key.env, &key.session)
            .unwrap_or_else(|| panic!("unknown session {}/{}", key.env, key.session))
            .frames[key.index]
    }

    pub fn truth(&self, key: &FrameKey) -> Option<bool> {
        self.session(&key.env, &key.session)
            .and_then(|s| s.truth.get(key.index).copied().flatten())
    }

    pub fn sessions_in(&self, split: Split) -> impl Iterator<Item = &CorpusSession> {
        self.sessions
            .iter()
            .filter(move |s| self.split.split_of(&s.env) == Some(split))
    }

    /// Velocity-based positives over every session of `split`.
    pub fn auto_positives(&self, split: Split) -> AutoAnnotation {
        let logs: Vec<SessionLog> = self.sessions_in(split).map(CorpusSession::log).collect();
        auto_annotate_sessions(&logs, AUTO_WINDOW_S, AUTO_MIN_VELOCITY)
    }

    /// Hand-labeled frames of `split` in key order.
    pub fn hand_labeled(&self, split: Split) -> Vec<(FrameKey, bool)> {
        self.hand
            .iter()
            .filter(|(k, _)| self.split.split_of(&k.env) == Some(split))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Frames of `split` that are neither auto-annotated nor hand-labeled:
    /// the robot was static or slow when they were recorded.
    pub fn unlabeled(&self, split: Split) -> Vec<FrameKey> {
        let auto: BTreeSet<FrameKey> = self
            .auto_positives(split)
            .positives
            .into_iter()
            .map(|(e, s, i, _)| FrameKey::new(&e, &s, i))
            .collect();
        let mut out = Vec::new();
        for s in self.sessions_in(split) {
            for i in 0..s.frames.len() {
                let k = s.key(i);
                if !auto.contains(&k) && !self.hand.contains_key(&k) {
                    out.push(k);
                }
            }
        }
        out
    }

    /// Sequence sessions of `split`.
    pub fn sequences(&self, split: Split) -> Vec<&CorpusSession> {
        self.sessions_in(split)
            .filter(|s| s.kind == SessionKind::Sequence)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{DatasetCounts, SequenceSpec};

    fn plan() -> DatasetPlan {
        let counts = DatasetCounts { train_pos: 6, train_neg: 6, val_pos: 3, val_neg: 3, test_pos: 3, test_neg: 3 };
        let seqs = SequenceSpec { count: 15, length: 30, frame_period_s: 1.0 / 3.0 };
        DatasetPlan::build(3, &counts, &seqs, 120, Some(4)).unwrap()
    }

    #[test]
    fn plan_and_disk_agree() {
        let p = plan();
        let mem = Corpus::from_plan(&p, 32, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::synthworld::make_dataset(dir.path(), 3, &DatasetCounts { train_pos: 6, train_neg: 6, val_pos: 3, val_neg: 3, test_pos: 3, test_neg: 3 }, &SequenceSpec { count: 15, length: 30, frame_period_s: 1.0 / 3.0 }, 120, Some(4)).unwrap();
        let disk = Corpus::load(dir.path(), 32, 6).unwrap();
        assert_eq!(mem.hand, disk.hand);
        assert_eq!(mem.sessions.len(), disk.sessions.len());
        for (a, b) in mem.sessions.iter().zip(&disk.sessions) {
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.odometry.len(), b.odometry.len());
            // 8-bit quantization bounds the difference after box filtering
            let err = a.frames[0].iter().zip(b.frames[0].iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(err < 0.01, "{err}");
        }
        assert_eq!(mem.mono().sessions[0].frames[0].shape(), &[3, 32, 32]);
    }

    #[test]
    fn annotation_partitions_frames() {
        let c = Corpus::from_plan(&plan(), 16, 3).unwrap();
        for split in Split::ALL {
            let auto = c.auto_positives(split).positives.len();
            let hand = c.hand_labeled(split).len();
            let unl = c.unlabeled(split).len();
            let total: usize = c.sessions_in(split).map(|s| s.frames.len()).sum();
            assert_eq!(auto + hand + unl, total);
        }
        assert!(!c.unlabeled(Split::Train).is_empty());
        assert!(c.auto_positives(Split::Train).positives.len() > 50);
    }
}

//! Soft labels for frames recorded while the robot was static or slow, and
//! the drift measure ε between two models over those frames.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FrameKey};
use crate::dataset::layout::LabelRow;
use crate::dataset::{DatasetError, Provenance};
use crate::heads::SequencePredictor;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reannotation {
    /// One `model_reannotated` row per frame of `U`, in input order.
    pub labels: Vec<LabelRow>,
    /// Hand-labeled frames found in `U` and left untouched.
    pub skipped: Vec<FrameKey>,
}

impl Reannotation {
    pub fn warnings(&self) -> Vec<String> {
        self.skipped
            .iter()
            .map(|k| format!("{}/{} frame {} is hand-labeled; keeping the hand label", k.env, k.session, k.index))
            .collect()
    }

    pub fn soft_labels(&self) -> BTreeMap<FrameKey, f64> {
        self.labels
            .iter()
            .map(|r| (FrameKey::new(&r.env, &r.session, r.frame_index), r.label))
            .collect()
    }
}

/// Model probabilities for `keys`, batched per session so temporal models
/// would see frames in order. Single-frame models are order-insensitive.
fn predict(corpus: &Corpus, keys: &[FrameKey], model: &dyn SequencePredictor) -> Vec<f64> {
    let frames: Vec<_> = keys.iter().map(|k| corpus.frame(k).clone()).collect();
    let mut out = Vec::with_capacity(keys.len());
    for chunk in frames.chunks(256) {
        out.extend(model.predict_sequence(chunk));
    }
    out
}

/// Labels every frame of `unlabeled` with the model's probability.
pub fn reannotate(corpus: &Corpus, unlabeled: &[FrameKey], model: &dyn SequencePredictor) -> Reannotation {
    let (skipped, keep): (Vec<FrameKey>, Vec<FrameKey>) =
        unlabeled.iter().cloned().partition(|k| corpus.hand.contains_key(k));
    let probs = predict(corpus, &keep, model);
    let labels = keep
        .iter()
        .zip(probs)
        .map(|(k, p)| LabelRow {
            env: k.env.clone(),
            session: k.session.clone(),
            frame_index: k.index,
            label: p.clamp(0.0, 1.0),
            provenance: Provenance::ModelReannotated,
        })
        .collect();
    Reannotation { labels, skipped }
}

/// `(1/|U|)·Σ|P(i) − P′(i)|`; zero for an empty set.
pub fn epsilon(before: &[f64], after: &[f64]) -> f64 {
    assert_eq!(before.len(), after.len(), "epsilon: prediction sets differ in size");
    if before.is_empty() {
        return 0.0;
    }
    before.iter().zip(after).map(|(a, b)| (a - b).abs()).sum::<f64>() / before.len() as f64
}

/// Counts of values in `[0, 0.1), …, [0.9, 1.0]`.
pub fn histogram(values: &[f64]) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReannotationReport {
    pub num_unlabeled: usize,
    pub epsilon: f64,
    /// Assigned probabilities of the model before retraining, in ten bins.
    pub histogram: Vec<usize>,
    pub model_before: String,
    pub model_after: String,
    /// Which labels the retrained model saw.
    pub retrain_data: String,
}

impl ReannotationReport {
    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })
    }
}

/// Mean absolute prediction change over `unlabeled` between two models of
/// the same architecture. `versions` name the models (e.g. checksums).
pub fn epsilon_drift(
    corpus: &Corpus,
    unlabeled: &[FrameKey],
    before: &dyn SequencePredictor,
    after: &dyn SequencePredictor,
    versions: (&str, &str),
    retrain_data: &str,
) -> ReannotationReport {
    let p = predict(corpus, unlabeled, before);
    let q = predict(corpus, unlabeled, after);
    ReannotationReport {
        num_unlabeled: unlabeled.len(),
        epsilon: epsilon(&p, &q),
        histogram: histogram(&p),
        model_before: versions.0.into(),
        model_after: versions.1.into(),
        retrain_data: retrain_data.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, SplitAssignment};
    use crate::dataset::layout::SessionKind;
    use crate::corpus::CorpusSession;
    use ndarray::Array3;
    use proptest::prelude::*;

    struct Const(f64);

    impl SequencePredictor for Const {
        fn predict_sequence(&self, frames: &[Array3<f32>]) -> Vec<f64> {
            vec![self.0; frames.len()]
        }
    }

    /// Probability read from the first pixel, so labels depend on the frame.
    struct Pixel;

    impl SequencePredictor for Pixel {
        fn predict_sequence(&self, frames: &[Array3<f32>]) -> Vec<f64> {
            frames.iter().map(|f| f[[0, 0, 0]] as f64).collect()
        }
    }

    fn corpus() -> Corpus {
        let frames = (0..6).map(|i| Array3::from_elem((3, 2, 2), i as f32 / 6.0)).collect();
        let mut split = SplitAssignment::default();
        split.envs.insert("env_00".into(), Split::Train);
        let mut hand = BTreeMap::new();
        hand.insert(FrameKey::new("env_00", "s", 2), false);
        Corpus {
            image_size: 2,
            channels: 3,
            split,
            sessions: vec![CorpusSession {
                env: "env_00".into(),
                session: "s".into(),
                kind: SessionKind::Sequence,
                frames,
                odometry: vec![],
                truth: vec![None; 6],
            }],
            hand,
        }
    }

    fn keys() -> Vec<FrameKey> {
        (0..6).map(|i| FrameKey::new("env_00", "s", i)).collect()
    }

    #[test]
    fn empty_set_gives_empty_output() {
        let c = corpus();
        assert_eq!(reannotate(&c, &[], &Const(0.3)), Reannotation::default());
        let r = epsilon_drift(&c, &[], &Const(0.0), &Const(1.0), ("a", "b"), "hand+soft");
        assert_eq!((r.num_unlabeled, r.epsilon), (0, 0.0));
    }

    #[test]
    fn probability_passes_through_and_hand_labels_are_kept() {
        let c = corpus();
        let r = reannotate(&c, &keys(), &Const(0.93));
        assert_eq!(r.labels.len(), 5);
        assert!(r.labels.iter().all(|l| l.label == 0.93 && l.provenance == Provenance::ModelReannotated));
        assert_eq!(r.skipped, vec![FrameKey::new("env_00", "s", 2)]);
        assert_eq!(r.warnings().len(), 1);
        assert!(!r.soft_labels().contains_key(&FrameKey::new("env_00", "s", 2)));
    }

    #[test]
    fn reannotation_is_idempotent() {
        let c = corpus();
        assert_eq!(reannotate(&c, &keys(), &Pixel), reannotate(&c, &keys(), &Pixel));
    }

    #[test]
    fn extreme_and_identical_models() {
        let c = corpus();
        let r = epsilon_drift(&c, &keys(), &Const(0.0), &Const(1.0), ("0", "1"), "hand+soft");
        assert_eq!(r.epsilon, 1.0);
        assert_eq!(r.histogram[0], 6);
        let r = epsilon_drift(&c, &keys(), &Pixel, &Pixel, ("p", "p"), "hand+soft");
        assert_eq!(r.epsilon, 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ReannotationReport>(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn epsilon_is_symmetric_and_bounded(v in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..50)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let e = epsilon(&a, &b);
            prop_assert_eq!(e, epsilon(&b, &a));
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn histogram_counts_every_value(v in prop::collection::vec(0.0f64..=1.0, 0..100)) {
            prop_assert_eq!(histogram(&v).iter().sum::<usize>(), v.len());
        }
    }
}

//! Data assembly shared by the command-line driver and the end-to-end tests:
//! which frames feed each training stage and how test sets are built.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, FrameKey};
use crate::dataset::{downsample, Split};
use crate::eval::{LabeledFeatures, TestSequence};
use crate::heads::{
    train_head, train_temporal_head, FeatureBatch, FeatureExtractor, FeatureSubset, GonetHead, HeadConfig,
    HeadModel, LabeledSequence, Pipeline, TemporalConfig, TemporalHead,
};
use crate::synthworld::{DatasetPlan, SynthError};
use crate::train::TrainError;

/// Soft labels keyed by frame, as produced by re-annotation.
pub type SoftLabels = BTreeMap<FrameKey, f64>;

pub fn frames_of(corpus: &Corpus, keys: &[FrameKey]) -> Vec<Array3<f32>> {
    keys.iter().map(|k| corpus.frame(k).clone()).collect()
}

/// Up to `max` automatically annotated training positives, evenly spaced
/// over the annotation order.
pub fn gan_positives(corpus: &Corpus, max: usize) -> Vec<Array3<f32>> {
    let keys: Vec<FrameKey> = corpus
        .auto_positives(Split::Train)
        .positives
        .into_iter()
        .map(|(e, s, i, _)| FrameKey::new(&e, &s, i))
        .collect();
    let n = keys.len().min(max);
    (0..n).map(|i| corpus.frame(&keys[i * keys.len() / n]).clone()).collect()
}

/// Hand-labeled frames of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct HandSet {
    pub keys: Vec<FrameKey>,
    pub frames: Vec<Array3<f32>>,
    pub labels: Vec<bool>,
}

impl HandSet {
    pub fn of(corpus: &Corpus, split: Split) -> Self {
        let (keys, labels): (Vec<_>, Vec<_>) = corpus.hand_labeled(split).into_iter().unzip();
        Self { frames: frames_of(corpus, &keys), keys, labels }
    }

    pub fn positives(&self) -> Vec<Array3<f32>> {
        self.class(true)
    }

    pub fn negatives(&self) -> Vec<Array3<f32>> {
        self.class(false)
    }

    fn class(&self, c: bool) -> Vec<Array3<f32>> {
        self.frames.iter().zip(&self.labels).filter(|(_, l)| **l == c).map(|(f, _)| f.clone()).collect()
    }

    pub fn features(&self, extractor: &FeatureExtractor<f32>) -> LabeledFeatures<f32> {
        LabeledFeatures { features: extractor.extract(&self.frames), labels: self.labels.clone() }
    }

    /// Each frame as its own one-frame test sequence.
    pub fn as_sequences(&self) -> Vec<TestSequence> {
        self.keys
            .iter()
            .zip(&self.frames)
            .zip(&self.labels)
            .map(|((k, f), l)| TestSequence {
                name: format!("{}/{}/{}", k.env, k.session, k.index),
                frames: vec![f.clone()],
                labels: vec![*l],
            })
            .collect()
    }
}

/// Sequence sessions of `split` with their ground-truth labels.
pub fn test_sequences(corpus: &Corpus, split: Split) -> Vec<TestSequence> {
    corpus
        .sequences(split)
        .into_iter()
        .filter_map(|s| {
            let labels: Option<Vec<bool>> = s.truth.iter().copied().collect();
            labels.map(|labels| TestSequence {
                name: format!("{}/{}", s.env, s.session),
                frames: s.frames.clone(),
                labels,
            })
        })
        .collect()
}

/// Scripted glare and shadow scenarios in the test environments, at model
/// resolution with `channels` channels.
pub fn scenario_sequences(
    plan: &DatasetPlan,
    image_size: usize,
    channels: usize,
    baseline_px: u32,
) -> Result<Vec<TestSequence>, SynthError> {
    plan.scenarios(baseline_px)
        .into_iter()
        .map(|sc| {
            let labels = sc.labels();
            let frames = sc
                .specs
                .iter()
                .map(|spec| {
                    let px = plan.render_spec(spec)?;
                    Ok(downsample(&px.slice(s![0..channels, .., ..]).to_owned(), image_size))
                })
                .collect::<Result<Vec<_>, SynthError>>()?;
            Ok(TestSequence { name: sc.name, frames, labels })
        })
        .collect()
}

/// Frames the temporal head learns from: every sequence session of `split`
/// cut into runs of frames that carry a label (automatic positive or soft
/// label), plus every hand-labeled frame as a one-frame sequence.
pub fn temporal_set(
    corpus: &Corpus,
    extractor: &FeatureExtractor<f32>,
    split: Split,
    soft: &SoftLabels,
) -> Vec<LabeledSequence<f32>> {
    let auto: BTreeSet<FrameKey> = corpus
        .auto_positives(split)
        .positives
        .into_iter()
        .map(|(e, s, i, _)| FrameKey::new(&e, &s, i))
        .collect();
    let mut out = Vec::new();
    for session in corpus.sequences(split) {
        let labels: Vec<Option<f64>> = (0..session.frames.len())
            .map(|i| {
                let k = session.key(i);
                if auto.contains(&k) {
                    Some(1.0)
                } else if let Some(&h) = corpus.hand.get(&k) {
                    Some(if h { 1.0 } else { 0.0 })
                } else {
                    soft.get(&k).copied()
                }
            })
            .collect();
        let feats = extractor.extract(&session.frames);
        let mut start = 0;
        while start < labels.len() {
            if labels[start].is_none() {
                start += 1;
                continue;
            }
            let end = (start..labels.len()).find(|&i| labels[i].is_none()).unwrap_or(labels.len());
            out.push(LabeledSequence {
                features: feats.range(start, end),
                labels: labels[start..end].iter().map(|l| l.unwrap_or_default()).collect(),
            });
            start = end;
        }
    }
    let hand = HandSet::of(corpus, split).features(extractor);
    for i in 0..hand.labels.len() {
        out.push(LabeledSequence {
            features: hand.features.range(i, i + 1),
            labels: vec![if hand.labels[i] { 1.0 } else { 0.0 }],
        });
    }
    out
}

/// Trains a single-frame head over `subset` and wraps it with `extractor`.
pub fn fit_single(
    extractor: &FeatureExtractor<f32>,
    subset: FeatureSubset,
    train: (&FeatureBatch<f32>, &[f64]),
    val: &LabeledFeatures<f32>,
    cfg: &HeadConfig,
) -> Result<Pipeline<f32>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = GonetHead::new(subset, extractor.dims(), &mut rng);
    let out = train_head(head, train.0, train.1, &val.features, &val.soft_labels(), cfg)?;
    Pipeline::new(extractor.clone(), HeadModel::Single(out.head))
}

/// Trains a temporal head over all three features.
pub fn fit_temporal(
    extractor: &FeatureExtractor<f32>,
    train: &[LabeledSequence<f32>],
    val: &[LabeledSequence<f32>],
    cfg: &TemporalConfig,
) -> Result<Pipeline<f32>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = TemporalHead::new(FeatureSubset::ALL, extractor.dims(), cfg.hidden, &mut rng);
    let out = train_temporal_head(head, train, val, cfg)?;
    Pipeline::new(extractor.clone(), HeadModel::Temporal(out.head))
}

/// Hand-labeled training features followed by re-annotated frames of
/// `keys` with their soft labels.
pub fn with_soft_labels(
    corpus: &Corpus,
    extractor: &FeatureExtractor<f32>,
    hand: &LabeledFeatures<f32>,
    soft: &SoftLabels,
) -> (FeatureBatch<f32>, Vec<f64>) {
    let keys: Vec<FrameKey> = soft.keys().cloned().collect();
    let extra = extractor.extract(&frames_of(corpus, &keys));
    let features = FeatureBatch::concat(&[&hand.features, &extra]);
    let mut labels = hand.soft_labels();
    labels.extend(soft.values());
    (features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcgan::{ArchConfig, Discriminator, Generator};
    use crate::invgen::InvGenerator;
    use crate::synthworld::{DatasetCounts, SequenceSpec};

    fn setup() -> (DatasetPlan, Corpus, FeatureExtractor<f32>) {
        let counts = DatasetCounts { train_pos: 6, train_neg: 6, val_pos: 2, val_neg: 2, test_pos: 2, test_neg: 2 };
        let seqs = SequenceSpec { count: 15, length: 20, frame_period_s: 1.0 / 3.0 };
        let plan = DatasetPlan::build(5, &counts, &seqs, 60, None).unwrap();
        let corpus = Corpus::from_plan(&plan, 16, 3).unwrap();
        let arch = ArchConfig::reduced(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = FeatureExtractor::new(
            Generator::new(arch, &mut rng),
            Discriminator::new(arch, &mut rng),
            InvGenerator::new(arch, &mut rng),
        )
        .unwrap();
        (plan, corpus, ex)
    }

    #[test]
    fn temporal_runs_skip_unlabeled_frames() {
        let (_, corpus, ex) = setup();
        let none = temporal_set(&corpus, &ex, Split::Train, &SoftLabels::new());
        let all: SoftLabels = corpus.unlabeled(Split::Train).into_iter().map(|k| (k, 0.25)).collect();
        let full = temporal_set(&corpus, &ex, Split::Train, &all);
        let frames = |v: &[LabeledSequence<f32>]| v.iter().map(|s| s.labels.len()).sum::<usize>();
        let seq_frames: usize = corpus.sequences(Split::Train).iter().map(|s| s.frames.len()).sum();
        let hand = corpus.hand_labeled(Split::Train).len();
        // with every gap filled each session is one run
        assert_eq!(frames(&full), seq_frames + hand);
        assert_eq!(full.len(), corpus.sequences(Split::Train).len() + hand);
        assert!(frames(&none) < frames(&full));
        assert!(none.iter().all(|s| s.features.len() == s.labels.len()));
        assert!(full.iter().flat_map(|s| &s.labels).any(|&y| y == 0.25));
    }

    #[test]
    fn positives_are_spread_and_capped() {
        let (plan, corpus, _) = setup();
        let p = gan_positives(&corpus, 10);
        assert_eq!(p.len(), 10);
        assert!(gan_positives(&corpus, usize::MAX).len() > 10);
        let sc = scenario_sequences(&plan, 16, 3, 0).unwrap();
        assert!(sc.iter().all(|s| s.frames.len() == s.labels.len() && s.frames[0].shape() == [3, 16, 16]));
        let t = test_sequences(&corpus, Split::Test);
        assert!(!t.is_empty());
        assert_eq!(HandSet::of(&corpus, Split::Test).as_sequences().len(), 4);
    }
}

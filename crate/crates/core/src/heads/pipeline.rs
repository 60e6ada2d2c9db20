use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::{FeatureBatch, FeatureExtractor, FeatureSubset};
use super::gonet::GonetHead;
use super::temporal::{TemporalHead, TemporalState};
use crate::checkpoint::{Checkpoint, CheckpointError, HeadKind, Stage};
use crate::dcgan::{Discriminator, Generator};
use crate::invgen::InvGenerator;
use crate::scalar::Scalar;
use crate::train::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub enum HeadModel<T> {
    Single(GonetHead<T>),
    Temporal(TemporalHead<T>),
}

impl<T: Scalar> HeadModel<T> {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            HeadModel::Single(h) => h.dims,
            HeadModel::Temporal(h) => h.dims,
        }
    }

    pub fn subset(&self) -> FeatureSubset {
        match self {
            HeadModel::Single(h) => h.subset,
            HeadModel::Temporal(h) => h.subset,
        }
    }

    pub fn params(&self) -> &crate::nn::ParamSet<T> {
        match self {
            HeadModel::Single(h) => &h.params,
            HeadModel::Temporal(h) => &h.params,
        }
    }
}

/// Anything that maps an ordered frame sequence to per-frame
/// traversability probabilities.
pub trait SequencePredictor {
    fn predict_sequence(&self, frames: &[Array3<f32>]) -> Vec<f64>;
}

/// Frozen feature extraction followed by a trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: HeadModel<T>,
}

/// Per-stream inference state.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T> {
    temporal: Option<TemporalState<T>>,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(extractor: FeatureExtractor<T>, head: HeadModel<T>) -> Result<Self, TrainError> {
        if extractor.dims() != head.dims() {
            return Err(TrainError::Config(format!(
                "head expects feature widths {:?} but the extractor produces {:?}",
                head.dims(),
                extractor.dims()
            )));
        }
        Ok(Self { extractor, head })
    }

    pub fn kind(&self) -> HeadKind {
        match (&self.head, self.extractor.channels()) {
            (HeadModel::Single(_), _) => HeadKind::Single,
            (HeadModel::Temporal(_), 6) => HeadKind::StereoTemporal,
            (HeadModel::Temporal(_), _) => HeadKind::Temporal,
        }
    }

    pub fn channels(&self) -> usize {
        self.extractor.channels()
    }

    /// Predictions for an ordered feature sequence; frames are independent
    /// for a single-frame head.
    pub fn predict_features(&self, seq: &FeatureBatch<T>) -> Vec<f64> {
        match &self.head {
            HeadModel::Single(h) => h.predict(seq).iter().map(|p| p.as_f64()).collect(),
            HeadModel::Temporal(h) => h.forward_sequence(seq).iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn predict_frames(&self, frames: &[Array3<T>]) -> Vec<f64> {
        self.predict_features(&self.extractor.extract(frames))
    }

    pub fn start_stream(&self) -> StreamState<T> {
        StreamState {
            temporal: match &self.head {
                HeadModel::Temporal(h) => Some(h.initial_state()),
                HeadModel::Single(_) => None,
            },
        }
    }

    pub fn push_frame(&self, state: &mut StreamState<T>, frame: &Array3<T>) -> f64 {
        let feats = self.extractor.extract_one(frame);
        match (&self.head, state.temporal.as_mut()) {
            (HeadModel::Single(h), _) => h.forward(&feats).as_f64(),
            (HeadModel::Temporal(h), Some(st)) => h.step(st, &feats).as_f64(),
            (HeadModel::Temporal(h), None) => {
                let mut st = h.initial_state();
                let p = h.step(&mut st, &feats).as_f64();
                state.temporal = Some(st);
                p
            }
        }
    }

    /// `∂p/∂I` for a single-frame head, through the inverse generator,
    /// generator and both discriminator passes. `None` for temporal heads.
    pub fn input_gradient(&self, image: &Array3<T>) -> Option<Array3<T>> {
        let HeadModel::Single(head) = &self.head else {
            return None;
        };
        let FeatureExtractor { gen, dis, inv } = &self.extractor;
        let x = image.clone().insert_axis(Axis(0)).into_dyn();
        let inv_tape = inv.forward(x.clone());
        let gen_tape = gen.forward(inv_tape.output().clone());
        let recon = gen_tape.output().clone();
        let tx = dis.forward_features(x.clone());
        let tr = dis.forward_features(recon.clone());
        let fx = tx.output().iter().copied().collect::<Vec<_>>();
        let fr = tr.output().iter().copied().collect::<Vec<_>>();
        let phi_r = (&x - &recon).mapv(T::abs).into_iter().collect();
        let phi_d = fx.iter().zip(&fr).map(|(a, b)| (*a - *b).abs()).collect();
        let triple = super::FeatureTriple {
            phi_r,
            phi_d,
            phi_f: fx.iter().copied().collect(),
        };
        let [g_r, g_d, g_f] = head.feature_gradients(&triple);
        let n = fx.len();
        let mut gfx = Array2::<T>::zeros((1, n));
        let mut gfr = Array2::<T>::zeros((1, n));
        for j in 0..n {
            let sd = sgn(fx[j] - fr[j]);
            gfx[[0, j]] = g_f[j] + sd * g_d[j];
            gfr[[0, j]] = -sd * g_d[j];
        }
        let mut dx = dis.backward_features(&tx, &gfx);
        let mut drecon = dis.backward_features(&tr, &gfr);
        for (k, ((a, b), g)) in x.iter().zip(recon.iter()).zip(g_r.iter()).enumerate() {
            let v = sgn(*a - *b) * *g;
            dx.as_slice_mut().expect("standard layout")[k] += v;
            drecon.as_slice_mut().expect("standard layout")[k] -= v;
        }
        let dz = gen.backward(&gen_tape, drecon, None);
        let dz: ArrayD<T> = dz.into_shape_with_order(inv_tape.output().raw_dim()).expect("latent shape");
        dx += &inv.net.backward(&inv.params, &inv_tape, inv.net.len(), dz, &[], None);
        Some(
            dx.index_axis_move(Axis(0), 0)
                .into_dimensionality()
                .expect("3-d image gradient"),
        )
    }

    /// Writes the feature nets and the head into one self-contained file.
    pub fn save(&self, path: &Path, seed: u64, train_config: serde_json::Value) -> Result<(), CheckpointError> {
        let hidden = match &self.head {
            HeadModel::Temporal(h) => Some(h.hidden),
            HeadModel::Single(_) => None,
        };
        let mut ck = Checkpoint::new(
            Stage::Head,
            self.extractor.gen.arch,
            seed,
            0,
            serde_json::json!({ "train": train_config, "hidden": hidden, "dims": self.head.dims() }),
        );
        ck.meta.head_kind = Some(self.kind());
        ck.meta.feature_subset = Some(self.head.subset().to_string());
        let e = &self.extractor;
        ck.add_group("gen", e.gen.net.describe(), &e.gen.params);
        ck.add_group("dis", e.dis.net.describe(), &e.dis.params);
        ck.add_group("invgen", e.inv.net.describe(), &e.inv.params);
        ck.add_group("head", vec![format!("{:?} head over {}", self.kind(), self.head.subset())], self.head.params());
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.meta.stage != Stage::Head {
            return Err(CheckpointError::Mismatch {
                field: "stage".into(),
                expected: "head".into(),
                found: ck.meta.stage.as_str().into(),
            });
        }
        let arch = ck.meta.arch;
        let extractor = FeatureExtractor {
            gen: Generator::from_params(arch, ck.group("gen")?.clone())?,
            dis: Discriminator::from_params(arch, ck.group("dis")?.clone())?,
            inv: InvGenerator::from_params(arch, ck.group("invgen")?.clone())?,
        };
        let bad = |what: &str, e: String| CheckpointError::Format { path: path.to_path_buf(), reason: format!("{what}: {e}") };
        let subset: FeatureSubset = ck
            .meta
            .feature_subset
            .as_deref()
            .ok_or_else(|| bad("feature_subset", "missing".into()))?
            .parse()
            .map_err(|e| bad("feature_subset", e))?;
        let dims = extractor.dims();
        let params = ck.group("head")?.clone();
        let head = match ck.meta.head_kind {
            Some(HeadKind::Single) => HeadModel::Single(
                GonetHead::zeroed(subset, dims)
                    .with_params(params)
                    .map_err(|e| bad("head", e))?,
            ),
            Some(HeadKind::Temporal | HeadKind::StereoTemporal) => {
                let hidden = ck.meta.config["hidden"]
                    .as_u64()
                    .ok_or_else(|| bad("hidden", "missing".into()))? as usize;
                let h = TemporalHead::new(subset, dims, hidden, &mut ChaCha8Rng::seed_from_u64(0));
                HeadModel::Temporal(h.with_params(params).map_err(|e| bad("head", e))?)
            }
            None => return Err(bad("head_kind", "missing".into())),
        };
        let p = Pipeline { extractor, head };
        if ck.meta.head_kind != Some(p.kind()) {
            return Err(bad("head_kind", "does not match the stored channel count".into()));
        }
        Ok(p)
    }
}

fn sgn<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl SequencePredictor for Pipeline<f32> {
    fn predict_sequence(&self, frames: &[Array3<f32>]) -> Vec<f64> {
        self.predict_frames(frames)
    }
}

/// GONet+TS: the temporal architecture over 6-channel stereo features.
pub fn build_stereo_pipeline<T: Scalar>(
    gen: Generator<T>,
    dis: Discriminator<T>,
    inv: InvGenerator<T>,
    head: TemporalHead<T>,
) -> Result<Pipeline<T>, TrainError> {
    for (name, c) in [("generator", gen.arch.channels), ("discriminator", dis.arch.channels), ("inverse generator", inv.arch.channels)] {
        if c != 6 {
            return Err(TrainError::Config(format!("stereo pipeline needs a 6-channel {name}, got {c}")));
        }
    }
    let extractor = FeatureExtractor::new(gen, dis, inv).map_err(TrainError::Config)?;
    Pipeline::new(extractor, HeadModel::Temporal(head))
}

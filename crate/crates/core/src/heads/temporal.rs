use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureBatch, FeatureSubset, FeatureTriple};
use crate::nn::{sigmoid, Adam, Lstm, LstmState, LstmStep, ParamSet};
use crate::scalar::Scalar;
use crate::train::{EarlyStopping, TrainError};

pub const REDUCED_DIM: usize = 10;
pub const DEFAULT_HIDDEN: usize = 32;

/// Per-feature linear reducers, an LSTM over their concatenation and a
/// sigmoid readout at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalHead<T> {
    pub subset: FeatureSubset,
    pub dims: [usize; 3],
    pub hidden: usize,
    pub params: ParamSet<T>,
    reducers: [Option<(usize, usize)>; 3],
    lstm: Lstm,
    out_w: usize,
    out_b: usize,
}

/// Recurrent state of one stream. Never share one between streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalState<T> {
    lstm: LstmState<T>,
}

struct SeqTape<T> {
    reduced: Array2<T>,
    steps: Vec<LstmStep<T>>,
    hs: Array2<T>,
    probs: Array1<T>,
}

impl<T: Scalar> TemporalHead<T> {
    pub fn new<R: Rng + ?Sized>(subset: FeatureSubset, dims: [usize; 3], hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut reducers = [None; 3];
        for f in subset.features() {
            let k = f.index();
            let w = params.push_normal(
                format!("{f:?}.reduce.w"),
                &[REDUCED_DIM, dims[k]],
                1.0 / (dims[k] as f64).sqrt(),
                rng,
            );
            let b = params.push_zeros(format!("{f:?}.reduce.b"), &[REDUCED_DIM]);
            reducers[k] = Some((w, b));
        }
        let lstm = Lstm::register(&mut params, "lstm", REDUCED_DIM * subset.len(), hidden, rng);
        let out_w = params.push_normal("out.w", &[hidden], 1.0 / (hidden as f64).sqrt(), rng);
        let out_b = params.push_zeros("out.b", &[1]);
        Self { subset, dims, hidden, params, reducers, lstm, out_w, out_b }
    }

    pub fn with_params(mut self, params: ParamSet<T>) -> Result<Self, String> {
        if !self.params.same_layout(&params) || self.params.names() != params.names() {
            return Err("temporal head parameters do not match its configuration".into());
        }
        self.params = params;
        Ok(self)
    }

    pub fn initial_state(&self) -> TemporalState<T> {
        TemporalState {
            lstm: LstmState::zeros(self.hidden),
        }
    }

    fn reduce(&self, seq: &FeatureBatch<T>) -> Array2<T> {
        let mut out = Array2::zeros((seq.len(), REDUCED_DIM * self.subset.len()));
        for (j, f) in self.subset.features().into_iter().enumerate() {
            let (w, b) = self.reducers[f.index()].expect("feature in subset");
            let w = self.params.get(w).view().into_dimensionality::<ndarray::Ix2>().expect("2-d");
            let b = self.params.get(b).view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
            let r = seq.get(f).dot(&w.t()) + b;
            out.slice_mut(s![.., j * REDUCED_DIM..(j + 1) * REDUCED_DIM]).assign(&r);
        }
        out
    }

    fn readout(&self, h: &Array1<T>) -> T {
        let w = self.params.get(self.out_w).view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        sigmoid(w.dot(h) + self.params.get(self.out_b)[[0]])
    }

    fn run(&self, seq: &FeatureBatch<T>) -> SeqTape<T> {
        let reduced = self.reduce(seq);
        let mut st = LstmState::zeros(self.hidden);
        let mut steps = Vec::with_capacity(seq.len());
        let mut hs = Array2::zeros((seq.len(), self.hidden));
        let mut probs = Array1::zeros(seq.len());
        for t in 0..seq.len() {
            steps.push(self.lstm.step(&self.params, reduced.row(t), &mut st));
            hs.row_mut(t).assign(&st.h);
            probs[t] = self.readout(&st.h);
        }
        SeqTape { reduced, steps, hs, probs }
    }

    /// One probability per timestep from a fresh state; `y′_t` depends only
    /// on rows `0..=t`.
    pub fn forward_sequence(&self, seq: &FeatureBatch<T>) -> Vec<T> {
        self.run(seq).probs.to_vec()
    }

    /// Streaming step: consumes one frame's features and advances `state`.
    pub fn step(&self, state: &mut TemporalState<T>, features: &FeatureTriple<T>) -> T {
        let one = FeatureBatch::from_triples(std::slice::from_ref(features));
        let r = self.reduce(&one);
        self.lstm.step(&self.params, r.row(0), &mut state.lstm);
        self.readout(&state.lstm.h)
    }

    /// Temporal loss of one sequence; parameter gradients accumulate into
    /// `grads` scaled by `weight`.
    pub fn sequence_loss(
        &self,
        seq: &FeatureBatch<T>,
        labels: &[f64],
        lambda: f64,
        weight: f64,
        grads: Option<&mut ParamSet<T>>,
    ) -> f64 {
        let tape = self.run(seq);
        let yp: Vec<f64> = tape.probs.iter().map(|p| p.as_f64()).collect();
        let loss = temporal_loss(labels, &yp, lambda);
        let Some(g) = grads else {
            return loss;
        };
        let dy = temporal_loss_grad(labels, &yp, lambda);
        let n = seq.len();
        let w_out = self.params.get(self.out_w).view().into_dimensionality::<ndarray::Ix1>().expect("1-d").to_owned();
        let mut dh = Array2::<T>::zeros((n, self.hidden));
        let mut dw_out = Array1::<T>::zeros(self.hidden);
        let mut db_out = T::zero();
        for t in 0..n {
            let p = tape.probs[t];
            let dl = T::lit(weight * dy[t]) * p * (T::one() - p);
            dw_out.scaled_add(dl, &tape.hs.row(t));
            db_out += dl;
            dh.row_mut(t).assign(&w_out.mapv(|v| v * dl));
        }
        *g.get_mut(self.out_w) += &dw_out.into_dyn();
        g.get_mut(self.out_b)[[0]] += db_out;
        let dx = self.lstm.backward(&self.params, &tape.steps, &dh, g);
        debug_assert_eq!(dx.ncols(), tape.reduced.ncols());
        for (j, f) in self.subset.features().into_iter().enumerate() {
            let (w, b) = self.reducers[f.index()].expect("feature in subset");
            let d = dx.slice(s![.., j * REDUCED_DIM..(j + 1) * REDUCED_DIM]);
            let dw = d.t().dot(seq.get(f));
            *g.get_mut(w) += &dw.into_dyn();
            *g.get_mut(b) += &d.sum_axis(ndarray::Axis(0)).into_dyn();
        }
        loss
    }
}

/// `λ·Σ|y_i − y′_i| + (1 − λ)·Σ|y′_{i+1} − y′_i|`.
///
/// # Panics
/// When the sequences differ in length.
pub fn temporal_loss(y: &[f64], y_pred: &[f64], lambda: f64) -> f64 {
    assert_eq!(y.len(), y_pred.len(), "temporal_loss: label and prediction lengths differ");
    let fit: f64 = y.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum();
    let smooth: f64 = y_pred.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    lambda * fit + (1.0 - lambda) * smooth
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`temporal_loss`] w.r.t. each prediction.
pub fn temporal_loss_grad(y: &[f64], y_pred: &[f64], lambda: f64) -> Vec<f64> {
    let n = y_pred.len();
    (0..n)
        .map(|t| {
            let mut g = lambda * sign(y_pred[t] - y[t]);
            if t > 0 {
                g += (1.0 - lambda) * sign(y_pred[t] - y_pred[t - 1]);
            }
            if t + 1 < n {
                g -= (1.0 - lambda) * sign(y_pred[t + 1] - y_pred[t]);
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub max_epochs: usize,
    /// Sequences per parameter update.
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub lambda: f64,
    pub hidden: usize,
    /// Stored sequences are cut into windows of this many frames.
    pub window: usize,
    pub seed: u64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            batch: 8,
            lr: 1e-3,
            patience: 5,
            lambda: 0.5,
            hidden: DEFAULT_HIDDEN,
            window: 30,
            seed: 4,
        }
    }
}

/// A feature sequence with one (possibly soft) label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence<T> {
    pub features: FeatureBatch<T>,
    pub labels: Vec<f64>,
}

impl<T: Scalar> LabeledSequence<T> {
    /// Consecutive windows of at most `len` frames.
    pub fn windows(&self, len: usize) -> Vec<LabeledSequence<T>> {
        let len = len.max(1);
        (0..self.labels.len())
            .step_by(len)
            .map(|s| {
                let e = (s + len).min(self.labels.len());
                LabeledSequence {
                    features: self.features.range(s, e),
                    labels: self.labels[s..e].to_vec(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalOutcome<T> {
    pub head: TemporalHead<T>,
    /// `(epoch, train loss, validation loss)`, both per frame.
    pub curves: Vec<(usize, f64, f64)>,
}

fn mean_loss<T: Scalar>(head: &TemporalHead<T>, seqs: &[LabeledSequence<T>], lambda: f64) -> f64 {
    let frames: usize = seqs.iter().map(|s| s.labels.len()).sum();
    seqs.iter()
        .map(|s| head.sequence_loss(&s.features, &s.labels, lambda, 1.0, None))
        .sum::<f64>()
        / frames.max(1) as f64
}

/// Back-propagation through time on the temporal loss with the feature
/// extraction module frozen; early stopping on validation loss.
pub fn train_temporal_head<T: Scalar>(
    mut head: TemporalHead<T>,
    train: &[LabeledSequence<T>],
    val: &[LabeledSequence<T>],
    cfg: &TemporalConfig,
) -> Result<TemporalOutcome<T>, TrainError> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(TrainError::Config(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    let windows: Vec<_> = train.iter().flat_map(|s| s.windows(cfg.window)).filter(|w| !w.labels.is_empty()).collect();
    if windows.is_empty() {
        return Err(TrainError::Config("no training sequences".into()));
    }
    if windows.iter().any(|w| w.features.dims() != head.dims || w.features.len() != w.labels.len()) {
        return Err(TrainError::Config("sequence features do not match the head".into()));
    }
    let val: Vec<_> = val.iter().flat_map(|s| s.windows(cfg.window)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&head.params, cfg.lr, 0.9, 0.999);
    let mut grads = head.params.zeros_like();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = head.params.clone();
    let mut curves = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut sum = 0.0;
        let mut frames = 0usize;
        for idx in crate::train::shuffled_batches(windows.len(), cfg.batch, &mut rng) {
            grads.fill_zero();
            let batch_frames: usize = idx.iter().map(|&i| windows[i].labels.len()).sum();
            for &i in &idx {
                let w = &windows[i];
                sum += head.sequence_loss(&w.features, &w.labels, cfg.lambda, 1.0 / batch_frames as f64, Some(&mut grads));
            }
            frames += batch_frames;
            opt.step(&mut head.params, &grads);
        }
        let train_loss = sum / frames as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(&head, &val, cfg.lambda) };
        if !val_loss.is_finite() || !head.params.all_finite() {
            return Err(TrainError::Diverged { stage: "temporal head", epoch, last_good: None });
        }
        curves.push((epoch, train_loss, val_loss));
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = head.params.clone();
        }
        if stop {
            break;
        }
    }
    head.params = best;
    Ok(TemporalOutcome { head, curves })
}

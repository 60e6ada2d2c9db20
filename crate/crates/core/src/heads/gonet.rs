use ndarray::{Array1, Ix1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{Feature, FeatureBatch, FeatureSubset, FeatureTriple};
use crate::nn::{sigmoid, Adam, ParamSet};
use crate::scalar::Scalar;
use crate::train::{shuffled_batches, EarlyStopping, TrainError};

/// Single-frame classifier: one scalar per selected feature, then a final
/// linear layer and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct GonetHead<T> {
    pub subset: FeatureSubset,
    pub dims: [usize; 3],
    pub params: ParamSet<T>,
    /// `(w, b)` parameter indices per feature, `None` outside the subset.
    slots: [Option<(usize, usize)>; 3],
    out_w: usize,
    out_b: usize,
}

impl<T: Scalar> GonetHead<T> {
    pub fn new<R: Rng + ?Sized>(subset: FeatureSubset, dims: [usize; 3], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut slots = [None; 3];
        for f in subset.features() {
            let k = f.index();
            let w = params.push_normal(format!("{f:?}.w"), &[dims[k]], 1.0 / (dims[k] as f64).sqrt(), rng);
            let b = params.push_zeros(format!("{f:?}.b"), &[1]);
            slots[k] = Some((w, b));
        }
        let n = subset.len();
        let out_w = params.push_normal("out.w", &[n], 1.0 / (n as f64).sqrt(), rng);
        let out_b = params.push_zeros("out.b", &[1]);
        Self { subset, dims, params, slots, out_w, out_b }
    }

    /// Same layout with every parameter zero.
    pub fn zeroed(subset: FeatureSubset, dims: [usize; 3]) -> Self {
        let mut h = Self::new(subset, dims, &mut ChaCha8Rng::seed_from_u64(0));
        h.params.fill_zero();
        h
    }

    pub fn with_params(mut self, params: ParamSet<T>) -> Result<Self, String> {
        if !self.params.same_layout(&params) || self.params.names() != params.names() {
            return Err("head parameters do not match the subset and feature widths".into());
        }
        self.params = params;
        Ok(self)
    }

    fn scalars(&self, batch: &FeatureBatch<T>) -> Vec<Array1<T>> {
        self.subset
            .features()
            .into_iter()
            .map(|f| {
                let (w, b) = self.slots[f.index()].expect("feature in subset");
                let w = self.params.get(w).view().into_dimensionality::<Ix1>().expect("1-d");
                batch.get(f).dot(&w) + self.params.get(b)[[0]]
            })
            .collect()
    }

    pub fn logits(&self, batch: &FeatureBatch<T>) -> Array1<T> {
        let s = self.scalars(batch);
        let v = self.params.get(self.out_w);
        let mut out = Array1::from_elem(batch.len(), self.params.get(self.out_b)[[0]]);
        for (j, sj) in s.iter().enumerate() {
            out.scaled_add(v[[j]], sj);
        }
        out
    }

    pub fn predict(&self, batch: &FeatureBatch<T>) -> Array1<T> {
        self.logits(batch).mapv(sigmoid)
    }

    pub fn forward(&self, features: &FeatureTriple<T>) -> T {
        self.predict(&FeatureBatch::from_triples(std::slice::from_ref(features)))[0]
    }

    /// Mean squared error against `labels` and its parameter gradient,
    /// accumulated into `grads`.
    pub fn mse_loss(&self, batch: &FeatureBatch<T>, labels: &[f64], grads: Option<&mut ParamSet<T>>) -> f64 {
        assert_eq!(batch.len(), labels.len(), "one label per feature row");
        let n = batch.len() as f64;
        let s = self.scalars(batch);
        let v = self.params.get(self.out_w).clone();
        let mut logit = Array1::from_elem(batch.len(), self.params.get(self.out_b)[[0]]);
        for (j, sj) in s.iter().enumerate() {
            logit.scaled_add(v[[j]], sj);
        }
        let p = logit.mapv(sigmoid);
        let mut loss = 0.0;
        let mut dl = Array1::<T>::zeros(batch.len());
        for i in 0..batch.len() {
            let e = p[i] - T::lit(labels[i]);
            loss += (e * e).as_f64();
            dl[i] = T::lit(2.0 / n) * e * p[i] * (T::one() - p[i]);
        }
        if let Some(g) = grads {
            g.get_mut(self.out_b)[[0]] += dl.sum();
            for (j, f) in self.subset.features().into_iter().enumerate() {
                g.get_mut(self.out_w)[[j]] += dl.dot(&s[j]);
                let ds = &dl * v[[j]];
                let (w, b) = self.slots[f.index()].expect("feature in subset");
                g.get_mut(b)[[0]] += ds.sum();
                let dw = batch.get(f).t().dot(&ds);
                *g.get_mut(w) += &dw.into_dyn();
            }
        }
        loss / n
    }

    /// Gradient of the output probability w.r.t. each feature of one frame;
    /// zero for features outside the subset.
    pub fn feature_gradients(&self, features: &FeatureTriple<T>) -> [Array1<T>; 3] {
        let p = self.forward(features);
        let dlogit = p * (T::one() - p);
        let v = self.params.get(self.out_w);
        let mut out = [
            Array1::zeros(self.dims[0]),
            Array1::zeros(self.dims[1]),
            Array1::zeros(self.dims[2]),
        ];
        for (j, f) in self.subset.features().into_iter().enumerate() {
            let (w, _) = self.slots[f.index()].expect("feature in subset");
            let w = self.params.get(w).view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
            out[f.index()] = w.mapv(|x| x * v[[j]] * dlogit);
        }
        out
    }

    pub fn uses(&self, f: Feature) -> bool {
        self.subset.contains(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch: 32,
            lr: 1e-3,
            patience: 5,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub head: GonetHead<T>,
    pub curves: Vec<HeadEpoch>,
    pub best_epoch: usize,
}

/// Minimizes the mean squared error with Adam and early stopping on the
/// validation loss. Labels may be soft; a label `≥ 0.5` counts as positive
/// for the two-class requirement.
pub fn train_head<T: Scalar>(
    mut head: GonetHead<T>,
    train: &FeatureBatch<T>,
    labels: &[f64],
    val: &FeatureBatch<T>,
    val_labels: &[f64],
    cfg: &HeadConfig,
) -> Result<HeadOutcome<T>, TrainError> {
    if train.len() != labels.len() || val.len() != val_labels.len() {
        return Err(TrainError::Config("feature rows and labels differ in count".into()));
    }
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(TrainError::Config(
            "training set must contain both traversable and non-traversable examples".into(),
        ));
    }
    if val.is_empty() {
        return Err(TrainError::Config("early stopping needs a non-empty validation set".into()));
    }
    if train.dims() != head.dims {
        return Err(TrainError::Config(format!(
            "feature widths {:?} do not match the head {:?}",
            train.dims(),
            head.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&head.params, cfg.lr, 0.9, 0.999);
    let mut grads = head.params.zeros_like();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = head.params.clone();
    let mut curves = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let (mut sum, mut seen) = (0.0, 0usize);
        for idx in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            let b = train.select(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            grads.fill_zero();
            sum += head.mse_loss(&b, &y, Some(&mut grads)) * idx.len() as f64;
            seen += idx.len();
            opt.step(&mut head.params, &grads);
        }
        let val_loss = head.mse_loss(val, val_labels, None);
        if !val_loss.is_finite() || !head.params.all_finite() {
            return Err(TrainError::Diverged { stage: "head", epoch, last_good: None });
        }
        curves.push(HeadEpoch {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = head.params.clone();
        }
        if stop {
            break;
        }
    }
    head.params = best;
    Ok(HeadOutcome {
        head,
        best_epoch: stopper.best().map_or(0, |b| b.0),
        curves,
    })
}

//! Metrics, data-efficiency studies, saliency, prediction traces and
//! throughput measurement.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RawImage;
use crate::heads::{FeatureBatch, HeadModel, Pipeline, SequencePredictor};
use crate::scalar::Scalar;

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("not enough labeled data for {count} examples: {pos} positive and {neg} negative available")]
    Insufficient { count: usize, pos: usize, neg: usize },
    #[error("evaluation needs at least one example")]
    Empty,
    #[error("{0}")]
    Train(#[from] crate::train::TrainError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// Traversable iff the probability is strictly above the threshold.
pub fn classify(p: f64, threshold: f64) -> bool {
    p > threshold
}

/// One model's test metrics. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub neg_accuracy: f64,
    pub pos_accuracy: f64,
    pub accuracy: f64,
    /// `None` when the model predicted no positives.
    pub precision: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub throughput_hz: Option<f64>,
    pub params_mb: Option<f64>,
    pub activation_mb: Option<f64>,
}

impl MetricsRow {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Confusion-matrix metrics. A class absent from `labels` reports 0 for its
/// accuracy.
pub fn metrics_from_predictions(model: &str, probs: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsRow, EvalError> {
    assert_eq!(probs.len(), labels.len(), "one prediction per label");
    if probs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (classify(p, threshold), y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok(MetricsRow {
        model: model.into(),
        neg_accuracy: pct(tn, tn + fp),
        pos_accuracy: pct(tp, tp + fn_),
        accuracy: pct(tp + tn, probs.len()),
        precision: (tp + fp > 0).then(|| pct(tp, tp + fp)),
        tp,
        fp,
        tn,
        fn_,
        throughput_hz: None,
        params_mb: None,
        activation_mb: None,
    })
}

/// An ordered, labeled frame sequence for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSequence {
    pub name: String,
    pub frames: Vec<Array3<f32>>,
    pub labels: Vec<bool>,
}

/// Runs `model` over every sequence (state reset between sequences).
pub fn evaluate(model: &str, predictor: &dyn SequencePredictor, test: &[TestSequence], threshold: f64) -> Result<MetricsRow, EvalError> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in test {
        probs.extend(predictor.predict_sequence(&s.frames));
        labels.extend_from_slice(&s.labels);
    }
    metrics_from_predictions(model, &probs, &labels, threshold)
}

/// `Σ|y′_{t+1} − y′_t|`.
pub fn total_variation(probs: &[f64]) -> f64 {
    probs.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), EvalError> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into());
    let mut out = String::from(
        "model,neg_accuracy,pos_accuracy,accuracy,precision,tp,fp,tn,fn,throughput_hz,params_mb,activation_mb\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.neg_accuracy,
            r.pos_accuracy,
            r.accuracy,
            opt(r.precision),
            r.tp,
            r.fp,
            r.tn,
            r.fn_,
            opt(r.throughput_hz),
            opt(r.params_mb),
            opt(r.activation_mb)
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Mean test accuracy per training-set size; counts strictly increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyCurve {
    pub points: Vec<(usize, f64)>,
}

impl DataEfficiencyCurve {
    pub fn accuracy_at(&self, count: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == count).map(|p| p.1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("train_count,accuracy\n");
        for (c, a) in &self.points {
            out.push_str(&format!("{c},{a:.4}\n"));
        }
        std::fs::write(path, out).map_err(io_err(path))
    }
}

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures<T> {
    pub features: FeatureBatch<T>,
    pub labels: Vec<bool>,
}

impl<T: Scalar> LabeledFeatures<T> {
    /// Seeded subsample of `count / 2` positives and `count / 2` negatives.
    pub fn balanced(&self, count: usize, seed: u64) -> Result<Self, EvalError> {
        let mut pos: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i]).collect();
        let mut neg: Vec<usize> = (0..self.labels.len()).filter(|&i| !self.labels[i]).collect();
        let half = count / 2;
        if pos.len() < half || neg.len() < count - half {
            return Err(EvalError::Insufficient { count, pos: pos.len(), neg: neg.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut idx: Vec<usize> = pos[..half].iter().chain(&neg[..count - half]).copied().collect();
        idx.sort_unstable();
        Ok(Self {
            features: self.features.select(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn soft_labels(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
    }
}

/// For each count, trains one head per seed on a balanced subsample of
/// `pool` and records the mean test accuracy. `train` maps
/// `(subsample, seed)` to test-set probabilities.
pub fn data_efficiency_study<T: Scalar>(
    counts: &[usize],
    seeds: &[u64],
    pool: &LabeledFeatures<T>,
    test_labels: &[bool],
    mut train: impl FnMut(&LabeledFeatures<T>, u64) -> Result<Vec<f64>, EvalError>,
) -> Result<DataEfficiencyCurve, EvalError> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut points = Vec::with_capacity(sorted.len());
    for &count in &sorted {
        let mut sum = 0.0;
        for &seed in seeds {
            let sub = pool.balanced(count, seed)?;
            let probs = train(&sub, seed)?;
            sum += metrics_from_predictions("study", &probs, test_labels, THRESHOLD)?.accuracy;
        }
        points.push((count, sum / seeds.len().max(1) as f64));
    }
    Ok(DataEfficiencyCurve { points })
}

/// Mean channel-summed `|∂p/∂I|` over `images`, scaled so its maximum is 1.
/// `grad` returns the input gradient of one image.
pub fn saliency_map_with(images: &[Array3<f32>], mut grad: impl FnMut(&Array3<f32>) -> Array3<f32>) -> Array2<f64> {
    let Some(first) = images.first() else {
        return Array2::zeros((0, 0));
    };
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut acc = Array2::<f64>::zeros((h, w));
    for img in images {
        let g = grad(img);
        for ((_, y, x), v) in g.indexed_iter() {
            acc[[y, x]] += v.abs() as f64;
        }
    }
    acc /= images.len() as f64;
    let max = acc.fold(0.0f64, |m, v| m.max(*v));
    if max > 0.0 {
        acc /= max;
    }
    acc
}

/// Saliency of a single-frame pipeline.
///
/// # Panics
/// For temporal pipelines, which have no single-frame gradient.
pub fn saliency_map(model: &Pipeline<f32>, images: &[Array3<f32>]) -> Array2<f64> {
    saliency_map_with(images, |img| {
        model
            .input_gradient(img)
            .expect("saliency needs a single-frame pipeline")
    })
}

/// Mean saliency of the top and bottom image halves.
pub fn saliency_halves(map: &Array2<f64>) -> (f64, f64) {
    let h = map.nrows();
    let top = map.slice(ndarray::s![..h / 2, ..]).mean().unwrap_or(0.0);
    let bottom = map.slice(ndarray::s![h / 2.., ..]).mean().unwrap_or(0.0);
    (top, bottom)
}

/// Grayscale PNG of a `[0, 1]` map.
pub fn write_map_png(path: &Path, map: &Array2<f64>) -> Result<(), EvalError> {
    let img = RawImage::from_fn(map.ncols(), map.nrows(), 1, |x, y, _| (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
    img.write_png(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// Inverse of the median single-call latency.
    pub throughput_hz: f64,
    pub median_latency_s: f64,
    pub iters: usize,
}

/// Times `f` serially after `warmup` untimed calls.
pub fn benchmark(warmup: usize, iters: usize, mut f: impl FnMut()) -> BenchResult {
    assert!(iters >= 1, "benchmark needs at least one timed iteration");
    for _ in 0..warmup {
        f();
    }
    let mut lat: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64().max(1e-9)
        })
        .collect();
    lat.sort_by(f64::total_cmp);
    let median = lat[lat.len() / 2];
    BenchResult {
        throughput_hz: 1.0 / median,
        median_latency_s: median,
        iters,
    }
}

/// `(parameter MB, activation MB)` of one single-frame inference: every
/// parameter tensor, and every activation recorded by the forward passes.
pub fn pipeline_memory<T: Scalar>(p: &Pipeline<T>) -> (f64, f64) {
    let e = &p.extractor;
    let numel = e.gen.params.numel() + e.dis.params.numel() + e.inv.params.numel() + p.head.params().numel();
    let mb = |n: usize| (n * T::BYTES) as f64 / 1e6;
    let x = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[1, e.gen.arch.channels, e.gen.arch.image_size, e.gen.arch.image_size]));
    let ti = e.inv.forward(x.clone());
    let tg = e.gen.forward(ti.output().clone());
    let td = e.dis.forward_features(x);
    let tape_len = |t: &crate::nn::Tape<T>| t.acts.iter().map(|a| a.len()).sum::<usize>();
    // the discriminator runs on both the input and its reconstruction
    let mut acts = tape_len(&ti) + tg.acts.iter().map(|a| a.len()).sum::<usize>() + 2 * tape_len(&td);
    if let HeadModel::Temporal(h) = &p.head {
        acts += crate::heads::REDUCED_DIM * h.subset.len() + 6 * h.hidden;
    }
    (mb(numel), mb(acts))
}

/// Aligned prediction series for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub timestamps: Vec<f64>,
    pub labels: Vec<bool>,
    pub series: Vec<(String, Vec<f64>)>,
}

/// Bundles per-model predictions with ground truth; non-traversable frames
/// form the shaded intervals.
pub fn prediction_trace(series: Vec<(String, Vec<f64>)>, labels: &[bool], period_s: f64) -> Trace {
    for (name, s) in &series {
        assert_eq!(s.len(), labels.len(), "trace series `{name}` has the wrong length");
    }
    Trace {
        timestamps: (0..labels.len()).map(|i| i as f64 * period_s).collect(),
        labels: labels.to_vec(),
        series,
    }
}

impl Trace {
    /// `[start, end)` frame ranges where the ground truth is non-traversable.
    pub fn unsafe_intervals(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &y) in self.labels.iter().chain(std::iter::once(&true)).enumerate() {
            match (y, start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    out.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        let names: Vec<&str> = self.series.iter().map(|s| s.0.as_str()).collect();
        let w = |f: &mut std::io::BufWriter<std::fs::File>, s: String| f.write_all(s.as_bytes()).map_err(io_err(path));
        w(&mut f, format!("t,traversable,{}\n", names.join(",")))?;
        for i in 0..self.labels.len() {
            let vals: Vec<String> = self.series.iter().map(|s| format!("{:.6}", s.1[i])).collect();
            w(&mut f, format!("{:.4},{},{}\n", self.timestamps[i], u8::from(self.labels[i]), vals.join(",")))?;
        }
        f.flush().map_err(io_err(path))
    }

    /// Line plot: one colored series per model, the 0.5 threshold dashed,
    /// unsafe intervals shaded.
    pub fn write_png(&self, path: &Path) -> Result<(), EvalError> {
        const W: usize = 480;
        const H: usize = 200;
        const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];
        let n = self.labels.len().max(1);
        let col = |x: usize| (x * n / W).min(n - 1);
        let row = |p: f64| ((1.0 - p.clamp(0.0, 1.0)) * (H - 1) as f64).round() as usize;
        let mut canvas = vec![[255u8; 3]; W * H];
        for x in 0..W {
            if !self.labels.get(col(x)).copied().unwrap_or(true) {
                for y in 0..H {
                    canvas[y * W + x] = [225, 225, 225];
                }
            }
            if x % 8 < 4 {
                canvas[row(THRESHOLD) * W + x] = [120, 120, 120];
            }
        }
        for (k, (_, s)) in self.series.iter().enumerate() {
            let c = COLORS[k % COLORS.len()];
            let mut prev: Option<usize> = None;
            for x in 0..W {
                let y = row(s.get(col(x)).copied().unwrap_or(0.0));
                let (lo, hi) = prev.map_or((y, y), |p| (p.min(y), p.max(y)));
                for yy in lo..=hi {
                    canvas[yy * W + x] = c;
                }
                prev = Some(y);
            }
        }
        let img = RawImage::from_fn(W, H, 3, |x, y, c| canvas[y * W + x][c]);
        img.write_png(path).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

/// First index at which `probs` is on the other side of the threshold from
/// its first value, if any.
pub fn first_crossing(probs: &[f64], threshold: f64) -> Option<usize> {
    let start = classify(*probs.first()?, threshold);
    probs.iter().position(|&p| classify(p, threshold) != start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_tie_predictors() {
        let labels = [true, false, true, false];
        let m = metrics_from_predictions("p", &[1.0, 0.0, 1.0, 0.0], &labels, 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision), (100.0, Some(100.0)));
        let m = metrics_from_predictions("c", &[0.5 - 1e-9; 4], &labels, 0.5).unwrap();
        assert_eq!((m.pos_accuracy, m.neg_accuracy), (0.0, 100.0));
        assert_eq!(m.precision, None);
        let m = metrics_from_predictions("t", &[0.5; 4], &labels, 0.5).unwrap();
        assert_eq!(m.pos_accuracy, 0.0);
    }

    #[test]
    fn confusion_arithmetic() {
        // TP 9, FP 1, TN 8, FN 2
        let mut p = vec![0.9; 9];
        p.extend([0.8]);
        p.extend([0.1; 8]);
        p.extend([0.2; 2]);
        let mut y = vec![true; 9];
        y.extend([false]);
        y.extend([false; 8]);
        y.extend([true; 2]);
        let m = metrics_from_predictions("h", &p, &y, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (9, 1, 8, 2));
        assert!((m.accuracy - 85.0).abs() < 1e-12);
        assert!((m.precision.unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_reported() {
        let m = metrics_from_predictions("s", &[0.2, 0.7], &[false, false], 0.5).unwrap();
        assert_eq!(m.neg_accuracy, 50.0);
        assert_eq!(m.precision, Some(0.0));
        assert!(matches!(metrics_from_predictions("e", &[], &[], 0.5), Err(EvalError::Empty)));
    }

    proptest! {
        #[test]
        fn permutation_invariant(v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60), seed in 0u64..100) {
            let (p, y): (Vec<f64>, Vec<bool>) = v.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let y2: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(metrics_from_predictions("a", &p, &y, 0.5).unwrap(), metrics_from_predictions("a", &p2, &y2, 0.5).unwrap());
        }

        #[test]
        fn balanced_accuracy_identity(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
            let p: Vec<f64> = v.iter().flat_map(|(a, b)| [*a, *b]).collect();
            let y: Vec<bool> = (0..p.len()).map(|i| i % 2 == 0).collect();
            let m = metrics_from_predictions("b", &p, &y, 0.5).unwrap();
            prop_assert!((m.accuracy - 0.5 * (m.pos_accuracy + m.neg_accuracy)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_trace_has_no_shading() {
        let t = prediction_trace(vec![("one".into(), vec![1.0; 10])], &[true; 10], 1.0 / 3.0);
        assert!(t.unsafe_intervals().is_empty());
        assert_eq!(first_crossing(&t.series[0].1, 0.5), None);
        let t = prediction_trace(
            vec![("a".into(), vec![0.9; 6]), ("b".into(), vec![0.1; 6])],
            &[true, true, false, false, true, false],
            1.0,
        );
        assert_eq!(t.unsafe_intervals(), vec![(2, 4), (5, 6)]);
        assert_eq!(t.series[0].1.len(), t.series[1].1.len());
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("t.csv")).unwrap();
        t.write_png(&dir.path().join("t.png")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("t,traversable,a,b\n"));
    }

    #[test]
    fn saliency_of_constant_model_is_zero() {
        let imgs = vec![Array3::<f32>::ones((3, 4, 4)); 2];
        let m = saliency_map_with(&imgs, |x| Array3::zeros(x.raw_dim()));
        assert!(m.iter().all(|&v| v == 0.0));
        let one = vec![Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y * x) as f32)];
        let g = |x: &Array3<f32>| x.mapv(|v| -v);
        let m = saliency_map_with(&one, g);
        let own = one[0].sum_axis(ndarray::Axis(0)).mapv(|v| v as f64);
        let own = &own / own.fold(0.0f64, |a, b| a.max(*b));
        assert!(m.iter().zip(own.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let (top, bottom) = saliency_halves(&m);
        assert!(bottom > top);
    }

    #[test]
    fn benchmark_single_iteration_is_finite() {
        let r = benchmark(0, 1, || {
            std::hint::black_box((0..100).sum::<u64>());
        });
        assert!(r.throughput_hz.is_finite() && r.throughput_hz > 0.0);
    }

    #[test]
    fn study_single_point_and_insufficient_data() {
        let f = FeatureBatch::<f64> {
            r: Array2::zeros((10, 2)),
            d: Array2::zeros((10, 1)),
            f: Array2::from_shape_fn((10, 1), |(i, _)| i as f64),
        };
        let pool = LabeledFeatures { features: f, labels: (0..10).map(|i| i >= 5).collect() };
        let test = [true, false];
        let c = data_efficiency_study(&[4], &[1, 2], &pool, &test, |sub, _| {
            assert_eq!(sub.labels.iter().filter(|&&y| y).count(), 2);
            Ok(vec![0.9, 0.1])
        })
        .unwrap();
        assert_eq!(c.points, vec![(4, 100.0)]);
        let e = data_efficiency_study(&[100], &[1], &pool, &test, |_, _| Ok(vec![0.0, 0.0])).unwrap_err();
        assert!(e.to_string().contains("100"));
    }
}

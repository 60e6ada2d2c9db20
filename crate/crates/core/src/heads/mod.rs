//! Feature extraction and the supervised classification heads: the
//! single-frame head with feature ablations, the recurrent head and its
//! stereo variant.

mod features;
mod gonet;
mod pipeline;
mod temporal;

pub use features::{
    extract_features, features_from_reconstruction, Feature, FeatureBatch, FeatureExtractor, FeatureSubset,
    FeatureTriple,
};
pub use gonet::{train_head, GonetHead, HeadConfig, HeadEpoch, HeadOutcome};
pub use pipeline::{build_stereo_pipeline, HeadModel, Pipeline, SequencePredictor, StreamState};
pub use temporal::{
    temporal_loss, temporal_loss_grad, train_temporal_head, LabeledSequence, TemporalConfig, TemporalHead,
    TemporalOutcome, TemporalState, DEFAULT_HIDDEN, REDUCED_DIM,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcgan::{ArchConfig, Discriminator, Generator};
    use crate::invgen::InvGenerator;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const DIMS: [usize; 3] = [12, 6, 6];

    fn batch(n: usize, seed: u64) -> FeatureBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |w: usize| Array2::from_shape_simple_fn((n, w), || StandardNormal.sample(&mut rng));
        FeatureBatch { r: m(DIMS[0]).mapv(f64::abs), d: m(DIMS[1]).mapv(f64::abs), f: m(DIMS[2]) }
    }

    /// Linearly separable toy problem driven by the F feature.
    fn toy(n: usize, seed: u64) -> (FeatureBatch<f64>, Vec<f64>) {
        let mut b = batch(n, seed);
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        for i in 0..n {
            b.f[[i, 0]] += if y[i] > 0.5 { 1.5 } else { -1.5 };
        }
        (b, y)
    }

    fn accuracy(p: &[f64], y: &[f64]) -> f64 {
        p.iter().zip(y).filter(|(p, y)| (**p > 0.5) == (**y > 0.5)).count() as f64 / y.len() as f64
    }

    #[test]
    fn zero_head_outputs_one_half() {
        let h = GonetHead::<f64>::zeroed(FeatureSubset::ALL, DIMS);
        assert_eq!(h.forward(&batch(1, 0).row(0)), 0.5);
    }

    #[test]
    fn subset_text_roundtrip() {
        for s in ["R", "D", "F", "R+D", "R+D+F", "D+F"] {
            assert_eq!(s.parse::<FeatureSubset>().unwrap().to_string(), s);
        }
        assert!("R+X".parse::<FeatureSubset>().is_err());
        assert!("".parse::<FeatureSubset>().is_err());
    }

    proptest! {
        #[test]
        fn ablated_features_have_no_influence(seed in 0u64..500, scale in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = GonetHead::<f64>::new(FeatureSubset::only(Feature::F), DIMS, &mut rng);
            let t = batch(1, seed).row(0);
            let mut u = t.clone();
            u.phi_r.mapv_inplace(|v| v * scale + 3.0);
            u.phi_d.mapv_inplace(|v| v - scale);
            prop_assert_eq!(h.forward(&t), h.forward(&u));
        }

        #[test]
        fn outputs_stay_inside_unit_interval(seed in 0u64..500, scale in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = GonetHead::<f64>::new(FeatureSubset::ALL, DIMS, &mut rng);
            let mut b = batch(8, seed + 1);
            b.f.mapv_inplace(|v| v * scale);
            for p in h.predict(&b) {
                prop_assert!(p > 0.0 && p < 1.0);
            }
            let th = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, 5, &mut rng);
            for p in th.forward_sequence(&b) {
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }

        #[test]
        fn temporal_loss_is_linear_in_lambda(
            y in prop::collection::vec(0.0f64..1.0, 1..20),
            seed in 0u64..1000,
            l1 in 0.0f64..1.0,
            l2 in 0.0f64..1.0,
            a in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let yp: Vec<f64> = y.iter().map(|_| rng.random()).collect();
            let mix = a * l1 + (1.0 - a) * l2;
            let lhs = temporal_loss(&y, &yp, mix);
            let rhs = a * temporal_loss(&y, &yp, l1) + (1.0 - a) * temporal_loss(&y, &yp, l2);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn temporal_predictions_are_causal(seed in 0u64..200, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, 6, &mut rng);
            let seq = batch(10, seed);
            let full = h.forward_sequence(&seq);
            let prefix = h.forward_sequence(&seq.range(0, k));
            prop_assert_eq!(&full[..k], &prefix[..]);
        }
    }

    #[test]
    fn temporal_loss_reference_values() {
        let v = temporal_loss(&[1.0, 1.0, 0.0], &[0.9, 0.8, 0.2], 0.5);
        // 0.5·(0.1 + 0.2 + 0.2) + 0.5·(0.1 + 0.6)
        assert!((v - 0.6).abs() < 1e-12, "{v}");
        assert_eq!(temporal_loss(&[0.7; 5], &[0.7; 5], 0.5), 0.0);
        let (y, yp) = ([1.0, 0.0, 1.0], [0.2, 0.5, 0.9]);
        let fit: f64 = y.iter().zip(&yp).map(|(a, b): (&f64, &f64)| (a - b).abs()).sum();
        assert!((temporal_loss(&y, &yp, 1.0) - fit).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "lengths differ")]
    fn temporal_loss_rejects_mismatched_lengths() {
        temporal_loss(&[1.0, 0.0], &[0.5], 0.5);
    }

    #[test]
    fn temporal_loss_grad_matches_differences() {
        let y = [1.0, 0.3, 0.0, 0.8];
        let yp = [0.4, 0.61, 0.2, 0.77];
        let g = temporal_loss_grad(&y, &yp, 0.3);
        for t in 0..4 {
            let (mut a, mut b) = (yp, yp);
            a[t] += 1e-7;
            b[t] -= 1e-7;
            let num = (temporal_loss(&y, &a, 0.3) - temporal_loss(&y, &b, 0.3)) / 2e-7;
            assert!((num - g[t]).abs() < 1e-6, "{t}: {num} vs {}", g[t]);
        }
    }

    #[test]
    fn single_step_equals_fresh_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, 8, &mut rng);
        let seq = batch(1, 9);
        let mut st = h.initial_state();
        assert_eq!(h.forward_sequence(&seq), vec![h.step(&mut st, &seq.row(0))]);
    }

    #[test]
    fn streaming_matches_batch_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, 8, &mut rng);
        let seq = batch(7, 2);
        let mut st = h.initial_state();
        let streamed: Vec<f64> = (0..7).map(|t| h.step(&mut st, &seq.row(t))).collect();
        let full = h.forward_sequence(&seq);
        for (a, b) in streamed.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_predictions_settle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, DEFAULT_HIDDEN, &mut rng);
        let one = batch(1, 4);
        let seq = FeatureBatch::concat(&vec![&one; 30]);
        let p = h.forward_sequence(&seq);
        assert!((p[29] - p[28]).abs() < (p[1] - p[0]).abs());
    }

    #[test]
    fn trained_head_separates_and_flipping_mirrors_accuracy() {
        let (tr, y) = toy(200, 1);
        let (va, yv) = toy(100, 2);
        let (te, yt) = toy(200, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HeadConfig { lr: 1e-2, ..Default::default() };
        let h = GonetHead::new(FeatureSubset::ALL, DIMS, &mut rng);
        let out = train_head(h.clone(), &tr, &y, &va, &yv, &cfg).unwrap();
        let acc = accuracy(&out.head.predict(&te).to_vec(), &yt);
        assert!(acc > 0.85, "{acc}");
        let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        let out_f = train_head(h, &tr, &flip(&y), &va, &flip(&yv), &cfg).unwrap();
        let acc_f = accuracy(&out_f.head.predict(&te).to_vec(), &yt);
        assert!((acc_f - (1.0 - acc)).abs() <= 0.03, "{acc} vs flipped {acc_f}");
    }

    #[test]
    fn zero_patience_stops_at_first_worse_epoch() {
        let (tr, y) = toy(60, 1);
        let (va, yv) = toy(30, 2);
        let cfg = HeadConfig { patience: 0, lr: 0.5, ..Default::default() };
        let h = GonetHead::new(FeatureSubset::ALL, DIMS, &mut ChaCha8Rng::seed_from_u64(0));
        let out = train_head(h, &tr, &y, &va, &yv, &cfg).unwrap();
        let c = &out.curves;
        assert!(c.len() < cfg.max_epochs);
        let last = c.len() - 1;
        assert!(c[last].val_loss >= c[last - 1].val_loss);
        assert!(c[..last].windows(2).all(|w| w[1].val_loss < w[0].val_loss));
        assert_eq!(out.best_epoch, last - 1);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let (tr, _) = toy(10, 1);
        let h = GonetHead::<f64>::new(FeatureSubset::ALL, DIMS, &mut ChaCha8Rng::seed_from_u64(0));
        let r = train_head(h, &tr, &[1.0; 10], &tr, &[1.0; 10], &HeadConfig::default());
        assert!(matches!(r, Err(crate::train::TrainError::Config(_))));
    }

    #[test]
    fn empty_sequence_set_is_rejected() {
        let h = TemporalHead::<f64>::new(FeatureSubset::ALL, DIMS, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let r = train_temporal_head(h, &[], &[], &TemporalConfig::default());
        assert!(matches!(r, Err(crate::train::TrainError::Config(_))));
    }

    #[test]
    fn temporal_training_reduces_loss() {
        let (b, y) = toy(120, 3);
        let seqs: Vec<LabeledSequence<f64>> = (0..4)
            .map(|k| LabeledSequence { features: b.range(k * 30, k * 30 + 30), labels: y[k * 30..k * 30 + 30].to_vec() })
            .collect();
        let h = TemporalHead::new(FeatureSubset::ALL, DIMS, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = TemporalConfig { lr: 1e-2, lambda: 1.0, max_epochs: 40, ..Default::default() };
        let out = train_temporal_head(h, &seqs, &seqs, &cfg).unwrap();
        assert!(out.curves.last().unwrap().2 < out.curves[0].2);
    }

    fn tiny_nets(channels: usize) -> (Generator<f64>, Discriminator<f64>, InvGenerator<f64>) {
        let arch = ArchConfig::reduced(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (Generator::new(arch, &mut rng), Discriminator::new(arch, &mut rng), InvGenerator::new(arch, &mut rng))
    }

    fn frame(channels: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = ArchConfig::reduced(channels).image_size;
        Array3::from_shape_simple_fn((channels, s, s), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_reconstruction_zeroes_differences() {
        let (_, dis, _) = tiny_nets(3);
        let x = frame(3, 1);
        let t = features_from_reconstruction(&dis, &x, &x);
        assert!(t.phi_r.iter().chain(t.phi_d.iter()).all(|&v| v == 0.0));
        let (gen, dis, inv) = tiny_nets(3);
        let t = extract_features(&gen, &dis, &inv, &x);
        assert!(t.phi_r.iter().chain(t.phi_d.iter()).all(|&v| v >= 0.0));
        let e = FeatureExtractor::new(gen, dis, inv).unwrap();
        let b = e.extract(&[x.clone(), frame(3, 2)]);
        assert_eq!(b.row(0), t);
        assert_eq!(b.dims(), e.dims());
    }

    #[test]
    #[should_panic(expected = "frame shape")]
    fn wrong_channel_frame_panics() {
        let (gen, dis, inv) = tiny_nets(3);
        extract_features(&gen, &dis, &inv, &frame(6, 1));
    }

    #[test]
    fn stereo_pipeline_checks_channels_and_runs_on_duplicated_views() {
        let (g3, d3, i3) = tiny_nets(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims3 = FeatureExtractor::new(g3.clone(), d3.clone(), i3.clone()).unwrap().dims();
        let h3 = TemporalHead::<f64>::new(FeatureSubset::ALL, dims3, 4, &mut rng);
        assert!(build_stereo_pipeline(g3, d3, i3, h3).is_err());

        let (g6, d6, i6) = tiny_nets(6);
        let dims6 = FeatureExtractor::new(g6.clone(), d6.clone(), i6.clone()).unwrap().dims();
        let h6 = TemporalHead::<f64>::new(FeatureSubset::ALL, dims6, 4, &mut rng);
        let p = build_stereo_pipeline(g6, d6, i6, h6).unwrap();
        let left = frame(3, 5);
        let stereo = ndarray::concatenate(ndarray::Axis(0), &[left.view(), left.view()]).unwrap();
        let out = p.predict_frames(&[stereo]);
        assert!(out[0] > 0.0 && out[0] < 1.0);
        assert_eq!(p.kind(), crate::checkpoint::HeadKind::StereoTemporal);
    }

    #[test]
    fn pipeline_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (g, d, i) = tiny_nets(3);
        let e = FeatureExtractor::new(g, d, i).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for head in [
            HeadModel::Single(GonetHead::new("R+F".parse().unwrap(), e.dims(), &mut rng)),
            HeadModel::Temporal(TemporalHead::new(FeatureSubset::ALL, e.dims(), 5, &mut rng)),
        ] {
            let p = Pipeline::new(e.clone(), head).unwrap();
            let path = dir.path().join("head.ckpt");
            p.save(&path, 1, serde_json::json!({})).unwrap();
            let q = Pipeline::<f64>::load(&path).unwrap();
            assert_eq!(p, q);
            let mut st = q.start_stream();
            let x = frame(3, 4);
            assert_eq!(q.push_frame(&mut st, &x), p.predict_frames(&[x])[0]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (g, d, i) = tiny_nets(3);
        let e = FeatureExtractor::new(g, d, i).unwrap();
        let head = GonetHead::new(FeatureSubset::ALL, e.dims(), &mut ChaCha8Rng::seed_from_u64(9));
        let p = Pipeline::new(e, HeadModel::Single(head)).unwrap();
        let x = frame(3, 7);
        let g = p.input_gradient(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let idx = (rng.random_range(0..3), rng.random_range(0..16), rng.random_range(0..16));
            let h = 1e-6;
            let mut a = x.clone();
            a[idx] += h;
            let mut b = x.clone();
            b[idx] -= h;
            let num = (p.predict_frames(&[a])[0] - p.predict_frames(&[b])[0]) / (2.0 * h);
            worst = worst.max((num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-7));
        }
        assert!(worst < 1e-4, "{worst}");
    }
}

//! Inverse generator: images to latent codes, trained as an autoencoder
//! through the frozen generator, plus iterative latent search and the
//! reconstruction-threshold classifier.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, Stage};
use crate::dcgan::{conv_ladder, flatten, ArchConfig, Discriminator, Generator, INIT_STD};
use crate::nn::{stack, Adam, NetBuilder, ParamSet, Sequential, Tape};
use crate::scalar::Scalar;
use crate::train::{shuffled_batches, TrainError};

/// Images per forward pass when scoring large sets.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct InvGenerator<T> {
    pub arch: ArchConfig,
    pub net: Sequential,
    pub params: ParamSet<T>,
}

impl<T: Scalar> InvGenerator<T> {
    pub fn new<R: rand::Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        arch.validate().expect("valid architecture");
        let mut b = NetBuilder::new(rng, INIT_STD);
        conv_ladder(&mut b, &arch);
        b.linear("fc", arch.feature_dim(), arch.z_dim);
        let (net, params) = b.finish();
        Self { arch, net, params }
    }

    pub fn from_params(arch: ArchConfig, params: ParamSet<T>) -> Result<Self, CheckpointError> {
        let mut g = Self::new(arch, &mut ChaCha8Rng::seed_from_u64(0));
        if !g.params.same_layout(&params) || g.params.names() != params.names() {
            return Err(CheckpointError::Mismatch {
                field: "invgen parameters".into(),
                expected: format!("{} tensors", g.params.len()),
                found: format!("{} tensors with different names or shapes", params.len()),
            });
        }
        g.params = params;
        Ok(g)
    }

    /// Latent codes `[batch, z_dim]` for images `[batch, n, S, S]`.
    pub fn invert(&self, images: &ArrayD<T>) -> Array2<T> {
        assert_eq!(
            &images.shape()[1..],
            &self.arch.image_shape(),
            "invert: image shape does not match the configured network"
        );
        flatten(self.net.infer(&self.params, images.clone()))
    }

    pub fn invert_one(&self, image: &Array3<T>) -> Array1<T> {
        self.invert(&image.clone().insert_axis(Axis(0)).into_dyn())
            .index_axis_move(Axis(0), 0)
    }

    pub fn forward(&self, images: ArrayD<T>) -> Tape<T> {
        self.net.forward(&self.params, images)
    }
}

/// `I′ = Gen(InvGen(I))`.
pub fn reconstruct<T: Scalar>(invgen: &InvGenerator<T>, gen: &Generator<T>, images: &ArrayD<T>) -> ArrayD<T> {
    gen.generate(&invgen.invert(images))
}

/// Per-image inversion loss terms, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionLossBreakdown {
    /// Mean absolute pixel residual `L_R`.
    pub residual: f64,
    /// Mean absolute discriminator-feature difference `L_D`.
    pub discriminator: f64,
    pub total: f64,
    pub lambda: f64,
}

impl InversionLossBreakdown {
    pub fn new(residual: f64, discriminator: f64, lambda: f64) -> Self {
        Self {
            residual,
            discriminator,
            total: (1.0 - lambda) * residual + lambda * discriminator,
            lambda,
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Loss `L(z)` of reconstructing `images` from `z` and its gradient w.r.t.
/// `z`. `f_real` are the discriminator features of `images`. Generator
/// parameter gradients accumulate into `gen_grads` when given.
pub fn latent_loss<T: Scalar>(
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    images: &ArrayD<T>,
    f_real: &Array2<T>,
    z: &Array2<T>,
    lambda: f64,
    gen_grads: Option<&mut ParamSet<T>>,
) -> (InversionLossBreakdown, Array2<T>) {
    let b = images.shape()[0];
    let gt = gen.forward(z.clone().into_dyn());
    let recon = gt.output();
    let pix = (images.len() / b) as f64;
    let (mut lr, mut ld) = (0.0, 0.0);
    let wr = T::lit((1.0 - lambda) / (b as f64 * pix));
    let mut grad = ArrayD::<T>::zeros(recon.raw_dim());
    for ((g, &r), &x) in grad.iter_mut().zip(recon.iter()).zip(images.iter()) {
        let d = r - x;
        lr += d.abs().as_f64();
        *g = wr * sign(d);
    }
    if lambda != 0.0 {
        let dt = dis.forward_features(recon.clone());
        let f_fake = flatten(dt.output().clone());
        let feat = f_fake.ncols() as f64;
        let wd = T::lit(lambda / (b as f64 * feat));
        let mut gf = Array2::<T>::zeros(f_fake.raw_dim());
        for ((g, &a), &r) in gf.iter_mut().zip(f_fake.iter()).zip(f_real.iter()) {
            let d = a - r;
            ld += d.abs().as_f64();
            *g = wd * sign(d);
        }
        grad += &dis.backward_features(&dt, &gf);
        ld /= b as f64 * feat;
    } else {
        // L_D is still reported even though it carries no weight
        let f_fake = dis.features(recon);
        ld = f_fake
            .iter()
            .zip(f_real.iter())
            .map(|(a, r)| (*a - *r).abs().as_f64())
            .sum::<f64>()
            / (b as f64 * f_fake.ncols() as f64);
    }
    lr /= b as f64 * pix;
    let gz = gen.backward(&gt, grad, gen_grads);
    (InversionLossBreakdown::new(lr, ld, lambda), flatten(gz))
}

/// Mean squared pixel residual of the end-to-end autoencoder and its gradient
/// w.r.t. the reconstructions.
fn squared_residual<T: Scalar>(recon: &ArrayD<T>, images: &ArrayD<T>) -> (f64, ArrayD<T>) {
    let n = images.len() as f64;
    let w = T::lit(2.0 / n);
    let mut loss = 0.0;
    let mut grad = ArrayD::<T>::zeros(recon.raw_dim());
    for ((g, &r), &x) in grad.iter_mut().zip(recon.iter()).zip(images.iter()) {
        let d = r - x;
        loss += (d * d).as_f64();
        *g = w * d;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvGenConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub lambda: f64,
    /// Train the generator jointly on a squared pixel loss (plain
    /// autoencoder baseline) instead of keeping it frozen.
    pub unfreeze_generator: bool,
}

impl Default for InvGenConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 2,
            lambda: 0.1,
            unfreeze_generator: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InvGenOutcome<T> {
    pub invgen: InvGenerator<T>,
    /// The jointly trained generator when `unfreeze_generator` was set.
    pub trained_generator: Option<Generator<T>>,
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
    pub curves: Vec<InvEpochStats>,
}

/// Mean objective over `images` (the training loss, without updates).
pub fn inversion_objective<T: Scalar>(
    invgen: &InvGenerator<T>,
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    images: &[Array3<T>],
    lambda: f64,
    squared: bool,
) -> f64 {
    let mut total = 0.0;
    for chunk in images.chunks(EVAL_CHUNK) {
        let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
        let x = stack(&views);
        let z = invgen.invert(&x);
        let l = if squared {
            squared_residual(&gen.generate(&z), &x).0
        } else {
            latent_loss(gen, dis, &x, &dis.features(&x), &z, lambda, None).0.total
        };
        total += l * chunk.len() as f64;
    }
    total / images.len() as f64
}

/// Trains the inverse generator on positives with `gen` and `dis` frozen
/// (neither argument is modified). With `unfreeze_generator` a copy of `gen`
/// is trained jointly on the squared residual.
pub fn train_invgen<T: Scalar>(
    positives: &[Array3<T>],
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    cfg: &InvGenConfig,
    val: &[Array3<T>],
    checkpoint: Option<&Path>,
) -> Result<InvGenOutcome<T>, TrainError> {
    if positives.is_empty() {
        return Err(TrainError::Config("no positive images to train on".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(TrainError::Config(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    if cfg.batch == 0 {
        return Err(TrainError::Config("batch must be positive".into()));
    }
    let arch = gen.arch;
    if dis.arch != arch {
        return Err(TrainError::Config("generator and discriminator architectures differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inv = InvGenerator::new(arch, &mut rng);
    let mut gen_t = gen.clone();
    let squared = cfg.unfreeze_generator;
    let mut opt = Adam::new(&inv.params, cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_g = Adam::new(&gen_t.params, cfg.lr, cfg.beta1, cfg.beta2);
    let mut gi = inv.params.zeros_like();
    let mut gg = gen_t.params.zeros_like();
    let objective = |inv: &InvGenerator<T>, g: &Generator<T>| {
        (!val.is_empty()).then(|| inversion_objective(inv, g, dis, val, cfg.lambda, squared))
    };
    let initial_val_loss = objective(&inv, &gen_t);
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let (mut sum, mut batches) = (0.0, 0usize);
        for idx in shuffled_batches(positives.len(), cfg.batch, &mut rng) {
            let views: Vec<_> = idx.iter().map(|&i| positives[i].view()).collect();
            let x = stack(&views);
            let et = inv.forward(x.clone());
            let z = flatten(et.output().clone());
            gi.fill_zero();
            let (loss, gz) = if squared {
                gg.fill_zero();
                let gt = gen_t.forward(z.into_dyn());
                let (l, gr) = squared_residual(gt.output(), &x);
                let gz = gen_t.backward(&gt, gr, Some(&mut gg));
                (l, flatten(gz))
            } else {
                let f_real = dis.features(&x);
                let (bd, gz) = latent_loss(&gen_t, dis, &x, &f_real, &z, cfg.lambda, None);
                (bd.total, gz)
            };
            let gz = gz.into_shape_with_order(et.output().raw_dim()).expect("latent shape");
            inv.net
                .backward(&inv.params, &et, inv.net.len(), gz, &[], Some(&mut gi));
            opt.step(&mut inv.params, &gi);
            if squared {
                opt_g.step(&mut gen_t.params, &gg);
            }
            if !loss.is_finite() || !inv.params.all_finite() || !gen_t.params.all_finite() {
                return Err(TrainError::Diverged { stage: "invgen", epoch, last_good });
            }
            sum += loss;
            batches += 1;
        }
        curves.push(InvEpochStats {
            epoch,
            train_loss: sum / batches as f64,
            val_loss: objective(&inv, &gen_t),
        });
        if let Some(path) = checkpoint {
            save_invgen(path, &gen_t, dis, &inv, cfg, epoch + 1)?;
            last_good = Some(path.to_path_buf());
        }
    }
    Ok(InvGenOutcome {
        invgen: inv,
        trained_generator: squared.then_some(gen_t),
        initial_val_loss,
        curves,
    })
}

/// Writes the generator, discriminator and inverse generator as one bundle.
pub fn save_invgen<T: Scalar>(
    path: &Path,
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    inv: &InvGenerator<T>,
    cfg: &InvGenConfig,
    epoch: usize,
) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::new(
        Stage::Invgen,
        gen.arch,
        cfg.seed,
        epoch,
        serde_json::to_value(cfg).expect("config serializes"),
    );
    ck.meta.lambda = Some(cfg.lambda);
    ck.add_group("gen", gen.net.describe(), &gen.params);
    ck.add_group("dis", dis.net.describe(), &dis.params);
    ck.add_group("invgen", inv.net.describe(), &inv.params);
    ck.save(path)
}

/// Frozen feature-extraction nets read from an inversion checkpoint.
pub type InvBundle<T> = (Generator<T>, Discriminator<T>, InvGenerator<T>, CheckpointMeta);

pub fn load_invgen<T: Scalar>(path: &Path) -> Result<InvBundle<T>, CheckpointError> {
    let ck = Checkpoint::<T>::load(path)?;
    if ck.meta.stage != Stage::Invgen {
        return Err(CheckpointError::Mismatch {
            field: "stage".into(),
            expected: "invgen".into(),
            found: ck.meta.stage.as_str().into(),
        });
    }
    let arch = ck.meta.arch;
    let gen = Generator::from_params(arch, ck.group("gen")?.clone())?;
    let dis = Discriminator::from_params(arch, ck.group("dis")?.clone())?;
    let inv = InvGenerator::from_params(arch, ck.group("invgen")?.clone())?;
    Ok((gen, dis, inv, ck.meta))
}

/// Gradient-based latent search from a seeded standard-normal start.
///
/// Runs `steps` Adam updates on `z` and returns the best code seen together
/// with its loss breakdown.
pub fn invert_by_backprop<T: Scalar>(
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    image: &Array3<T>,
    steps: usize,
    lr: f64,
    lambda: f64,
    seed: u64,
) -> Result<(Array1<T>, InversionLossBreakdown), TrainError> {
    if steps == 0 {
        return Err(TrainError::Config("steps must be at least 1".into()));
    }
    let x = image.clone().insert_axis(Axis(0)).into_dyn();
    let f_real = dis.features(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0: Array2<T> = crate::dcgan::sample_latent(1, gen.arch.z_dim, &mut rng);
    let mut p = ParamSet::new();
    p.push("z", z0.into_dyn());
    let mut opt = Adam::new(&p, lr, 0.9, 0.999);
    let mut g = p.zeros_like();
    let mut best: Option<(Array1<T>, InversionLossBreakdown)> = None;
    for k in 0..=steps {
        let z: Array2<T> = flatten(p.get(0).clone());
        let (bd, gz) = latent_loss(gen, dis, &x, &f_real, &z, lambda, None);
        if best.as_ref().is_none_or(|(_, b)| bd.total < b.total) {
            best = Some((z.row(0).to_owned(), bd));
        }
        if k == steps {
            break;
        }
        *g.get_mut(0) = gz.into_dyn();
        opt.step(&mut p, &g);
    }
    Ok(best.expect("at least one evaluation"))
}

/// Summed squared residual `Σ‖I − I′‖²` per image.
pub fn anomaly_scores<T: Scalar>(invgen: &InvGenerator<T>, gen: &Generator<T>, images: &[Array3<T>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
        let x = stack(&views);
        let r = reconstruct(invgen, gen, &x);
        for i in 0..chunk.len() {
            let a = x.index_axis(Axis(0), i);
            let b = r.index_axis(Axis(0), i);
            out.push(a.iter().zip(b.iter()).map(|(p, q)| ((*p - *q) * (*p - *q)).as_f64()).sum());
        }
    }
    out
}

/// Traversable iff the summed squared residual is below `tau`.
pub fn classify_unsupervised<T: Scalar>(
    invgen: &InvGenerator<T>,
    gen: &Generator<T>,
    image: &Array3<T>,
    tau: f64,
) -> bool {
    anomaly_scores(invgen, gen, std::slice::from_ref(image))[0] < tau
}

/// Threshold maximizing balanced accuracy on validation scores, placed
/// halfway between adjacent sorted scores. Returns `(tau, accuracy)`.
pub fn select_tau(pos_scores: &[f64], neg_scores: &[f64]) -> (f64, f64) {
    let mut all: Vec<f64> = pos_scores.iter().chain(neg_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = Vec::with_capacity(all.len() + 1);
    candidates.push(all.first().map_or(1.0, |v| v * 0.5));
    candidates.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(all.last().map_or(1.0, |v| v * 2.0 + 1.0));
    let acc = |tau: f64| {
        let tp = pos_scores.iter().filter(|&&s| s < tau).count() as f64;
        let tn = neg_scores.iter().filter(|&&s| s >= tau).count() as f64;
        0.5 * (tp / pos_scores.len().max(1) as f64 + tn / neg_scores.len().max(1) as f64)
    };
    candidates
        .into_iter()
        .filter(|t| *t > 0.0)
        .map(|t| (t, acc(t)))
        .fold((1.0, -1.0), |best, c| if c.1 > best.1 { c } else { best })
}

/// Mean absolute residual inside vs. outside a pixel box `[y0, y1) × [x0, x1)`.
pub fn residual_inside_outside<T: Scalar>(
    image: &Array3<T>,
    recon: &Array3<T>,
    (y0, y1, x0, x1): (usize, usize, usize, usize),
) -> (f64, f64) {
    let diff = (image - recon).mapv(|v| v.abs().as_f64());
    let inside = diff.slice(s![.., y0..y1, x0..x1]);
    let n_in = inside.len() as f64;
    let sum_in = inside.sum();
    let n_out = diff.len() as f64 - n_in;
    (sum_in / n_in, (diff.sum() - sum_in) / n_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nets(seed: u64) -> (Generator<f64>, Discriminator<f64>, InvGenerator<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ArchConfig::reduced(3);
        (Generator::new(a, &mut rng), Discriminator::new(a, &mut rng), InvGenerator::new(a, &mut rng))
    }

    fn image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, 16, 16), || rand::Rng::random_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn invert_shape_and_determinism() {
        let (gen, _, inv) = nets(0);
        let x = image(1);
        let z = inv.invert_one(&x);
        assert_eq!(z.len(), 8);
        assert!(z.iter().all(|v| v.is_finite()));
        assert_eq!(z, inv.invert_one(&x));
        let r = reconstruct(&inv, &gen, &x.clone().insert_axis(Axis(0)).into_dyn());
        assert_eq!(r.shape(), &[1, 3, 16, 16]);
        assert!(r.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn lambda_endpoints_isolate_terms() {
        let (gen, dis, _) = nets(2);
        let x = image(3).insert_axis(Axis(0)).into_dyn();
        let f = dis.features(&x);
        let z = crate::dcgan::sample_latent::<f64, _>(1, 8, &mut ChaCha8Rng::seed_from_u64(4));
        let (b0, g0) = latent_loss(&gen, &dis, &x, &f, &z, 0.0, None);
        let (b1, g1) = latent_loss(&gen, &dis, &x, &f, &z, 1.0, None);
        let (bh, gh) = latent_loss(&gen, &dis, &x, &f, &z, 0.5, None);
        assert_eq!(b0.total, b0.residual);
        assert_eq!(b1.total, b1.discriminator);
        let mix = (&g0 + &g1) * 0.5;
        assert!(gh.iter().zip(mix.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((bh.total - 0.5 * (b0.residual + b1.discriminator)).abs() < 1e-12);
    }

    #[test]
    fn frozen_nets_are_untouched() {
        let (gen, dis, _) = nets(5);
        let data: Vec<Array3<f32>> = (0..6).map(|i| image(10 + i).mapv(|v| v as f32)).collect();
        let (g32, d32) = (
            Generator::from_params(gen.arch, gen.params.cast()).unwrap(),
            Discriminator::from_params(dis.arch, dis.params.cast()).unwrap(),
        );
        let (cg, cd) = (g32.params.checksum(), d32.params.checksum());
        let cfg = InvGenConfig { epochs: 2, batch: 3, ..InvGenConfig::default() };
        let out = train_invgen(&data, &g32, &d32, &cfg, &data[..2], None).unwrap();
        assert_eq!(g32.params.checksum(), cg);
        assert_eq!(d32.params.checksum(), cd);
        assert!(out.trained_generator.is_none());
        assert_eq!(out.curves.len(), 2);
        let ae = train_invgen(&data, &g32, &d32, &InvGenConfig { unfreeze_generator: true, ..cfg }, &[], None).unwrap();
        assert_ne!(ae.trained_generator.unwrap().params.checksum(), cg);
        assert_eq!(g32.params.checksum(), cg);
    }

    #[test]
    fn backprop_search_contract() {
        let (gen, dis, _) = nets(6);
        let x = image(7);
        assert!(invert_by_backprop(&gen, &dis, &x, 0, 0.1, 0.1, 0).is_err());
        let z0: Array2<f64> = crate::dcgan::sample_latent(1, 8, &mut ChaCha8Rng::seed_from_u64(9));
        let (z, _) = invert_by_backprop(&gen, &dis, &x, 1, 0.0, 0.1, 9).unwrap();
        assert_eq!(z, z0.row(0));
        let x4 = x.clone().insert_axis(Axis(0)).into_dyn();
        let f = dis.features(&x4);
        let (initial, _) = latent_loss(&gen, &dis, &x4, &f, &z0, 0.1, None);
        let (_, best) = invert_by_backprop(&gen, &dis, &x, 20, 0.1, 0.1, 9).unwrap();
        assert!(best.total <= initial.total);
    }

    #[test]
    fn threshold_endpoints() {
        let (gen, _, inv) = nets(8);
        let x = image(9);
        assert!(!classify_unsupervised(&inv, &gen, &x, 1e-300));
        assert!(classify_unsupervised(&inv, &gen, &x, 1e300));
        let (tau, acc) = select_tau(&[1.0, 2.0, 3.0], &[4.0, 5.0]);
        assert_eq!((tau, acc), (3.5, 1.0));
    }

    #[test]
    fn inside_outside_split() {
        let a = Array3::<f64>::zeros((1, 4, 4));
        let mut b = a.clone();
        b[[0, 1, 1]] = 2.0;
        let (i, o) = residual_inside_outside(&a, &b, (0, 2, 0, 2));
        assert_eq!((i, o), (0.5, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn total_is_the_convex_combination(r in 0.0f64..10.0, d in 0.0f64..10.0, l in 0.0f64..=1.0) {
            let b = InversionLossBreakdown::new(r, d, l);
            prop_assert_eq!(b.total, (1.0 - l) * r + l * d);
        }
    }
}

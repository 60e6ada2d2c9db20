use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ArchConfig, Discriminator, Generator};
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, Stage};
use crate::nn::{sigmoid, stack, Adam, ParamSet};
use crate::scalar::Scalar;
use crate::train::{shuffled_batches, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Fraction of real and generated images the discriminator classifies
    /// correctly, averaged over both.
    pub d_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GanOutcome<T> {
    pub gen: Generator<T>,
    pub dis: Discriminator<T>,
    pub curves: Vec<EpochStats>,
}

/// Binary cross-entropy on a logit, and its derivative `σ(l) − y`.
fn bce_logit<T: Scalar>(l: T, y: T) -> (T, T) {
    let loss = l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p();
    (loss, sigmoid(l) - y)
}

fn logits_of<T: Scalar>(out: &ArrayD<T>) -> Vec<T> {
    out.iter().copied().collect()
}

/// Mean BCE against a constant target with the gradient w.r.t. the logits.
fn bce_batch<T: Scalar>(out: &ArrayD<T>, target: f64) -> (T, ArrayD<T>, usize) {
    let n = T::lit(out.shape()[0] as f64);
    let y = T::lit(target);
    let mut loss = T::zero();
    let mut correct = 0;
    let grad = out.mapv(|l| {
        let (li, gi) = bce_logit(l, y);
        loss += li;
        gi / n
    });
    for l in logits_of(out) {
        if (l > T::zero()) == (target > 0.5) {
            correct += 1;
        }
    }
    (loss / n, grad, correct)
}

/// Discriminator loss `−mean log D(x) − mean log(1 − D(G(z)))`; parameter
/// gradients of the discriminator accumulate into `grads`.
pub fn discriminator_loss<T: Scalar>(
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    real: &ArrayD<T>,
    z: &Array2<T>,
    grads: Option<&mut ParamSet<T>>,
) -> T {
    let fake = gen.generate(z);
    d_step(dis, real, fake, grads).0
}

/// Non-saturating generator loss `−mean log D(G(z))`; parameter gradients
/// of the generator accumulate into `grads`.
pub fn generator_loss<T: Scalar>(
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    z: &Array2<T>,
    grads: Option<&mut ParamSet<T>>,
) -> T {
    let tape = gen.forward(z.clone().into_dyn());
    g_step(gen, &tape, dis, grads)
}

fn d_step<T: Scalar>(
    dis: &Discriminator<T>,
    real: &ArrayD<T>,
    fake: ArrayD<T>,
    mut grads: Option<&mut ParamSet<T>>,
) -> (T, usize) {
    let end = dis.net.len();
    let tr = dis.forward(real.clone());
    let (lr, gr, cr) = bce_batch(tr.output(), 1.0);
    let tf = dis.forward(fake);
    let (lf, gf, cf) = bce_batch(tf.output(), 0.0);
    if grads.is_some() {
        dis.net
            .backward(&dis.params, &tr, end, gr, &[], grads.as_deref_mut());
        dis.net
            .backward(&dis.params, &tf, end, gf, &[], grads.as_deref_mut());
    }
    (lr + lf, cr + cf)
}

fn g_step<T: Scalar>(
    gen: &Generator<T>,
    gen_tape: &crate::nn::Tape<T>,
    dis: &Discriminator<T>,
    grads: Option<&mut ParamSet<T>>,
) -> T {
    let td = dis.forward(gen_tape.output().clone());
    let (loss, g, _) = bce_batch(td.output(), 1.0);
    if grads.is_some() {
        let gimg = dis
            .net
            .backward(&dis.params, &td, dis.net.len(), g, &[], None);
        gen.backward(gen_tape, gimg, grads);
    }
    loss
}

pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, dim), || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Alternating discriminator/generator updates on positive images.
///
/// When `checkpoint` is given, the models are written there after every
/// epoch; a non-finite loss aborts and reports that file as the last good
/// state.
pub fn train_dcgan<T: Scalar>(
    positives: &[Array3<T>],
    arch: ArchConfig,
    cfg: &GanConfig,
    checkpoint: Option<&Path>,
) -> Result<GanOutcome<T>, TrainError> {
    if positives.is_empty() {
        return Err(TrainError::Config("no positive images to train on".into()));
    }
    if cfg.batch == 0 {
        return Err(TrainError::Config("batch must be positive".into()));
    }
    arch.validate().map_err(TrainError::Config)?;
    if positives.iter().any(|p| p.shape() != arch.image_shape()) {
        return Err(TrainError::Config(format!(
            "positive images must have shape {:?}",
            arch.image_shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::new(arch, &mut rng);
    let mut dis = Discriminator::new(arch, &mut rng);
    let mut opt_g = Adam::new(&gen.params, cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(&dis.params, cfg.lr, cfg.beta1, cfg.beta2);
    let mut gg = gen.params.zeros_like();
    let mut gd = dis.params.zeros_like();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let (mut d_sum, mut g_sum, mut correct, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for idx in shuffled_batches(positives.len(), cfg.batch, &mut rng) {
            let views: Vec<_> = idx.iter().map(|&i| positives[i].view()).collect();
            let real = stack(&views);
            let z = sample_latent::<T, _>(idx.len(), arch.z_dim, &mut rng);
            let gen_tape = gen.forward(z.into_dyn());

            gd.fill_zero();
            let (d_loss, c) = d_step(&dis, &real, gen_tape.output().clone(), Some(&mut gd));
            opt_d.step(&mut dis.params, &gd);

            gg.fill_zero();
            let g_loss = g_step(&gen, &gen_tape, &dis, Some(&mut gg));
            opt_g.step(&mut gen.params, &gg);

            if !(d_loss.is_finite() && g_loss.is_finite()) || !gen.params.all_finite() || !dis.params.all_finite() {
                return Err(TrainError::Diverged { stage: "gan", epoch, last_good });
            }
            d_sum += d_loss.as_f64();
            g_sum += g_loss.as_f64();
            correct += c;
            seen += 2 * idx.len();
            batches += 1;
        }
        curves.push(EpochStats {
            epoch,
            d_loss: d_sum / batches as f64,
            g_loss: g_sum / batches as f64,
            d_accuracy: correct as f64 / seen as f64,
        });
        if let Some(path) = checkpoint {
            save_gan(path, &gen, &dis, cfg, epoch + 1)?;
            last_good = Some(path.to_path_buf());
        }
    }
    Ok(GanOutcome { gen, dis, curves })
}

pub fn save_gan<T: Scalar>(
    path: &Path,
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    cfg: &GanConfig,
    epoch: usize,
) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::new(
        Stage::Gan,
        gen.arch,
        cfg.seed,
        epoch,
        serde_json::to_value(cfg).expect("config serializes"),
    );
    ck.add_group("gen", gen.net.describe(), &gen.params);
    ck.add_group("dis", dis.net.describe(), &dis.params);
    ck.save(path)
}

pub fn load_gan<T: Scalar>(path: &Path) -> Result<(Generator<T>, Discriminator<T>, CheckpointMeta), CheckpointError> {
    let ck = Checkpoint::<T>::load(path)?;
    if ck.meta.stage != Stage::Gan {
        return Err(CheckpointError::Mismatch {
            field: "stage".into(),
            expected: "gan".into(),
            found: ck.meta.stage.as_str().into(),
        });
    }
    let arch = ck.meta.arch;
    let gen = Generator::from_params(arch, ck.group("gen")?.clone())?;
    let dis = Discriminator::from_params(arch, ck.group("dis")?.clone())?;
    Ok((gen, dis, ck.meta))
}

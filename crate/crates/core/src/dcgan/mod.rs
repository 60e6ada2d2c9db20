//! n-channel DCGAN: generator, discriminator with an exposed feature layer,
//! and adversarial training on positive-only data.

mod train;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, Axis, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointError;
use crate::nn::{sigmoid, Layer, NetBuilder, ParamSet, Sequential, Tape};
use crate::scalar::Scalar;

pub use train::{
    discriminator_loss, generator_loss, load_gan, sample_latent, save_gan, train_dcgan, EpochStats, GanConfig,
    GanOutcome,
};

/// Weight initialization standard deviation for every convolutional net.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Network shape shared by the generator, discriminator and inverse generator.
///
/// The ladder has `blocks` stride-2 stages between `image_size` and
/// `image_size / 2^blocks`; channel widths double from `base_width` on the
/// way down and halve on the way up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: usize,
    pub z_dim: usize,
    pub image_size: usize,
    pub base_width: usize,
    pub blocks: usize,
}

impl ArchConfig {
    /// 128×128 input, 8×8×512 feature map, 100-dim latent.
    pub fn paper(channels: usize) -> Self {
        Self { channels, z_dim: 100, image_size: 128, base_width: 64, blocks: 4 }
    }

    /// Laptop-scale default: 32×32 input, 4×4×64 feature map.
    pub fn desk(channels: usize) -> Self {
        Self { channels, z_dim: 100, image_size: 32, base_width: 16, blocks: 3 }
    }

    /// Tiny nets for finite-difference gradient checks.
    pub fn reduced(channels: usize) -> Self {
        Self { channels, z_dim: 8, image_size: 16, base_width: 4, blocks: 2 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channels == 0 || self.z_dim == 0 || self.base_width == 0 || self.blocks == 0 {
            return Err("channels, z_dim, base_width and blocks must be positive".into());
        }
        if self.image_size % (1 << self.blocks) != 0 || self.image_size >> self.blocks == 0 {
            return Err(format!(
                "image_size {} is not divisible by 2^blocks = {}",
                self.image_size,
                1 << self.blocks
            ));
        }
        Ok(())
    }

    pub fn top_width(&self) -> usize {
        self.base_width << (self.blocks - 1)
    }

    pub fn start_size(&self) -> usize {
        self.image_size >> self.blocks
    }

    /// Dimension of the discriminator feature `f`.
    pub fn feature_dim(&self) -> usize {
        self.top_width() * self.start_size() * self.start_size()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Strided-convolution ladder from the image down to the feature map,
/// followed by flattening. Returns the layer index of the feature output.
pub(crate) fn conv_ladder<T: Scalar, R: Rng + ?Sized>(b: &mut NetBuilder<'_, T, R>, arch: &ArchConfig) -> usize {
    for i in 0..arch.blocks {
        let in_c = if i == 0 { arch.channels } else { arch.base_width << (i - 1) };
        b.conv_down(&format!("conv{i}"), in_c, arch.base_width << i, arch.image_size >> i);
        if i > 0 {
            b.layer(Layer::PixelNorm);
        }
        b.layer(Layer::LeakyRelu(LEAKY_SLOPE));
    }
    let feature_end = b.net.len();
    b.layer(Layer::Reshape(vec![arch.feature_dim()]));
    feature_end
}

fn check_layout<T: Scalar>(fresh: &ParamSet<T>, loaded: &ParamSet<T>, what: &str) -> Result<(), CheckpointError> {
    let ok = fresh.len() == loaded.len()
        && fresh
            .iter()
            .zip(loaded.iter())
            .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if ok {
        Ok(())
    } else {
        Err(CheckpointError::Mismatch {
            field: format!("{what} parameters"),
            expected: format!("{} tensors", fresh.len()),
            found: format!("{} tensors with different names or shapes", loaded.len()),
        })
    }
}

fn check_input<T>(x: &ArrayD<T>, arch: &ArchConfig, what: &str) {
    assert_eq!(
        &x.shape()[1..],
        &arch.image_shape(),
        "{what}: image shape does not match the configured network"
    );
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub arch: ArchConfig,
    pub net: Sequential,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        arch.validate().expect("valid architecture");
        let (s0, top) = (arch.start_size(), arch.top_width());
        let mut b = NetBuilder::new(rng, INIT_STD);
        b.linear("fc", arch.z_dim, top * s0 * s0)
            .layer(Layer::Reshape(vec![top, s0, s0]))
            .layer(Layer::PixelNorm)
            .layer(Layer::Relu);
        for i in 0..arch.blocks {
            let last = i + 1 == arch.blocks;
            let out = if last { arch.channels } else { top >> (i + 1) };
            b.conv_up(&format!("deconv{i}"), top >> i, out, s0 << i);
            if last {
                b.layer(Layer::Tanh);
            } else {
                b.layer(Layer::PixelNorm).layer(Layer::Relu);
            }
        }
        let (net, params) = b.finish();
        Self { arch, net, params }
    }

    /// Rebuilds the layer stack for `arch` and adopts `params`.
    pub fn from_params(arch: ArchConfig, params: ParamSet<T>) -> Result<Self, CheckpointError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Self::new(arch, &mut rng);
        check_layout(&g.params, &params, "generator")?;
        g.params = params;
        Ok(g)
    }

    /// Images `[batch, n, S, S]` in [−1, 1] for latent codes `[batch, z_dim]`.
    pub fn generate(&self, z: &Array2<T>) -> ArrayD<T> {
        assert_eq!(z.ncols(), self.arch.z_dim, "generate: latent dimension mismatch");
        self.net.infer(&self.params, z.clone().into_dyn())
    }

    pub fn generate_one(&self, z: ArrayView1<'_, T>) -> Array3<T> {
        let z = z.to_owned().insert_axis(Axis(0));
        self.generate(&z)
            .index_axis_move(Axis(0), 0)
            .into_dimensionality()
            .expect("3-d image")
    }

    pub fn forward(&self, z: ArrayD<T>) -> Tape<T> {
        assert_eq!(z.shape()[1], self.arch.z_dim, "generator: latent dimension mismatch");
        self.net.forward(&self.params, z)
    }

    /// Propagates `grad` (w.r.t. the generated images) back to the latent
    /// codes, accumulating parameter gradients when `grads` is given.
    pub fn backward(&self, tape: &Tape<T>, grad: ArrayD<T>, grads: Option<&mut ParamSet<T>>) -> ArrayD<T> {
        self.net
            .backward(&self.params, tape, self.net.len(), grad, &[], grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub arch: ArchConfig,
    pub net: Sequential,
    pub params: ParamSet<T>,
    /// Layer index whose output is the feature map `f` (post-activation).
    pub feature_end: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        arch.validate().expect("valid architecture");
        let mut b = NetBuilder::new(rng, INIT_STD);
        let feature_end = conv_ladder(&mut b, &arch);
        b.linear("fc", arch.feature_dim(), 1);
        let (net, params) = b.finish();
        Self { arch, net, params, feature_end }
    }

    pub fn from_params(arch: ArchConfig, params: ParamSet<T>) -> Result<Self, CheckpointError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Self::new(arch, &mut rng);
        check_layout(&d.params, &params, "discriminator")?;
        d.params = params;
        Ok(d)
    }

    /// Real-vs-fake scores in (0, 1) and flattened features `[batch, feature_dim]`.
    pub fn discriminate(&self, images: &ArrayD<T>) -> (Array1<T>, Array2<T>) {
        check_input(images, &self.arch, "discriminate");
        let f = self
            .net
            .infer_prefix(&self.params, images.clone(), self.feature_end);
        let logits = self
            .net
            .infer_range(&self.params, f.clone(), self.feature_end, self.net.len());
        let scores = logits.iter().map(|&l| sigmoid(l)).collect();
        (scores, flatten(f))
    }

    pub fn discriminate_one(&self, image: &Array3<T>) -> (T, Array1<T>) {
        let x = image.clone().insert_axis(Axis(0)).into_dyn();
        let (s, f) = self.discriminate(&x);
        (s[0], f.index_axis_move(Axis(0), 0))
    }

    /// Feature map `f` only, flattened to `[batch, feature_dim]`.
    pub fn features(&self, images: &ArrayD<T>) -> Array2<T> {
        check_input(images, &self.arch, "features");
        flatten(
            self.net
                .infer_prefix(&self.params, images.clone(), self.feature_end),
        )
    }

    pub fn forward(&self, images: ArrayD<T>) -> Tape<T> {
        check_input(&images, &self.arch, "discriminator");
        self.net.forward(&self.params, images)
    }

    /// Forward pass that stops at the feature map.
    pub fn forward_features(&self, images: ArrayD<T>) -> Tape<T> {
        check_input(&images, &self.arch, "discriminator");
        let prefix = Sequential {
            layers: self.net.layers[..self.feature_end].to_vec(),
        };
        prefix.forward(&self.params, images)
    }

    /// Input gradient from a gradient w.r.t. the flattened features, using a
    /// tape from [`Discriminator::forward_features`] or a full forward pass.
    pub fn backward_features(&self, tape: &Tape<T>, grad_f: &Array2<T>) -> ArrayD<T> {
        let g = grad_f
            .clone()
            .into_shape_with_order(tape.acts[self.feature_end].raw_dim())
            .expect("feature gradient shape");
        self.net
            .backward(&self.params, tape, self.feature_end, g, &[], None)
    }
}

pub(crate) fn flatten<T: Clone>(x: ArrayD<T>) -> Array2<T> {
    let b = x.shape()[0];
    let rest = x.len() / b.max(1);
    x.into_shape_with_order(IxDyn(&[b, rest]))
        .expect("contiguous")
        .into_dimensionality::<Ix2>()
        .expect("2-d")
}

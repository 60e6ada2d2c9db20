//! Finite-difference checks of every hand-written backward pass, run in f64
//! on the reduced architecture.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcgan::{discriminator_loss, generator_loss, sample_latent, ArchConfig, Discriminator, Generator};
use crate::heads::{FeatureBatch, FeatureSubset, GonetHead, TemporalHead};
use crate::invgen::{latent_loss, InvGenerator};
use crate::nn::ParamSet;

/// Central-difference step for the heads.
/// Central-difference steps. An entry is compared only where both agree.
pub const STEPS: (f64, f64) = (1e-5, 1e-6);
/// Largest relative disagreement between the two steps for the loss to
/// count as smooth around an entry.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients at round-off level
/// are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Central differences of `f` around 0 at both steps, or `None` when they
/// disagree: a LeakyReLU or absolute-value kink lies within the larger step,
/// where no finite difference is meaningful.
pub fn smooth_difference(f: &mut impl FnMut(f64) -> f64) -> Option<f64> {
    let mut cd = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let coarse = cd(STEPS.0);
    let fine = cd(STEPS.1);
    (relative_error(coarse, fine) <= SMOOTH_TOL).then_some(fine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Sampled entries passed over because the loss has a kink next to them.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: Option<f64>) {
        match numeric {
            Some(n) => {
                self.checked += 1;
                self.max_rel_error = self.max_rel_error.max(relative_error(analytic, n));
            }
            None => self.skipped += 1,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `analytic` with central differences of `loss` at `samples`
/// parameter entries drawn uniformly over all entries of `params`.
pub fn check_params(
    name: &str,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    samples: usize,
    seed: u64,
    loss: impl Fn(&ParamSet<f64>) -> f64,
) -> GradCheck {
    let mut p = params.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { name: name.into(), checked: 0, skipped: 0, max_rel_error: 0.0 };
    while out.checked < samples && out.skipped < 4 * samples {
        let mut k = rng.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let v = p.flat_get(t, k);
        let num = smooth_difference(&mut |d| {
            p.flat_set(t, k, v + d);
            loss(&p)
        });
        p.flat_set(t, k, v);
        out.record(analytic.flat_get(t, k), num);
    }
    out
}

/// Same, over the entries of a plain array input.
pub fn check_input(
    name: &str,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    samples: usize,
    seed: u64,
    loss: impl Fn(&ArrayD<f64>) -> f64,
) -> GradCheck {
    let mut x = x.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.len();
    let mut out = GradCheck { name: name.into(), checked: 0, skipped: 0, max_rel_error: 0.0 };
    while out.checked < samples && out.skipped < 4 * samples {
        let k = rng.random_range(0..n);
        let v = x.as_slice().expect("standard layout")[k];
        let num = smooth_difference(&mut |d| {
            x.as_slice_mut().expect("standard layout")[k] = v + d;
            loss(&x)
        });
        x.as_slice_mut().expect("standard layout")[k] = v;
        out.record(analytic.as_slice().expect("standard layout")[k], num);
    }
    out
}

fn images(arch: &ArchConfig, batch: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let [c, h, w] = arch.image_shape();
    ArrayD::from_shape_simple_fn(vec![batch, c, h, w], || rng.random_range(-1.0..1.0))
}

/// Discriminator and generator adversarial losses w.r.t. their parameters.
pub fn adversarial(samples: usize, seed: u64) -> Vec<GradCheck> {
    let arch = ArchConfig::reduced(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::<f64>::new(arch, &mut rng);
    let dis = Discriminator::<f64>::new(arch, &mut rng);
    let real = images(&arch, 4, &mut rng);
    let z = sample_latent::<f64, _>(4, arch.z_dim, &mut rng);

    let mut gd = dis.params.zeros_like();
    discriminator_loss(&gen, &dis, &real, &z, Some(&mut gd));
    let d = check_params("discriminator loss / D params", &dis.params, &gd, samples, seed ^ 1, |p| {
        let d = Discriminator { params: p.clone(), ..dis.clone() };
        discriminator_loss(&gen, &d, &real, &z, None)
    });

    let mut gg = gen.params.zeros_like();
    generator_loss(&gen, &dis, &z, Some(&mut gg));
    let g = check_params("generator loss / G params", &gen.params, &gg, samples, seed ^ 2, |p| {
        let g = Generator { params: p.clone(), ..gen.clone() };
        generator_loss(&g, &dis, &z, None)
    });
    vec![d, g]
}

/// `L(z)` w.r.t. `z`, and the inverse generator's training loss
/// `L(InvGen(I))` w.r.t. its parameters.
pub fn latent(samples: usize, seed: u64, lambda: f64) -> Vec<GradCheck> {
    let arch = ArchConfig::reduced(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::<f64>::new(arch, &mut rng);
    let dis = Discriminator::<f64>::new(arch, &mut rng);
    let inv = InvGenerator::<f64>::new(arch, &mut rng);
    let x = images(&arch, 16, &mut rng);
    let f_real = dis.features(&x);

    // each code only affects its own image, so codes are checked one image
    // at a time to keep the batch mean from shrinking them to round-off
    let z = sample_latent::<f64, _>(16, arch.z_dim, &mut rng);
    let per_image = samples.div_ceil(16);
    let mut cz = GradCheck { name: "L(z) / z".into(), checked: 0, skipped: 0, max_rel_error: 0.0 };
    for i in 0..16usize {
        let xi = x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned().into_dyn();
        let fi = f_real.slice(ndarray::s![i..i + 1, ..]).to_owned();
        let zi = z.slice(ndarray::s![i..i + 1, ..]).to_owned();
        let (_, gz) = latent_loss(&gen, &dis, &xi, &fi, &zi, lambda, None);
        let c = check_input("", &zi.into_dyn(), &gz.into_dyn(), per_image, seed ^ 3 ^ i as u64, |zz| {
            let zz: Array2<f64> = zz.clone().into_dimensionality().expect("2-d latent");
            latent_loss(&gen, &dis, &xi, &fi, &zz, lambda, None).0.total
        });
        cz.checked += c.checked;
        cz.skipped += c.skipped;
        cz.max_rel_error = cz.max_rel_error.max(c.max_rel_error);
    }

    // fewer images keep the parameter check clear of most residual kinks
    let x = x.slice(ndarray::s![..4, .., .., ..]).to_owned().into_dyn();
    let f_real = f_real.slice(ndarray::s![..4, ..]).to_owned();
    let et = inv.forward(x.clone());
    let z = crate::dcgan::flatten(et.output().clone());
    let (_, gz) = latent_loss(&gen, &dis, &x, &f_real, &z, lambda, None);
    let gz = gz.into_shape_with_order(et.output().raw_dim()).expect("latent shape");
    let mut gi = inv.params.zeros_like();
    inv.net.backward(&inv.params, &et, inv.net.len(), gz, &[], Some(&mut gi));
    let ci = check_params("L(InvGen(I)) / InvGen params", &inv.params, &gi, samples, seed ^ 4, |p| {
        let i = InvGenerator { params: p.clone(), ..inv.clone() };
        latent_loss(&gen, &dis, &x, &f_real, &i.invert(&x), lambda, None).0.total
    });
    vec![cz, ci]
}

fn random_features(dims: [usize; 3], rows: usize, rng: &mut ChaCha8Rng) -> FeatureBatch<f64> {
    let mut m = |d: usize| Array2::from_shape_simple_fn((rows, d), || rng.random_range(-1.0..1.0));
    FeatureBatch { r: m(dims[0]), d: m(dims[1]), f: m(dims[2]) }
}

fn reduced_dims() -> [usize; 3] {
    let arch = ArchConfig::reduced(3);
    [arch.image_len(), arch.feature_dim(), arch.feature_dim()]
}

/// Single-frame head MSE w.r.t. its parameters.
pub fn head_mse(samples: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = reduced_dims();
    let head = GonetHead::<f64>::new(FeatureSubset::ALL, dims, &mut rng);
    let batch = random_features(dims, 6, &mut rng);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mut g = head.params.zeros_like();
    head.mse_loss(&batch, &labels, Some(&mut g));
    check_params("head MSE / head params", &head.params, &g, samples, seed ^ 5, |p| {
        head.clone().with_params(p.clone()).expect("same layout").mse_loss(&batch, &labels, None)
    })
}

/// Temporal loss through the recurrent head (back-propagation through time).
pub fn temporal_bptt(samples: usize, seed: u64, lambda: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = reduced_dims();
    let head = TemporalHead::<f64>::new(FeatureSubset::ALL, dims, 8, &mut rng);
    let seq = random_features(dims, 7, &mut rng);
    let labels = [1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let mut g = head.params.zeros_like();
    head.sequence_loss(&seq, &labels, lambda, 1.0, Some(&mut g));
    check_params("temporal loss / BPTT params", &head.params, &g, samples, seed ^ 6, |p| {
        head.clone().with_params(p.clone()).expect("same layout").sequence_loss(&seq, &labels, lambda, 1.0, None)
    })
}

/// Every check above with `samples` entries each.
pub fn run_all(samples: usize, seed: u64) -> Vec<GradCheck> {
    let mut out = adversarial(samples, seed);
    out.extend(latent(samples, seed, 0.1));
    out.push(head_mse(samples, seed));
    out.push(temporal_bptt(samples, seed, 0.5));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinks_are_detected() {
        assert!(smooth_difference(&mut |h| (0.3 + h).sin()).is_some_and(|d| (d - 0.3f64.cos()).abs() < 1e-9));
        // |x| with the kink 3e-6 away: the coarse step straddles it
        assert_eq!(smooth_difference(&mut |h| (3e-6 + h).abs()), None);
        assert!(smooth_difference(&mut |h| (3e-5 + h).abs()).is_some_and(|d| (d - 1.0).abs() < 1e-9));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", ArrayD::from_elem(vec![4], 0.5));
        let mut g = p.zeros_like();
        g.get_mut(0).fill(2.0 * 0.5 * 1.001);
        let c = check_params("square", &p, &g, 100, 1, |p| p.get(0).mapv(|v| v * v).sum());
        assert_eq!((c.checked, c.skipped), (100, 0));
        assert!(!c.passes(1e-4));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!(relative_error(1e-12, 0.0) < 1e-4);
    }

    #[test]
    fn all_backward_passes_match_finite_differences() {
        for c in run_all(128, 11) {
            assert!(c.skipped <= c.checked / 4, "{}: {} of {} entries sit on kinks", c.name, c.skipped, c.checked);
            assert!(c.checked >= 100, "{}: only {} entries", c.name, c.checked);
            assert!(c.passes(1e-4), "{}: max relative error {:.3e}", c.name, c.max_rel_error);
        }
    }
}

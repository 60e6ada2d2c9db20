use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::dcgan::{Discriminator, Generator};
use crate::invgen::InvGenerator;
use crate::nn::stack;
use crate::scalar::Scalar;

const CHUNK: usize = 64;

/// `φ_R = |I − I′|`, `φ_D = |f(I) − f(I′)|` and `φ_F = f(I)`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple<T> {
    pub phi_r: Array1<T>,
    pub phi_d: Array1<T>,
    pub phi_f: Array1<T>,
}

/// Row-aligned features of many frames, one matrix per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    pub r: Array2<T>,
    pub d: Array2<T>,
    pub f: Array2<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            r: Array2::zeros((0, dims[0])),
            d: Array2::zeros((0, dims[1])),
            f: Array2::zeros((0, dims[2])),
        }
    }

    pub fn len(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.r.ncols(), self.d.ncols(), self.f.ncols()]
    }

    pub fn get(&self, feature: Feature) -> &Array2<T> {
        match feature {
            Feature::R => &self.r,
            Feature::D => &self.d,
            Feature::F => &self.f,
        }
    }

    pub fn row(&self, i: usize) -> FeatureTriple<T> {
        FeatureTriple {
            phi_r: self.r.row(i).to_owned(),
            phi_d: self.d.row(i).to_owned(),
            phi_f: self.f.row(i).to_owned(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            r: self.r.select(Axis(0), idx),
            d: self.d.select(Axis(0), idx),
            f: self.f.select(Axis(0), idx),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        Self {
            r: self.r.slice(s![start..end, ..]).to_owned(),
            d: self.d.slice(s![start..end, ..]).to_owned(),
            f: self.f.slice(s![start..end, ..]).to_owned(),
        }
    }

    pub fn concat(parts: &[&Self]) -> Self {
        let cat = |g: fn(&Self) -> &Array2<T>| {
            let views: Vec<_> = parts.iter().map(|p| g(p).view()).collect();
            concatenate(Axis(0), &views).expect("matching feature widths")
        };
        Self {
            r: cat(|p| &p.r),
            d: cat(|p| &p.d),
            f: cat(|p| &p.f),
        }
    }

    pub fn from_triples(items: &[FeatureTriple<T>]) -> Self {
        let rows = |g: fn(&FeatureTriple<T>) -> &Array1<T>| {
            let views: Vec<_> = items.iter().map(|t| g(t).view()).collect();
            ndarray::stack(Axis(0), &views).expect("matching feature widths")
        };
        Self {
            r: rows(|t| &t.phi_r),
            d: rows(|t| &t.phi_d),
            f: rows(|t| &t.phi_f),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureBatch<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        FeatureBatch {
            r: c(&self.r),
            d: c(&self.d),
            f: c(&self.f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    R,
    D,
    F,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::R, Feature::D, Feature::F];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Non-empty subset of {R, D, F}, written like `R+D+F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSubset([bool; 3]);

impl FeatureSubset {
    pub const ALL: FeatureSubset = FeatureSubset([true; 3]);

    pub fn new(features: &[Feature]) -> Option<Self> {
        let mut m = [false; 3];
        for f in features {
            m[f.index()] = true;
        }
        m.iter().any(|&b| b).then_some(Self(m))
    }

    pub fn only(f: Feature) -> Self {
        Self::new(&[f]).expect("one feature")
    }

    pub fn contains(&self, f: Feature) -> bool {
        self.0[f.index()]
    }

    pub fn features(&self) -> Vec<Feature> {
        Feature::ALL.into_iter().filter(|f| self.contains(*f)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .features()
            .into_iter()
            .map(|x| match x {
                Feature::R => "R",
                Feature::D => "D",
                Feature::F => "F",
            })
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for FeatureSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut v = Vec::new();
        for part in s.split('+') {
            v.push(match part.trim() {
                "R" | "r" => Feature::R,
                "D" | "d" => Feature::D,
                "F" | "f" => Feature::F,
                other => return Err(format!("unknown feature `{other}` in subset `{s}`")),
            });
        }
        Self::new(&v).ok_or_else(|| format!("empty feature subset `{s}`"))
    }
}

impl Serialize for FeatureSubset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeatureSubset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The frozen feature extraction module: generator, discriminator and
/// inverse generator trained on the same channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    pub gen: Generator<T>,
    pub dis: Discriminator<T>,
    pub inv: InvGenerator<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(gen: Generator<T>, dis: Discriminator<T>, inv: InvGenerator<T>) -> Result<Self, String> {
        if gen.arch != dis.arch || gen.arch != inv.arch {
            return Err(format!(
                "feature nets disagree on architecture: gen {:?}, dis {:?}, invgen {:?}",
                gen.arch, dis.arch, inv.arch
            ));
        }
        Ok(Self { gen, dis, inv })
    }

    pub fn channels(&self) -> usize {
        self.gen.arch.channels
    }

    /// Widths of φ_R, φ_D and φ_F.
    pub fn dims(&self) -> [usize; 3] {
        let f = self.gen.arch.feature_dim();
        [self.gen.arch.image_len(), f, f]
    }

    /// Features of a `[batch, n, S, S]` tensor, plus the reconstruction.
    pub fn extract_tensor(&self, x: &ArrayD<T>) -> (FeatureBatch<T>, ArrayD<T>) {
        let recon = self.gen.generate(&self.inv.invert(x));
        let b = x.shape()[0];
        let r = (x - &recon)
            .mapv(T::abs)
            .into_shape_with_order((b, x.len() / b.max(1)))
            .expect("contiguous");
        let f = self.dis.features(x);
        let fr = self.dis.features(&recon);
        let d = (&f - &fr).mapv(T::abs);
        (FeatureBatch { r, d, f }, recon)
    }

    pub fn extract(&self, frames: &[Array3<T>]) -> FeatureBatch<T> {
        let mut parts = Vec::with_capacity(frames.len().div_ceil(CHUNK));
        for chunk in frames.chunks(CHUNK) {
            let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
            parts.push(self.extract_tensor(&stack(&views)).0);
        }
        if parts.is_empty() {
            return FeatureBatch::empty(self.dims());
        }
        FeatureBatch::concat(&parts.iter().collect::<Vec<_>>())
    }

    pub fn extract_one(&self, frame: &Array3<T>) -> FeatureTriple<T> {
        extract_features(&self.gen, &self.dis, &self.inv, frame)
    }
}

/// Feature triple of one frame.
///
/// # Panics
/// When the frame shape differs from the configured networks.
pub fn extract_features<T: Scalar>(
    gen: &Generator<T>,
    dis: &Discriminator<T>,
    inv: &InvGenerator<T>,
    frame: &Array3<T>,
) -> FeatureTriple<T> {
    assert_eq!(
        frame.shape(),
        &gen.arch.image_shape(),
        "extract_features: frame shape does not match the feature networks"
    );
    let x = frame.clone().insert_axis(Axis(0)).into_dyn();
    let recon = gen.generate(&inv.invert(&x)).index_axis_move(Axis(0), 0);
    features_from_reconstruction(dis, frame, &recon.into_dimensionality().expect("3-d"))
}

/// Feature triple of `image` given its reconstruction `recon`.
pub fn features_from_reconstruction<T: Scalar>(
    dis: &Discriminator<T>,
    image: &Array3<T>,
    recon: &Array3<T>,
) -> FeatureTriple<T> {
    let phi_r = (image - recon).mapv(T::abs).into_iter().collect();
    let f = dis.discriminate_one(image).1;
    let fr = dis.discriminate_one(recon).1;
    FeatureTriple {
        phi_d: (&f - &fr).mapv(T::abs),
        phi_f: f,
        phi_r,
    }
}

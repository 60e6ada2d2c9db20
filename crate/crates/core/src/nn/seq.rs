//! Layer stack with a recorded forward tape and manual reverse pass.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::conv::{conv_backward, conv_forward, conv_t_backward, conv_t_forward, ConvGeom};
use super::params::ParamSet;
use crate::scalar::Scalar;

const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x Wᵀ + b`, `W: [out, inp]`.
    Linear {
        w: usize,
        b: usize,
        inp: usize,
        out: usize,
    },
    Conv {
        w: usize,
        b: usize,
        geom: ConvGeom,
        out_c: usize,
    },
    /// `geom` describes the adjoint convolution reading the output map.
    ConvT {
        w: usize,
        b: usize,
        geom: ConvGeom,
        in_c: usize,
    },
    /// Per-sample reshape; the batch dimension is kept.
    Reshape(Vec<usize>),
    /// Normalizes each spatial location's channel vector to unit RMS.
    PixelNorm,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Layer {
    /// Short human-readable description, recorded in checkpoint metadata.
    pub fn describe(&self) -> String {
        match self {
            Layer::Linear { inp, out, .. } => format!("linear {inp}->{out}"),
            Layer::Conv { geom, out_c, .. } => {
                format!("conv{} {}x{}x{} -> {}", geom.k, geom.in_c, geom.in_h, geom.in_w, out_c)
            }
            Layer::ConvT { geom, in_c, .. } => {
                format!("convT{} {} -> {}x{}x{}", geom.k, in_c, geom.in_c, geom.in_h, geom.in_w)
            }
            Layer::Reshape(s) => format!("reshape {s:?}"),
            Layer::PixelNorm => "pixelnorm".into(),
            Layer::Relu => "relu".into(),
            Layer::LeakyRelu(a) => format!("leaky_relu {a}"),
            Layer::Tanh => "tanh".into(),
        }
    }
}

/// Activations recorded by a forward pass: `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub acts: Vec<ArrayD<T>>,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &ArrayD<T> {
        self.acts.last().expect("non-empty tape")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

fn slice<T>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn standard<T: Clone>(x: ArrayD<T>) -> ArrayD<T> {
    if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    }
}

fn batch_of<T>(a: &ArrayD<T>) -> usize {
    a.shape()[0]
}

fn with_shape<T>(batch: usize, per: &[usize], data: Vec<T>) -> ArrayD<T> {
    let mut shape = Vec::with_capacity(per.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(per);
    ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape/data agree")
}

impl Sequential {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers.iter().map(Layer::describe).collect()
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayD<T>) -> Tape<T> {
        let x = standard(x);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let y = layer_forward(layer, params, acts.last().unwrap());
            acts.push(y);
        }
        Tape { acts }
    }

    /// Forward pass without keeping intermediate activations.
    pub fn infer<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayD<T>) -> ArrayD<T> {
        self.layers
            .iter()
            .fold(standard(x), |a, layer| layer_forward(layer, params, &a))
    }

    /// Runs layers `0..end` only.
    pub fn infer_prefix<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayD<T>, end: usize) -> ArrayD<T> {
        self.layers[..end]
            .iter()
            .fold(standard(x), |a, layer| layer_forward(layer, params, &a))
    }

    /// Runs layers `start..end` on `x`, the activation entering `start`.
    pub fn infer_range<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayD<T>, start: usize, end: usize) -> ArrayD<T> {
        self.layers[start..end]
            .iter()
            .fold(standard(x), |a, layer| layer_forward(layer, params, &a))
    }

    /// Reverse pass from `acts[end]` down to the input.
    ///
    /// `grad` is the loss gradient w.r.t. `tape.acts[end]`; each `(j, g)` in
    /// `inject` is added to the gradient w.r.t. `tape.acts[j]` when the sweep
    /// reaches it. Parameter gradients accumulate into `grads` when provided.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        tape: &Tape<T>,
        end: usize,
        grad: ArrayD<T>,
        inject: &[(usize, &ArrayD<T>)],
        mut grads: Option<&mut ParamSet<T>>,
    ) -> ArrayD<T> {
        let mut g = grad;
        for i in (0..end).rev() {
            for (j, extra) in inject {
                if *j == i + 1 {
                    g += *extra;
                }
            }
            g = layer_backward(
                &self.layers[i],
                params,
                &tape.acts[i],
                &tape.acts[i + 1],
                g,
                grads.as_deref_mut(),
            );
        }
        for (j, extra) in inject {
            if *j == 0 {
                g += *extra;
            }
        }
        g
    }
}

fn layer_forward<T: Scalar>(layer: &Layer, params: &ParamSet<T>, x: &ArrayD<T>) -> ArrayD<T> {
    let batch = batch_of(x);
    match layer {
        Layer::Linear { w, b, inp, out } => {
            let xm = x
                .view()
                .into_shape_with_order((batch, *inp))
                .expect("linear input size");
            let wm = params
                .get(*w)
                .view()
                .into_shape_with_order((*out, *inp))
                .unwrap();
            let bv = params.get(*b).view().into_shape_with_order(*out).unwrap();
            let mut y = xm.dot(&wm.t());
            y += &bv;
            y.into_dyn()
        }
        Layer::Conv { w, b, geom, out_c } => {
            let y = conv_forward(
                geom,
                *out_c,
                batch,
                slice(x),
                slice(params.get(*w)),
                slice(params.get(*b)),
            );
            with_shape(batch, &[*out_c, geom.out_h(), geom.out_w()], y)
        }
        Layer::ConvT { w, b, geom, in_c } => {
            let y = conv_t_forward(
                geom,
                *in_c,
                batch,
                slice(x),
                slice(params.get(*w)),
                slice(params.get(*b)),
            );
            with_shape(batch, &[geom.in_c, geom.in_h, geom.in_w], y)
        }
        Layer::Reshape(per) => {
            let data = x.iter().copied().collect();
            with_shape(batch, per, data)
        }
        Layer::PixelNorm => pixel_norm_forward(x),
        Layer::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
        Layer::LeakyRelu(a) => {
            let a = T::lit(*a);
            x.mapv(|v| if v > T::zero() { v } else { a * v })
        }
        Layer::Tanh => x.mapv(|v| v.tanh()),
    }
}

fn layer_backward<T: Scalar>(
    layer: &Layer,
    params: &ParamSet<T>,
    x: &ArrayD<T>,
    y: &ArrayD<T>,
    gy: ArrayD<T>,
    grads: Option<&mut ParamSet<T>>,
) -> ArrayD<T> {
    let batch = batch_of(x);
    match layer {
        Layer::Linear { w, b, inp, out } => {
            let xm = x.view().into_shape_with_order((batch, *inp)).unwrap();
            let gym = gy.view().into_shape_with_order((batch, *out)).unwrap();
            let wm = params
                .get(*w)
                .view()
                .into_shape_with_order((*out, *inp))
                .unwrap();
            if let Some(grads) = grads {
                let gw = gym.t().dot(&xm);
                let gb = gym.sum_axis(ndarray::Axis(0));
                *grads.get_mut(*w) += &gw.into_shape_with_order(params.get(*w).raw_dim()).unwrap();
                *grads.get_mut(*b) += &gb.into_shape_with_order(params.get(*b).raw_dim()).unwrap();
            }
            let gx = gym.dot(&wm);
            gx.into_shape_with_order(x.raw_dim()).unwrap()
        }
        Layer::Conv { w, b, geom, out_c } => {
            let (gw, gb) = split_grads(grads, *w, *b);
            let gx = conv_backward(
                geom,
                *out_c,
                batch,
                slice(x),
                slice(params.get(*w)),
                slice(&gy.as_standard_layout().into_owned()),
                gw,
                gb,
            );
            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
        }
        Layer::ConvT { w, b, geom, in_c } => {
            let (gw, gb) = split_grads(grads, *w, *b);
            let gx = conv_t_backward(
                geom,
                *in_c,
                batch,
                slice(x),
                slice(params.get(*w)),
                slice(&gy.as_standard_layout().into_owned()),
                gw,
                gb,
            );
            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
        }
        Layer::Reshape(_) => {
            let data = gy.iter().copied().collect();
            ArrayD::from_shape_vec(x.raw_dim(), data).unwrap()
        }
        Layer::PixelNorm => pixel_norm_backward(x, &gy),
        Layer::Relu => {
            let mut g = gy;
            ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                if x <= T::zero() {
                    *g = T::zero()
                }
            });
            g
        }
        Layer::LeakyRelu(a) => {
            let a = T::lit(*a);
            let mut g = gy;
            ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                if x <= T::zero() {
                    *g *= a
                }
            });
            g
        }
        Layer::Tanh => {
            let mut g = gy;
            ndarray::Zip::from(&mut g)
                .and(y)
                .for_each(|g, &y| *g *= T::one() - y * y);
            g
        }
    }
}

fn split_grads<T: Scalar>(
    grads: Option<&mut ParamSet<T>>,
    w: usize,
    b: usize,
) -> (Option<&mut [T]>, Option<&mut [T]>) {
    match grads {
        None => (None, None),
        Some(g) => {
            debug_assert!(w < b);
            let (lo, hi) = g.tensors_mut().split_at_mut(b);
            (
                Some(lo[w].as_slice_mut().unwrap()),
                Some(hi[0].as_slice_mut().unwrap()),
            )
        }
    }
}

fn pixel_norm_forward<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let s = x.shape();
    let (batch, c, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
    let xs = slice(x);
    let mut y = vec![T::zero(); xs.len()];
    let cn = T::lit(c as f64);
    let eps = T::lit(PIXEL_NORM_EPS);
    for n in 0..batch {
        let base = n * c * plane;
        for p in 0..plane {
            let mut m = T::zero();
            for ch in 0..c {
                let v = xs[base + ch * plane + p];
                m += v * v;
            }
            let r = T::one() / (m / cn + eps).sqrt();
            for ch in 0..c {
                y[base + ch * plane + p] = xs[base + ch * plane + p] * r;
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), y).unwrap()
}

fn pixel_norm_backward<T: Scalar>(x: &ArrayD<T>, gy: &ArrayD<T>) -> ArrayD<T> {
    let s = x.shape();
    let (batch, c, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
    let xs = slice(x);
    let gy = gy.as_standard_layout();
    let gs = gy.as_slice().unwrap();
    let mut gx = vec![T::zero(); xs.len()];
    let cn = T::lit(c as f64);
    let eps = T::lit(PIXEL_NORM_EPS);
    for n in 0..batch {
        let base = n * c * plane;
        for p in 0..plane {
            let mut m = T::zero();
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                m += xs[i] * xs[i];
                dot += xs[i] * gs[i];
            }
            let r = T::one() / (m / cn + eps).sqrt();
            let k = r * r * r * dot / cn;
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] = r * gs[i] - xs[i] * k;
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
}

/// Incrementally assembles a [`Sequential`] together with its parameters.
pub struct NetBuilder<'a, T, R: Rng + ?Sized> {
    pub params: ParamSet<T>,
    pub net: Sequential,
    rng: &'a mut R,
    init_std: f64,
}

impl<'a, T: Scalar, R: Rng + ?Sized> NetBuilder<'a, T, R> {
    pub fn new(rng: &'a mut R, init_std: f64) -> Self {
        Self {
            params: ParamSet::new(),
            net: Sequential::new(),
            rng,
            init_std,
        }
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> &mut Self {
        self.linear_std(name, inp, out, self.init_std)
    }

    pub fn linear_std(&mut self, name: &str, inp: usize, out: usize, std: f64) -> &mut Self {
        let w = self
            .params
            .push_normal(format!("{name}.weight"), &[out, inp], std, self.rng);
        let b = self.params.push_zeros(format!("{name}.bias"), &[out]);
        self.net.layers.push(Layer::Linear { w, b, inp, out });
        self
    }

    /// Stride-2, 4×4 kernel, padding-1 convolution halving the resolution.
    pub fn conv_down(&mut self, name: &str, in_c: usize, out_c: usize, hw: usize) -> &mut Self {
        let geom = ConvGeom { in_c, in_h: hw, in_w: hw, k: 4, stride: 2, pad: 1 };
        let w = self
            .params
            .push_normal(format!("{name}.weight"), &[out_c, in_c, 4, 4], self.init_std, self.rng);
        let b = self.params.push_zeros(format!("{name}.bias"), &[out_c]);
        self.net.layers.push(Layer::Conv { w, b, geom, out_c });
        self
    }

    /// Stride-2, 4×4 kernel transposed convolution doubling the resolution.
    pub fn conv_up(&mut self, name: &str, in_c: usize, out_c: usize, hw: usize) -> &mut Self {
        let geom = ConvGeom { in_c: out_c, in_h: 2 * hw, in_w: 2 * hw, k: 4, stride: 2, pad: 1 };
        let w = self
            .params
            .push_normal(format!("{name}.weight"), &[in_c, out_c, 4, 4], self.init_std, self.rng);
        let b = self.params.push_zeros(format!("{name}.bias"), &[out_c]);
        self.net.layers.push(Layer::ConvT { w, b, geom, in_c });
        self
    }

    pub fn layer(&mut self, layer: Layer) -> &mut Self {
        self.net.layers.push(layer);
        self
    }

    pub fn finish(self) -> (Sequential, ParamSet<T>) {
        (self.net, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &ArrayD<f64>, target: &ArrayD<f64>) -> f64 {
        y.iter().zip(target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
    }

    #[test]
    fn small_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = NetBuilder::<f64, _>::new(&mut rng, 0.3);
        b.conv_down("c0", 2, 3, 8)
            .layer(Layer::PixelNorm)
            .layer(Layer::LeakyRelu(0.2))
            .conv_up("u0", 3, 2, 4)
            .layer(Layer::Tanh)
            .layer(Layer::Reshape(vec![2 * 8 * 8]))
            .linear("fc", 128, 3);
        let (net, mut params) = b.finish();
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 8, 8]), |i| {
            ((i[0] * 7 + i[1] * 5 + i[2] * 3 + i[3]) % 11) as f64 / 11.0 - 0.5
        });
        let target = ArrayD::from_elem(IxDyn(&[2, 3]), 0.2);
        let tape = net.forward(&params, x.clone());
        let gy = tape.output() - &target;
        let mut grads = params.zeros_like();
        let gx = net.backward(&params, &tape, net.len(), gy, &[], Some(&mut grads));

        let h = 1e-6;
        for t in 0..params.len() {
            for off in (0..params.get(t).len()).step_by(7) {
                let v = params.flat_get(t, off);
                params.flat_set(t, off, v + h);
                let lp = loss(&net.infer(&params, x.clone()), &target);
                params.flat_set(t, off, v - h);
                let lm = loss(&net.infer(&params, x.clone()), &target);
                params.flat_set(t, off, v);
                let num = (lp - lm) / (2.0 * h);
                let ana = grads.flat_get(t, off);
                assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{} {off}: {num} vs {ana}", params.name(t));
            }
        }
        let mut xp = x.clone();
        for off in (0..x.len()).step_by(5) {
            let v = x.as_slice().unwrap()[off];
            xp.as_slice_mut().unwrap()[off] = v + h;
            let lp = loss(&net.infer(&params, xp.clone()), &target);
            xp.as_slice_mut().unwrap()[off] = v - h;
            let lm = loss(&net.infer(&params, xp.clone()), &target);
            xp.as_slice_mut().unwrap()[off] = v;
            let num = (lp - lm) / (2.0 * h);
            let ana = gx.as_slice().unwrap()[off];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()));
        }
    }
}

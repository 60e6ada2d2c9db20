//! Single-layer LSTM cell with explicit state and back-propagation through
//! time.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Ix1, Ix2};

use super::params::ParamSet;
use super::sigmoid;
use crate::scalar::Scalar;

/// Parameter indices of one LSTM layer inside a [`ParamSet`].
///
/// Gates are stacked `[input, forget, cell, output]` along the rows of
/// `w: [4H, I + H]` acting on `[x; h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lstm {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Array1<T>,
    pub c: Array1<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// Values recorded by one step, needed for the reverse sweep.
#[derive(Debug, Clone)]
pub struct LstmStep<T> {
    xh: Array1<T>,
    i: Array1<T>,
    f: Array1<T>,
    g: Array1<T>,
    o: Array1<T>,
    c_prev: Array1<T>,
    tanh_c: Array1<T>,
}

impl Lstm {
    /// Registers the weights; the forget-gate bias starts at one.
    pub fn register<T: Scalar, R: rand::Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / ((input + hidden) as f64).sqrt();
        let w = params.push_normal(format!("{name}.w"), &[4 * hidden, input + hidden], std, rng);
        let b = params.push_zeros(format!("{name}.b"), &[4 * hidden]);
        params
            .get_mut(b)
            .slice_mut(s![hidden..2 * hidden])
            .fill(T::one());
        Self { w, b, input, hidden }
    }

    pub fn step<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: ArrayView1<'_, T>,
        state: &mut LstmState<T>,
    ) -> LstmStep<T> {
        let hsz = self.hidden;
        let mut xh = Array1::<T>::zeros(self.input + hsz);
        xh.slice_mut(s![..self.input]).assign(&x);
        xh.slice_mut(s![self.input..]).assign(&state.h);
        let w = params.get(self.w).view().into_dimensionality::<Ix2>().expect("2-d lstm weight");
        let b = params.get(self.b).view().into_dimensionality::<Ix1>().expect("1-d lstm bias");
        let a: Array1<T> = w.dot(&xh) + b;
        let i = a.slice(s![..hsz]).mapv(sigmoid);
        let f = a.slice(s![hsz..2 * hsz]).mapv(sigmoid);
        let g = a.slice(s![2 * hsz..3 * hsz]).mapv(T::tanh);
        let o = a.slice(s![3 * hsz..]).mapv(sigmoid);
        let c_prev = state.c.clone();
        state.c = &f * &c_prev + &i * &g;
        let tanh_c = state.c.mapv(T::tanh);
        state.h = &o * &tanh_c;
        LstmStep { xh, i, f, g, o, c_prev, tanh_c }
    }

    /// Reverse sweep over recorded steps. `dh[t]` is the loss gradient w.r.t.
    /// the hidden output of step `t`. Returns the gradient w.r.t. each input
    /// and accumulates parameter gradients into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        steps: &[LstmStep<T>],
        dh: &Array2<T>,
        grads: &mut ParamSet<T>,
    ) -> Array2<T> {
        let hsz = self.hidden;
        let w = params.get(self.w).view().into_dimensionality::<Ix2>().expect("2-d");
        let mut dx = Array2::zeros((steps.len(), self.input));
        let mut dh_next = Array1::<T>::zeros(hsz);
        let mut dc_next = Array1::<T>::zeros(hsz);
        let mut dw = Array2::<T>::zeros((4 * hsz, self.input + hsz));
        let mut db = Array1::<T>::zeros(4 * hsz);
        let one = T::one();
        for t in (0..steps.len()).rev() {
            let st = &steps[t];
            let dh_t = &dh.row(t) + &dh_next;
            let do_ = &dh_t * &st.tanh_c;
            let dc = &dc_next + &(&dh_t * &st.o * st.tanh_c.mapv(|v| one - v * v));
            let di = &dc * &st.g;
            let df = &dc * &st.c_prev;
            let dg = &dc * &st.i;
            dc_next = &dc * &st.f;
            let mut da = Array1::<T>::zeros(4 * hsz);
            da.slice_mut(s![..hsz]).assign(&(&di * &st.i.mapv(|v| v * (one - v))));
            da.slice_mut(s![hsz..2 * hsz]).assign(&(&df * &st.f.mapv(|v| v * (one - v))));
            da.slice_mut(s![2 * hsz..3 * hsz]).assign(&(&dg * &st.g.mapv(|v| one - v * v)));
            da.slice_mut(s![3 * hsz..]).assign(&(&do_ * &st.o.mapv(|v| v * (one - v))));
            dw += &da
                .view()
                .insert_axis(Axis(1))
                .dot(&st.xh.view().insert_axis(Axis(0)));
            db += &da;
            let dxh = w.t().dot(&da);
            dx.row_mut(t).assign(&dxh.slice(s![..self.input]));
            dh_next = dxh.slice(s![self.input..]).to_owned();
        }
        *grads.get_mut(self.w) += &dw.into_dyn();
        *grads.get_mut(self.b) += &db.into_dyn();
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamSet<f64>, Lstm, Array2<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let l = Lstm::register(&mut p, "lstm", 3, 4, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(t, j)| ((t * 3 + j) as f64 * 0.37).sin());
        (p, l, x)
    }

    fn loss(p: &ParamSet<f64>, l: &Lstm, x: &Array2<f64>) -> (f64, Vec<LstmStep<f64>>, Array2<f64>) {
        let mut st = LstmState::zeros(l.hidden);
        let mut steps = Vec::new();
        let mut hs = Array2::zeros((x.nrows(), l.hidden));
        for t in 0..x.nrows() {
            steps.push(l.step(p, x.row(t), &mut st));
            hs.row_mut(t).assign(&st.h);
        }
        // weighted sum of hidden outputs so every step contributes
        let wts = Array2::from_shape_fn(hs.raw_dim(), |(t, j)| 1.0 + 0.1 * (t + 2 * j) as f64);
        ((&hs * &wts).sum(), steps, wts)
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let (mut p, l, x) = setup();
        let (_, steps, wts) = loss(&p, &l, &x);
        let mut g = p.zeros_like();
        let dx = l.backward(&p, &steps, &wts, &mut g);
        let h = 1e-6;
        for ti in 0..p.len() {
            for k in 0..p.get(ti).len() {
                let v = p.flat_get(ti, k);
                p.flat_set(ti, k, v + h);
                let up = loss(&p, &l, &x).0;
                p.flat_set(ti, k, v - h);
                let dn = loss(&p, &l, &x).0;
                p.flat_set(ti, k, v);
                let num = (up - dn) / (2.0 * h);
                let a = g.flat_get(ti, k);
                assert!((a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0), "{ti}/{k}: {a} vs {num}");
            }
        }
        for t in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[t, j]] += h;
                let up = loss(&p, &l, &xp).0;
                xp[[t, j]] -= 2.0 * h;
                let dn = loss(&p, &l, &xp).0;
                let num = (up - dn) / (2.0 * h);
                assert!((dx[[t, j]] - num).abs() < 1e-6, "x {t},{j}");
            }
        }
    }

    #[test]
    fn zero_state_and_forget_bias() {
        let (p, l, _) = setup();
        assert!(p.get(l.b).iter().skip(4).take(4).all(|&v| v == 1.0));
        let st = LstmState::<f64>::zeros(4);
        assert!(st.h.iter().chain(st.c.iter()).all(|&v| v == 0.0));
    }
}

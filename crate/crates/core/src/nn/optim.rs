use super::params::ParamSet;
use crate::scalar::Scalar;

/// Adaptive-moment optimizer over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. A learning rate of exactly zero leaves `params` untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for i in 0..params.len() {
            let g = grads.get(i).as_slice().expect("standard layout");
            let m = self.m.get_mut(i).as_slice_mut().expect("standard layout");
            let v = self.v.get_mut(i).as_slice_mut().expect("standard layout");
            let p = params.get_mut(i).as_slice_mut().expect("standard layout");
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut p = ParamSet::<f32>::new();
        p.push_zeros("w", &[4]);
        p.flat_set(0, 1, 0.3);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.flat_set(0, 1, 5.0);
        let mut opt = Adam::new(&p, 0.0, 0.5, 0.999);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn descends_quadratic() {
        let mut p = ParamSet::<f64>::new();
        p.push_zeros("w", &[1]);
        p.flat_set(0, 0, 3.0);
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999);
        for _ in 0..300 {
            let mut g = p.zeros_like();
            g.flat_set(0, 0, 2.0 * p.flat_get(0, 0));
            opt.step(&mut p, &g);
        }
        assert!(p.flat_get(0, 0).abs() < 0.05);
    }
}

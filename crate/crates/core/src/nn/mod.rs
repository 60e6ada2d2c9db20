//! Minimal neural-network toolkit: named parameters, convolution kernels,
//! a taped layer stack with manual reverse mode, an LSTM cell and Adam.

pub mod conv;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod seq;

pub use lstm::{Lstm, LstmState, LstmStep};
pub use optim::Adam;
pub use params::ParamSet;
pub use seq::{Layer, NetBuilder, Sequential, Tape};

use ndarray::{ArrayD, ArrayView3, Axis};

/// Stacks per-sample `[c, h, w]` arrays into a `[batch, c, h, w]` tensor.
pub fn stack<T: Clone>(items: &[ArrayView3<'_, T>]) -> ArrayD<T> {
    ndarray::stack(Axis(0), items)
        .expect("samples share a shape")
        .into_dyn()
}

/// Logistic function, kept strictly inside (0, 1) even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn sigmoid<T: crate::Scalar>(x: T) -> T {
    let p = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    p.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

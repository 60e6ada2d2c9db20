//! Strided 2-D convolution and its transpose via im2col / col2im and GEMM.
//!
//! Tensors are NCHW. Convolution weights are `[out_c, in_c, k, k]`;
//! transposed-convolution weights are `[in_c, out_c, k, k]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;

/// Geometry of a convolution read from an `in_c × in_h × in_w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Unfolds one `[in_c, in_h, in_w]` sample into `[in_c·k·k, out_h·out_w]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view2<T>(s: &[T], r: usize, c: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((r, c), s).expect("matrix view")
}

fn view2_mut<T>(s: &mut [T], r: usize, c: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((r, c), s).expect("matrix view")
}

/// Convolution forward over a batch. `x` is `[batch, in_c, in_h, in_w]` flat,
/// returns `[batch, out_c, out_h, out_w]` flat.
pub fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    out_c: usize,
    batch: usize,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let wm = view2(w, out_c, rows);
    let mut cols = vec![T::zero(); rows * p];
    let mut y = vec![T::zero(); batch * out_c * p];
    for n in 0..batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let ys = &mut y[n * out_c * p..(n + 1) * out_c * p];
        for (o, chunk) in ys.chunks_mut(p).enumerate() {
            chunk.fill(b[o]);
        }
        general_mat_mul(
            T::one(),
            &wm,
            &view2(&cols, rows, p),
            T::one(),
            &mut view2_mut(ys, out_c, p),
        );
    }
    y
}

/// Convolution backward. Accumulates into `gw`/`gb` when given; returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    out_c: usize,
    batch: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let wm = view2(w, out_c, rows);
    let mut cols = vec![T::zero(); rows * p];
    let mut gcols = vec![T::zero(); rows * p];
    let mut gx = vec![T::zero(); batch * g.in_len()];
    for n in 0..batch {
        let gys = view2(&gy[n * out_c * p..(n + 1) * out_c * p], out_c, p);
        if let Some(gw) = gw.as_deref_mut() {
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            general_mat_mul(
                T::one(),
                &gys,
                &view2(&cols, rows, p).t(),
                T::one(),
                &mut view2_mut(gw, out_c, rows),
            );
        }
        if let Some(gb) = gb.as_deref_mut() {
            for (o, row) in gys.rows().into_iter().enumerate() {
                gb[o] += row.sum();
            }
        }
        general_mat_mul(
            T::one(),
            &wm.t(),
            &gys,
            T::zero(),
            &mut view2_mut(&mut gcols, rows, p),
        );
        col2im(g, &gcols, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    gx
}

/// Transposed convolution forward. `g` is the geometry of the *adjoint*
/// convolution, i.e. it reads the `out_c × out_h' × out_w'` output map
/// (`g.in_c == out_c`) and produces the `in_c × h × w` input map.
pub fn conv_t_forward<T: Scalar>(
    g: &ConvGeom,
    in_c: usize,
    batch: usize,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let wm = view2(w, in_c, rows);
    let mut cols = vec![T::zero(); rows * p];
    let out_len = g.in_len();
    let plane = g.in_h * g.in_w;
    let mut y = vec![T::zero(); batch * out_len];
    for n in 0..batch {
        let xs = view2(&x[n * in_c * p..(n + 1) * in_c * p], in_c, p);
        general_mat_mul(
            T::one(),
            &wm.t(),
            &xs,
            T::zero(),
            &mut view2_mut(&mut cols, rows, p),
        );
        let ys = &mut y[n * out_len..(n + 1) * out_len];
        for (o, chunk) in ys.chunks_mut(plane).enumerate() {
            chunk.fill(b[o]);
        }
        col2im(g, &cols, ys);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t_backward<T: Scalar>(
    g: &ConvGeom,
    in_c: usize,
    batch: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let wm = view2(w, in_c, rows);
    let out_len = g.in_len();
    let plane = g.in_h * g.in_w;
    let mut gcols = vec![T::zero(); rows * p];
    let mut gx = vec![T::zero(); batch * in_c * p];
    for n in 0..batch {
        let gys = &gy[n * out_len..(n + 1) * out_len];
        im2col(g, gys, &mut gcols);
        let gc = view2(&gcols, rows, p);
        if let Some(gw) = gw.as_deref_mut() {
            let xs = view2(&x[n * in_c * p..(n + 1) * in_c * p], in_c, p);
            general_mat_mul(
                T::one(),
                &xs,
                &gc.t(),
                T::one(),
                &mut view2_mut(gw, in_c, rows),
            );
        }
        if let Some(gb) = gb.as_deref_mut() {
            for (o, chunk) in gys.chunks(plane).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
        general_mat_mul(
            T::one(),
            &wm,
            &gc,
            T::zero(),
            &mut view2_mut(&mut gx[n * in_c * p..(n + 1) * in_c * p], in_c, p),
        );
    }
    gx
}

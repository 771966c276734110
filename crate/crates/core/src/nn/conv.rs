//! 2-D convolution via im2col + GEMM, processed in batch chunks.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView4};

use super::Real;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

struct Dims {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
}

fn im2col<T: Real>(x: &[T], d: &Dims, g: ConvGeometry, n0: usize, nb: usize, col: &mut Array2<T>) {
    let l = d.oh * d.ow;
    let kk = g.kernel * g.kernel;
    let cols = nb * l;
    // `col` arrives zeroed; padded taps stay zero.
    let col = col.as_slice_mut().expect("contiguous col");
    for n in 0..nb {
        let xs = &x[(n0 + n) * d.c * d.h * d.w..(n0 + n + 1) * d.c * d.h * d.w];
        for c in 0..d.c {
            let plane = &xs[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = c * kk + ki * g.kernel + kj;
                    let dst = &mut col[row * cols + n * l..row * cols + (n + 1) * l];
                    for oy in 0..d.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &Array2<T>, d: &Dims, g: ConvGeometry, n0: usize, nb: usize, dx: &mut [T]) {
    let l = d.oh * d.ow;
    let kk = g.kernel * g.kernel;
    let cols = nb * l;
    let col = col.as_slice().expect("contiguous col");
    for n in 0..nb {
        let xs = &mut dx[(n0 + n) * d.c * d.h * d.w..(n0 + n + 1) * d.c * d.h * d.w];
        for c in 0..d.c {
            let plane = &mut xs[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = c * kk + ki * g.kernel + kj;
                    let src = &col[row * cols + n * l..row * cols + (n + 1) * l];
                    for oy in 0..d.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for ox in 0..d.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += src[oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims<T>(x: &ArrayView4<T>, g: ConvGeometry) -> Dims {
    let (_, c, h, w) = x.dim();
    Dims {
        c,
        h,
        w,
        oh: g.out_size(h),
        ow: g.out_size(w),
        k: c * g.kernel * g.kernel,
    }
}

fn chunk(d: &Dims) -> usize {
    (COL_BUDGET / (d.k * d.oh * d.ow).max(1)).max(1)
}

/// `x`: (N, C, H, W); `weight`: (O, C, k, k); returns (N, O, oh, ow).
pub fn conv2d_forward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: Option<&[T]>,
    g: ConvGeometry,
) -> Array4<T> {
    conv2d_forward_keep(x, weight, bias, g, false).0
}

/// Like [`conv2d_forward`], optionally returning the im2col buffers for
/// reuse by [`conv2d_backward_cols`].
pub fn conv2d_forward_keep<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: Option<&[T]>,
    g: ConvGeometry,
    keep_cols: bool,
) -> (Array4<T>, Vec<Array2<T>>) {
    let x = x.as_standard_layout();
    let n = x.dim().0;
    let d = dims(&x.view(), g);
    let o = weight.dim().0;
    let l = d.oh * d.ow;
    let w2 = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, d.k))
        .expect("weight reshape");
    let xs = x.as_slice().expect("standard layout");
    let mut y = Array4::<T>::zeros((n, o, d.oh, d.ow));
    let step = chunk(&d);
    let mut kept = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let nb = step.min(n - n0);
        let mut col = Array2::<T>::zeros((d.k, nb * l));
        im2col(xs, &d, g, n0, nb, &mut col);
        let mut out = Array2::<T>::zeros((o, nb * l));
        general_mat_mul(T::one(), &w2, &col, T::zero(), &mut out);
        let ys = y.as_slice_mut().expect("contiguous y");
        let outs = out.as_slice().expect("contiguous out");
        for b in 0..nb {
            for oc in 0..o {
                let bias_v = bias.map_or(T::zero(), |bv| bv[oc]);
                let dst = &mut ys[((n0 + b) * o + oc) * l..((n0 + b) * o + oc + 1) * l];
                let src = &outs[oc * nb * l + b * l..oc * nb * l + (b + 1) * l];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv = *sv + bias_v;
                }
            }
        }
        if keep_cols {
            kept.push(col);
        }
        n0 += nb;
    }
    (y, kept)
}

/// Returns `dx`, and accumulates into `dweight` / `dbias`.
pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    dy: ArrayView4<T>,
    g: ConvGeometry,
    dweight: &mut Array4<T>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Array4<T>> {
    conv2d_backward_cols(x, weight, dy, g, dweight, dbias, need_dx, Vec::new())
}

/// [`conv2d_backward`] reusing im2col buffers kept by the forward pass
/// (recomputed when `cols` is empty).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_cols<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    dy: ArrayView4<T>,
    g: ConvGeometry,
    dweight: &mut Array4<T>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
    cols: Vec<Array2<T>>,
) -> Option<Array4<T>> {
    let mut cols = cols.into_iter();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let d = dims(&x.view(), g);
    let o = weight.dim().0;
    let l = d.oh * d.ow;
    let w2 = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, d.k))
        .expect("weight reshape");
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let mut dw2 = Array2::<T>::zeros((o, d.k));
    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
    if let Some(db) = dbias {
        for b in 0..n {
            for (oc, dbv) in db.iter_mut().enumerate() {
                let s: T = dys[(b * o + oc) * l..(b * o + oc + 1) * l].iter().copied().sum();
                *dbv += s;
            }
        }
    }
    let step = chunk(&d);
    let mut n0 = 0;
    while n0 < n {
        let nb = step.min(n - n0);
        let mut dmat = Array2::<T>::zeros((o, nb * l));
        {
            let dm = dmat.as_slice_mut().expect("contiguous");
            for b in 0..nb {
                for oc in 0..o {
                    dm[oc * nb * l + b * l..oc * nb * l + (b + 1) * l]
                        .copy_from_slice(&dys[((n0 + b) * o + oc) * l..((n0 + b) * o + oc + 1) * l]);
                }
            }
        }
        let mut col = match cols.next() {
            Some(c) if c.dim() == (d.k, nb * l) => c,
            _ => {
                let mut c = Array2::<T>::zeros((d.k, nb * l));
                im2col(xs, &d, g, n0, nb, &mut c);
                c
            }
        };
        general_mat_mul(T::one(), &dmat, &col.t(), T::one(), &mut dw2);
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(T::one(), &w2.t(), &dmat, T::zero(), &mut col);
            col2im(&col, &d, g, n0, nb, dx.as_slice_mut().expect("contiguous dx"));
        }
        n0 += nb;
    }
    let dw4 = dw2
        .into_shape_with_order(weight.raw_dim())
        .expect("dweight reshape");
    *dweight += &dw4;
    dx
}

/// Direct convolution, used as an independent reference in tests.
#[cfg(test)]
pub(crate) fn conv2d_naive<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    g: ConvGeometry,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let o = weight.dim().0;
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let mut y = Array4::<T>::zeros((n, o, oh, ow));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[[b, ic, iy as usize, ix as usize]]
                                        * weight[[oc, ic, ki, kj]];
                                }
                            }
                        }
                    }
                    y[[b, oc, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

//! Raw numeric kernels behind the tape operations. All buffers are row-major.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn cols(&self) -> usize {
        self.n * self.plane()
    }
}

/// Unfold `x` into a `[C*kh*kw, N*Ho*Wo]` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.cols();
    let p = g.plane();
    let mut cols = vec![T::zero(); g.ckk() * np];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input layout, accumulating.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let np = g.cols();
    let p = g.plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let np = g.cols();
    let ckk = g.ckk();
    let mut mat = vec![T::zero(); g.o * np];
    T::gemm(
        g.o, ckk, np, T::one(), w, ckk as isize, 1, &cols, np as isize, 1, T::zero(), &mut mat,
        np as isize, 1,
    );
    let p = g.plane();
    let mut out = vec![T::zero(); g.n * g.o * p];
    for o in 0..g.o {
        let bias = b[o];
        for n in 0..g.n {
            let src = &mat[o * np + n * p..o * np + (n + 1) * p];
            let dst = &mut out[(n * g.o + o) * p..(n * g.o + o + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let np = g.cols();
    let p = g.plane();
    let ckk = g.ckk();
    let mut dmat = vec![T::zero(); g.o * np];
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &dout[(n * g.o + o) * p..(n * g.o + o + 1) * p];
            dmat[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(src);
        }
    }
    let db = want.2.then(|| {
        (0..g.o)
            .map(|o| dmat[o * np..(o + 1) * np].iter().copied().sum())
            .collect()
    });
    let cols = if want.1 { Some(im2col(x, g)) } else { None };
    let dw = cols.as_ref().map(|cols| {
        let mut dw = vec![T::zero(); g.o * ckk];
        T::gemm(
            g.o, np, ckk, T::one(), &dmat, np as isize, 1, cols, 1, np as isize, T::zero(),
            &mut dw, ckk as isize, 1,
        );
        dw
    });
    let dx = want.0.then(|| {
        let mut dcols = vec![T::zero(); ckk * np];
        T::gemm(
            ckk, g.o, np, T::one(), w, 1, ckk as isize, &dmat, np as isize, 1, T::zero(),
            &mut dcols, np as isize, 1,
        );
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// `y[N, out] = x[N, in] * w[out, in]^T + b`.
pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    for row in y.chunks_mut(dout.max(1)) {
        row.copy_from_slice(b);
    }
    T::gemm(
        n, din, dout, T::one(), x, din as isize, 1, w, 1, din as isize, T::one(), &mut y,
        dout as isize, 1,
    );
    y
}

/// Decompose a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[idx(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                s += (x[idx(k)] - m).exp();
            }
            if log {
                let lse = m + s.ln();
                for k in 0..len {
                    y[idx(k)] = x[idx(k)] - lse;
                }
            } else {
                for k in 0..len {
                    y[idx(k)] = (x[idx(k)] - m).exp() / s;
                }
            }
        }
    }
    y
}

//! im2col-based 2-D convolution kernels (NCHW layout).

use crate::scalar::{matmul, MatRef};
use crate::Scalar;

/// Upper bound on the number of elements in one im2col scratch buffer.
const COL_BUDGET: usize = 1 << 19;

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Self {
        assert_eq!(x_shape.len(), 4, "conv2d input must be NCHW, got {x_shape:?}");
        assert_eq!(w_shape.len(), 4, "conv2d weight must be OIHW, got {w_shape:?}");
        assert_eq!(x_shape[1], w_shape[1], "conv2d channel mismatch: input {x_shape:?}, weight {w_shape:?}");
        assert!(stride >= 1, "conv2d stride must be positive");
        let (h, w) = (x_shape[2], x_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        Self {
            batch: x_shape[0],
            in_c: x_shape[1],
            in_h: h,
            in_w: w,
            out_c: w_shape[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_image(&self) -> usize {
        self.out_c * self.out_plane()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.out_plane()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Geometry of the input-gradient convolution of a stride-1 "same" conv.
    fn flipped(&self) -> ConvGeom {
        ConvGeom::new(
            &[self.batch, self.out_c, self.out_h, self.out_w],
            &[self.in_c, self.out_c, self.kh, self.kw],
            1,
            self.pad,
        )
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, off) = (g.stride, kj as isize - g.pad as isize);
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    // largest ox with ox*s + off < in_w, plus one
    let lim = g.in_w as isize - off;
    let hi = if lim <= 0 { 0 } else { ((lim as usize - 1) / s + 1).min(g.out_w) };
    (lo.min(hi), hi)
}

/// Unfolds `n` images starting at `x` into `col`, laid out as
/// `[patch_len, n * out_plane]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n: usize, col: &mut [T]) {
    let plane = g.out_plane();
    let ncols = n * plane;
    let in_plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut col[r * ncols..(r + 1) * ncols];
                let (lo, hi) = valid_cols(g, kj);
                for img in 0..n {
                    let src = &x[img * g.in_image() + c * in_plane..][..in_plane];
                    let dst = &mut row[img * plane..(img + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.in_h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * g.stride + kj - g.pad;
                        let srow = &src[iy as usize * g.in_w..][..g.in_w];
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                        } else {
                            let sr = &srow[first..];
                            for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = sr[i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into image gradients.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, n: usize, gx: &mut [T]) {
    let plane = g.out_plane();
    let ncols = n * plane;
    let in_plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &col[r * ncols..(r + 1) * ncols];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for img in 0..n {
                    let dst = &mut gx[img * g.in_image() + c * in_plane..][..in_plane];
                    let src = &row[img * plane..(img + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        let srow = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                        for (d, &s) in drow[first..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `w[o, c, i, j]` to `w'[c, o, k-1-i, k-1-j]`.
fn flip_kernel<T: Scalar>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kh;
    let mut out = vec![T::zero(); w.len()];
    for o in 0..g.out_c {
        for c in 0..g.in_c {
            for i in 0..k {
                for j in 0..k {
                    out[((c * g.out_c + o) * k + (k - 1 - i)) * k + (k - 1 - j)] = w[((o * g.in_c + c) * k + i) * k + j];
                }
            }
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut y = vec![T::zero(); g.batch * g.out_image()];
    let chunk = g.chunk();
    let mut col = vec![T::zero(); k * chunk * plane];
    let mut out = vec![T::zero(); g.out_c * chunk * plane];
    let wmat = MatRef::row_major(weight, g.out_c, k);
    let mut start = 0;
    while start < g.batch {
        let n = chunk.min(g.batch - start);
        let ncols = n * plane;
        let col = &mut col[..k * ncols];
        let out = &mut out[..g.out_c * ncols];
        im2col(&x[start * g.in_image()..], g, n, col);
        matmul(T::one(), wmat, MatRef::row_major(col, k, ncols), T::zero(), out);
        for img in 0..n {
            let dst = &mut y[(start + img) * g.out_image()..][..g.out_image()];
            for o in 0..g.out_c {
                let b = bias.map_or(T::zero(), |b| b[o]);
                let src = &out[o * ncols + img * plane..][..plane];
                for (d, &s) in dst[o * plane..(o + 1) * plane].iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        start += n;
    }
    y
}

/// Gradients of a convolution with respect to whichever operands are requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let plane = g.out_plane();
    let k = g.patch_len();
    let same = g.stride == 1 && g.kh == g.kw && 2 * g.pad + 1 == g.kh;
    let mut gx = (need_x && !same).then(|| vec![T::zero(); g.batch * g.in_image()]);
    let mut gw = need_w.then(|| vec![T::zero(); g.out_c * k]);
    let mut gb = need_b.then(|| vec![T::zero(); g.out_c]);
    if let Some(gb) = gb.as_mut() {
        for img in 0..g.batch {
            for (o, b) in gb.iter_mut().enumerate() {
                let s: T = gy[img * g.out_image() + o * plane..][..plane].iter().copied().sum();
                *b += s;
            }
        }
    }
    // A stride-1 "same" convolution's input gradient is the same convolution
    // of `gy` with the flipped, transposed kernel; that skips `col2im`.
    let flipped_gx = (need_x && same).then(|| conv2d_forward(gy, &flip_kernel(weight, g), None, &g.flipped()));
    if gx.is_none() && gw.is_none() {
        return ConvGrads { input: flipped_gx, weight: gw, bias: gb };
    }
    let chunk = g.chunk();
    let mut col = vec![T::zero(); k * chunk * plane];
    let mut gyt = vec![T::zero(); g.out_c * chunk * plane];
    let mut start = 0;
    while start < g.batch {
        let n = chunk.min(g.batch - start);
        let ncols = n * plane;
        let gyt = &mut gyt[..g.out_c * ncols];
        for img in 0..n {
            let src = &gy[(start + img) * g.out_image()..][..g.out_image()];
            for o in 0..g.out_c {
                gyt[o * ncols + img * plane..][..plane].copy_from_slice(&src[o * plane..(o + 1) * plane]);
            }
        }
        let col = &mut col[..k * ncols];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[start * g.in_image()..], g, n, col);
            matmul(
                T::one(),
                MatRef::row_major(gyt, g.out_c, ncols),
                MatRef::transposed(col, k, ncols),
                T::one(),
                gw,
            );
        }
        if let Some(gx) = gx.as_mut() {
            matmul(
                T::one(),
                MatRef::transposed(weight, g.out_c, k),
                MatRef::row_major(gyt, g.out_c, ncols),
                T::zero(),
                col,
            );
            col2im(col, g, n, &mut gx[start * g.in_image()..]);
        }
        start += n;
    }
    ConvGrads { input: gx.or(flipped_gx), weight: gw, bias: gb }
}

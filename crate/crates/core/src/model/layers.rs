//! Forward and backward kernels for each layer kind.

use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], k: usize, stride: usize, pad: usize) -> Self {
        let [_, c, h, w] = input;
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    #[inline]
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    #[inline]
    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output coordinate `o` and kernel offset `kk`, if
    /// it falls inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + kk) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

/// Lower the whole batch into a `[c*k*k, batch*ho*wo]` matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let b = x.batch();
    let ncols = b * g.positions();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for n in 0..b {
        let xs = x.sample(n);
        for ci in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let base = row * ncols + n * g.positions();
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                cols[base + oy * g.wo + ox] = xs[(ci * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back into input layout.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, batch: usize) -> Tensor<T> {
    let ncols = batch * g.positions();
    let mut dx = Tensor::zeros([batch, g.c, g.h, g.w]);
    for n in 0..batch {
        let dxs = dx.sample_mut(n);
        for ci in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let base = row * ncols + n * g.positions();
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dxs[(ci * g.h + iy) * g.w + ix] += cols[base + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Dense convolution. Returns the output and the lowered input for backward.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    g: &ConvGeom,
) -> (Tensor<T>, Vec<T>) {
    let b = x.batch();
    let cols = im2col(x, g);
    let ncols = b * g.positions();
    let mut out = vec![T::zero(); out_channels * ncols];
    gemm(out_channels, g.rows(), ncols, T::one(), weight, false, &cols, false, T::zero(), &mut out);
    let mut y = Tensor::zeros([b, out_channels, g.ho, g.wo]);
    let p = g.positions();
    for n in 0..b {
        let ys = y.sample_mut(n);
        for o in 0..out_channels {
            let src = &out[o * ncols + n * p..o * ncols + (n + 1) * p];
            for (dst, &v) in ys[o * p..(o + 1) * p].iter_mut().zip(src) {
                *dst = v + bias[o];
            }
        }
    }
    (y, cols)
}

/// Gradients of a dense convolution: `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<T: Scalar>(
    dy: &Tensor<T>,
    cols: &[T],
    weight: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let b = dy.batch();
    let o_ch = dy.channels();
    let p = g.positions();
    let ncols = b * p;
    let mut dout = vec![T::zero(); o_ch * ncols];
    let mut db = vec![T::zero(); o_ch];
    for n in 0..b {
        let ds = dy.sample(n);
        for o in 0..o_ch {
            let src = &ds[o * p..(o + 1) * p];
            dout[o * ncols + n * p..o * ncols + (n + 1) * p].copy_from_slice(src);
            db[o] += src.iter().copied().sum::<T>();
        }
    }
    let mut dw = vec![T::zero(); o_ch * g.rows()];
    gemm(o_ch, ncols, g.rows(), T::one(), &dout, false, cols, true, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.rows() * ncols];
        gemm(g.rows(), o_ch, ncols, T::one(), weight, true, &dout, false, T::zero(), &mut dcols);
        col2im(&dcols, g, b)
    });
    (dx, dw, db)
}

pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Tensor<T> {
    let b = x.batch();
    let mut y = Tensor::zeros([b, g.c, g.ho, g.wo]);
    for n in 0..b {
        let xs = x.sample(n);
        let ys = y.sample_mut(n);
        for c in 0..g.c {
            let wk = &weight[c * g.k * g.k..(c + 1) * g.k * g.k];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias[c];
                    for ky in 0..g.k {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..g.k {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                acc += wk[ky * g.k + kx] * xs[(c * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                    ys[(c * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    y
}

pub(crate) fn depthwise_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let b = x.batch();
    let kk = g.k * g.k;
    let mut dw = vec![T::zero(); g.c * kk];
    let mut db = vec![T::zero(); g.c];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for n in 0..b {
        let xs = x.sample(n);
        let ds = dy.sample(n);
        for c in 0..g.c {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = ds[(c * g.ho + oy) * g.wo + ox];
                    db[c] += d;
                    for ky in 0..g.k {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..g.k {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                let xi = (c * g.h + iy) * g.w + ix;
                                dw[c * kk + ky * g.k + kx] += d * xs[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx.sample_mut(n)[xi] += d * weight[c * kk + ky * g.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Gradient through a ReLU given its *output*.
pub(crate) fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Non-overlapping max pool. Returns the output and the flat argmax (within
/// the sample) of each output element.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<usize>) {
    let [b, c, h, w] = x.shape();
    let (ho, wo) = (h / size, w / size);
    let mut y = Tensor::zeros([b, c, ho, wo]);
    let mut arg = vec![0usize; b * c * ho * wo];
    for n in 0..b {
        let xs = x.sample(n);
        let ys = y.sample_mut(n);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (ch * h + oy * size) * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = (ch * h + oy * size + dy) * w + ox * size + dx;
                            if xs[i] > xs[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    ys[o] = xs[best];
                    arg[n * c * ho * wo + o] = best;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(
    dy: &Tensor<T>,
    arg: &[usize],
    input_shape: [usize; 4],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let per = dy.sample_len();
    for n in 0..dy.batch() {
        let ds = dy.sample(n);
        let dxs = dx.sample_mut(n);
        for (o, &d) in ds.iter().enumerate() {
            dxs[arg[n * per + o]] += d;
        }
    }
    dx
}

pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = x.shape();
    let s = x.spatial();
    let inv = T::one() / T::of_usize(s);
    let mut y = Tensor::zeros([b, c, 1, 1]);
    for n in 0..b {
        let xs = x.sample(n);
        for ch in 0..c {
            y.sample_mut(n)[ch] = xs[ch * s..(ch + 1) * s].iter().copied().sum::<T>() * inv;
        }
    }
    y
}

pub(crate) fn gap_backward<T: Scalar>(dy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [b, c, h, w] = input_shape;
    let s = h * w;
    let inv = T::one() / T::of_usize(s);
    let mut dx = Tensor::zeros(input_shape);
    for n in 0..b {
        for ch in 0..c {
            let d = dy.sample(n)[ch] * inv;
            for v in &mut dx.sample_mut(n)[ch * s..(ch + 1) * s] {
                *v = d;
            }
        }
    }
    dx
}

pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out: usize) -> Tensor<T> {
    let b = x.batch();
    let inp = x.sample_len();
    let mut y = vec![T::zero(); b * out];
    for n in 0..b {
        y[n * out..(n + 1) * out].copy_from_slice(bias);
    }
    gemm(b, inp, out, T::one(), x.data(), false, weight, true, T::one(), &mut y);
    Tensor::from_vec([b, out, 1, 1], y).expect("linear output shape")
}

pub(crate) fn linear_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &[T],
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let b = x.batch();
    let inp = x.sample_len();
    let out = dy.sample_len();
    let mut dw = vec![T::zero(); out * inp];
    gemm(out, b, inp, T::one(), dy.data(), true, x.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for n in 0..b {
        for (acc, &d) in db.iter_mut().zip(dy.sample(n)) {
            *acc += d;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); b * inp];
        gemm(b, out, inp, T::one(), dy.data(), false, weight, false, T::zero(), &mut dx);
        Tensor::from_vec(x.shape(), dx).expect("linear input shape")
    });
    (dx, dw, db)
}

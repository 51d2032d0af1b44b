//! Plain-slice numeric kernels behind the tape operations.
//!
//! Layouts are row-major: images are `[channels, height, width]`, conv
//! kernels `[out, in, kh, kw]`, transposed-conv kernels `[in, out, kh, kw]`.
//! Convolution is cross-correlation (no kernel flip).

use crate::error::{Error, Result};
use crate::tensor::{LossKind, Scalar};

/// Geometry of a 2-d convolution, shared by forward and both adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution; rejects kernels larger than the
    /// padded input.
    pub fn conv(
        input: [usize; 3],
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidShape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input adjoint is the transposed
    /// convolution of `input` (shape `[c_in, h, w]`) producing `out_channels`.
    /// The returned geometry's *input* is the transposed conv's output.
    pub fn transposed(
        input: [usize; 3],
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let full_h = (h as isize - 1) * stride as isize + kh as isize;
        let full_w = (w as isize - 1) * stride as isize + kw as isize;
        let oh = full_h - 2 * padding as isize;
        let ow = full_w - 2 * padding as isize;
        if oh <= 0 || ow <= 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape(format!(
                "transposed convolution output {oh}x{ow} is not positive"
            )));
        }
        Ok(Self {
            in_channels: out_channels,
            in_h: oh as usize,
            in_w: ow as usize,
            out_channels: c,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        })
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
}

/// Output indices `o` in `[lo, hi)` such that `o * stride + k - padding`
/// lands inside `[0, n)`.
#[inline]
fn valid_range(k: usize, n: usize, out: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if n + padding > k {
        ((n - 1 + padding - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `[m, k] x [k, n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// `[m, k]^T x [m, n] -> [k, n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// `[m, n] x [k, n]^T -> [m, k]`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(arow, brow);
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four independent partial sums, combined in a fixed order
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    let mut acc = [T::zero(); 4];
    for (x, y) in a4.zip(b4) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense layer on `rows` stacked inputs: `y = x W^T + b`, `W` is `[n_out, n_in]`.
pub fn linear<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            acc += dot(xr, &w[o * n_in..(o + 1) * n_in]);
            out.push(acc);
        }
    }
    out
}

pub fn conv2d<T: Scalar>(input: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    debug_assert_eq!(input.len(), g.in_len());
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.out_len()];
    for co in 0..g.out_channels {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            out_c.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.in_channels {
            let in_c = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.in_h, g.out_h, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = kernel[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.in_w, g.out_w, g.stride, g.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_c[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (o, i) in out_row[ox0..ox1]
                                .iter_mut()
                                .zip(&in_row[ix0..ix0 + (ox1 - ox0)])
                            {
                                *o += wv * *i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input (scatter-add of `dout`
/// through the kernel). Also serves as the transposed-convolution forward.
pub fn conv2d_input_adjoint<T: Scalar>(dout: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    debug_assert_eq!(dout.len(), g.out_len());
    let plane = g.out_h * g.out_w;
    let mut din = vec![T::zero(); g.in_len()];
    for co in 0..g.out_channels {
        let d_c = &dout[co * plane..(co + 1) * plane];
        for ci in 0..g.in_channels {
            let din_c = &mut din[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.in_h, g.out_h, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = kernel[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.in_w, g.out_w, g.stride, g.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let d_row = &d_c[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &mut din_c[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in ox0..ox1 {
                            in_row[ox * g.stride + kx - g.padding] += wv * d_row[ox];
                        }
                    }
                }
            }
        }
    }
    din
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_adjoint<T: Scalar>(input: &[T], dout: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut dk = vec![T::zero(); g.out_channels * g.in_channels * g.kh * g.kw];
    for co in 0..g.out_channels {
        let d_c = &dout[co * plane..(co + 1) * plane];
        for ci in 0..g.in_channels {
            let in_c = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.in_h, g.out_h, g.stride, g.padding);
                for kx in 0..g.kw {
                    let (ox0, ox1) = valid_range(kx, g.in_w, g.out_w, g.stride, g.padding);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let d_row = &d_c[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &in_c[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in ox0..ox1 {
                            acc += d_row[ox] * in_row[ox * g.stride + kx - g.padding];
                        }
                    }
                    dk[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    dk
}

/// Non-overlapping max pooling; returns values and the flat argmax of each
/// window (first maximum wins).
pub fn max_pool2d<T: Scalar>(
    input: &[T],
    [c, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * kh * w + ox * kw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let idx = ch * h * w + (oy * kh + dy) * w + ox * kw + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax over consecutive rows of length `cols`.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for v in row {
            let e = (*v - m).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Masked loss and its gradient with respect to the logits.
///
/// Binary cross-entropy averages over unmasked positions. Cross-entropy
/// treats the last dimension (`classes` wide) as the class axis, restricts
/// the softmax to unmasked classes of each row, and averages over rows
/// that have at least one unmasked class.
pub fn masked_loss<T: Scalar>(
    logits: &[T],
    target: &[T],
    mask: &[T],
    classes: usize,
    kind: LossKind,
) -> Result<(T, Vec<T>)> {
    if mask.iter().any(|m| *m != T::zero() && *m != T::one()) {
        return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
    }
    let mut grad = vec![T::zero(); logits.len()];
    match kind {
        LossKind::BinaryCrossEntropy => {
            let count = mask.iter().filter(|m| **m == T::one()).count();
            if count == 0 {
                return Err(Error::EmptyLossSupport);
            }
            let scale = T::one() / T::of(count as f64);
            let mut total = T::zero();
            for i in 0..logits.len() {
                if mask[i] != T::one() {
                    continue;
                }
                let (z, t) = (logits[i], target[i]);
                total += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
                grad[i] = (sigmoid(z) - t) * scale;
            }
            Ok((total * scale, grad))
        }
        LossKind::CrossEntropy => {
            let mut total = T::zero();
            let mut rows = 0usize;
            for (r, row) in logits.chunks(classes).enumerate() {
                let base = r * classes;
                let active = |j: usize| mask[base + j] == T::one();
                if !(0..classes).any(active) {
                    continue;
                }
                rows += 1;
                let m = (0..classes)
                    .filter(|&j| active(j))
                    .map(|j| row[j])
                    .fold(T::neg_infinity(), T::max);
                let sum_exp: T = (0..classes)
                    .filter(|&j| active(j))
                    .map(|j| (row[j] - m).exp())
                    .sum();
                let lse = m + sum_exp.ln();
                let t_sum: T = (0..classes)
                    .filter(|&j| active(j))
                    .map(|j| target[base + j])
                    .sum();
                for j in (0..classes).filter(|&j| active(j)) {
                    let t = target[base + j];
                    total += t * (lse - row[j]);
                    grad[base + j] = (row[j] - lse).exp() * t_sum - t;
                }
            }
            if rows == 0 {
                return Err(Error::EmptyLossSupport);
            }
            let scale = T::one() / T::of(rows as f64);
            grad.iter_mut().for_each(|g| *g *= scale);
            Ok((total * scale, grad))
        }
    }
}

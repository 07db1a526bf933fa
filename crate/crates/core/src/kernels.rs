//! Forward and backward kernels for the spatial ops. Convolutions go through
//! im2col + GEMM one sample at a time; the column buffer is rebuilt in the
//! backward pass instead of being kept alive on the tape.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Geometry of a 2-D sliding window over a `h×w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    #[cfg(test)]
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Output extent of a cross-correlation over an input of `len`.
    pub fn conv_out(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return shape_err("stride must be at least 1");
        }
        if len + 2 * self.pad < k {
            return shape_err(format!(
                "kernel {k} larger than padded input {}",
                len + 2 * self.pad
            ));
        }
        Ok((len + 2 * self.pad - k) / self.stride + 1)
    }

    /// Output extent of the transposed convolution: `(len-1)*stride - 2*pad + k`.
    pub fn transpose_out(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return shape_err("stride must be at least 1");
        }
        let full = (len - 1) * self.stride + k;
        if full <= 2 * self.pad {
            return shape_err(format!(
                "transposed conv output would be empty (len {len}, k {k}, pad {})",
                self.pad
            ));
        }
        Ok(full - 2 * self.pad)
    }
}

/// Unfold one `c×h×w` sample into a `(c·kh·kw) × (oh·ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    let pad = win.pad as isize;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ci * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `c×h×w` sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let plane = oh * ow;
    let pad = win.pad as isize;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ci * win.kh + ki) * win.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (ch, &b) in out.chunks_mut(plane).zip(bias) {
        for v in ch {
            *v = *v + b;
        }
    }
}

fn accumulate_channel_sums<T: Scalar>(dy: &[T], plane: usize, db: &mut [T]) {
    for (ch, acc) in dy.chunks(plane).zip(db.iter_mut()) {
        *acc = *acc + ch.iter().copied().sum::<T>();
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<((usize, usize, usize, usize), (usize, usize, usize, usize))> {
    let xd = x.dims4()?;
    let wd = w.dims4()?;
    if b.shape() != [wd.0] {
        return shape_err(format!(
            "bias shape {:?} does not match {} output channels",
            b.shape(),
            wd.0
        ));
    }
    Ok((xd, wd))
}

/// Cross-correlation. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ((n, cin, h, wd), (cout, wcin, kh, kw)) = check_conv(x, w, b)?;
    if wcin != cin {
        return shape_err(format!("conv2d: input has {cin} channels, weight expects {wcin}"));
    }
    let win = Window { kh, kw, stride, pad };
    let oh = win.conv_out(h, kh)?;
    let ow = win.conv_out(wd, kw)?;
    let ckk = cin * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); n * cout * plane];
    let xs = cin * h * wd;
    for s in 0..n {
        im2col(&x.data()[s * xs..(s + 1) * xs], cin, h, wd, win, oh, ow, &mut cols);
        let o = &mut out[s * cout * plane..(s + 1) * cout * plane];
        gemm(false, false, cout, ckk, plane, w.data(), &cols, T::zero(), o);
        add_channel_bias(o, b.data(), plane);
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let (_, _, oh, ow) = dy.dims4()?;
    let win = Window { kh, kw, stride, pad };
    let ckk = cin * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut dcols = vec![T::zero(); ckk * plane];
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let xs = cin * h * wd;
    for s in 0..n {
        let dys = &dy.data()[s * cout * plane..(s + 1) * cout * plane];
        im2col(&x.data()[s * xs..(s + 1) * xs], cin, h, wd, win, oh, ow, &mut cols);
        gemm(false, true, cout, plane, ckk, dys, &cols, T::one(), dw.data_mut());
        accumulate_channel_sums(dys, plane, db.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(true, false, ckk, cout, plane, w.data(), dys, T::zero(), &mut dcols);
            col2im(
                &dcols,
                cin,
                h,
                wd,
                win,
                oh,
                ow,
                &mut dx.data_mut()[s * xs..(s + 1) * xs],
            );
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Transposed convolution, the adjoint of [`conv2d_forward`] with respect to
/// its input. `x: [N,Cin,H,W]`, `w: [Cin,Cout,kh,kw]`, `b: [Cout]`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if wcin != cin {
        return shape_err(format!(
            "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
        ));
    }
    if b.shape() != [cout] {
        return shape_err(format!("bias shape {:?} does not match {cout} channels", b.shape()));
    }
    let win = Window { kh, kw, stride, pad };
    let oh = win.transpose_out(h, kh)?;
    let ow = win.transpose_out(wd, kw)?;
    let ckk = cout * kh * kw;
    let plane = h * wd;
    let oplane = oh * ow;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); n * cout * oplane];
    for s in 0..n {
        let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
        gemm(true, false, ckk, cin, plane, w.data(), xs, T::zero(), &mut cols);
        let o = &mut out[s * cout * oplane..(s + 1) * cout * oplane];
        col2im(&cols, cout, oh, ow, win, h, wd, o);
        add_channel_bias(o, b.data(), oplane);
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (_, cout, kh, kw) = w.dims4()?;
    let (_, _, oh, ow) = dy.dims4()?;
    let win = Window { kh, kw, stride, pad };
    let ckk = cout * kh * kw;
    let plane = h * wd;
    let oplane = oh * ow;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    for s in 0..n {
        let dys = &dy.data()[s * cout * oplane..(s + 1) * cout * oplane];
        im2col(dys, cout, oh, ow, win, h, wd, &mut cols);
        let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
        gemm(false, true, cin, plane, ckk, xs, &cols, T::one(), dw.data_mut());
        accumulate_channel_sums(dys, oplane, db.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * cin * plane..(s + 1) * cin * plane];
            gemm(false, false, cin, ckk, plane, w.data(), &cols, T::zero(), dxs);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Max pooling without padding. Returns the output and, per output cell,
/// the flat input index of the first maximal element in row-major order.
pub(crate) fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return shape_err("maxpool kernel and stride must be at least 1");
    }
    if h < k || w < k {
        return shape_err(format!("maxpool window {k} larger than input {h}x{w}"));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for i in row..row + k {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub(crate) fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Per-channel batch statistics for batch-norm in train mode: returns
/// `(normalized x, per-channel 1/sqrt(var+eps), batch mean, biased batch var)`.
pub(crate) fn batch_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    eps: T,
) -> Result<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            mean[ch] = mean[ch] + xd[off..off + plane].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let mu = mean[ch];
            var[ch] = var[ch]
                + xd[off..off + plane]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    Ok((xhat, inv_std, mean, var))
}

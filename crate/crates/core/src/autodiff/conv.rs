//! Im2col convolution kernels shared by the forward and backward passes.
//!
//! Padding is always "same": `dilation * (k - 1) / 2` zeros on each side, so
//! a stride-1 convolution preserves the spatial extents and a stride-`s`
//! convolution produces `ceil(H / s) x ceil(W / s)`.

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm_new, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(invalid(format!("stride ({stride}) and dilation ({dilation}) must be positive")));
        }
        if kernel.is_multiple_of(2) {
            return Err(invalid(format!("kernel size {kernel} must be odd")));
        }
        Ok(Geometry {
            in_h,
            in_w,
            out_h: in_h.div_ceil(stride),
            out_w: in_w.div_ceil(stride),
            kernel,
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
        })
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// Range of outputs `o` whose tap `k` lands inside `0..extent`, and the
/// input coordinate of the first one.
#[inline]
fn valid_range(g: &Geometry, k: usize, extent: usize, out: usize) -> (usize, usize, usize) {
    let off = (k * g.dilation) as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let room = extent as isize - off;
    let hi = if room <= 0 { 0 } else { (((room + s - 1) / s) as usize).min(out) };
    let lo = lo.min(hi);
    (lo, hi, (lo as isize * s + off).max(0) as usize)
}

/// Unfolds a `channels x in_h x in_w` plane stack into `(channels*k*k) x (out_h*out_w)`.
/// Row `r` is written to `cols[r * ld..][..out_h * out_w]`.
fn im2col<T: Element>(x: &[T], channels: usize, g: &Geometry, cols: &mut [T], ld: usize) {
    let k = g.kernel;
    let p = g.out_len();
    let s = g.stride;
    for c in 0..channels {
        let plane = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..k {
            let (y_lo, y_hi, iy0) = valid_range(g, ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi, ix0) = valid_range(g, kx, g.in_w, g.out_w);
                let row = &mut cols[((c * k + ky) * k + kx) * ld..][..p];
                row[..y_lo * g.out_w].fill(T::zero());
                row[y_hi * g.out_w..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = iy0 + (oy - y_lo) * s;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    if s == 1 {
                        dst[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for (d, &v) in dst[x_lo..x_hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Element>(cols: &[T], channels: usize, g: &Geometry, x: &mut [T], ld: usize) {
    let k = g.kernel;
    let p = g.out_len();
    let s = g.stride;
    for c in 0..channels {
        let plane = &mut x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..k {
            let (y_lo, y_hi, iy0) = valid_range(g, ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi, ix0) = valid_range(g, kx, g.in_w, g.out_w);
                let row = &cols[((c * k + ky) * k + kx) * ld..][..p];
                for oy in y_lo..y_hi {
                    let iy = iy0 + (oy - y_lo) * s;
                    let src = &row[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Validated dimensions of a convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    /// Channels on the full-resolution side (conv input, transpose-conv output).
    pub wide_ch: usize,
    /// Channels on the strided side (conv output, transpose-conv input).
    pub narrow_ch: usize,
    pub geo: Geometry,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.wide_ch * self.geo.kernel * self.geo.kernel
    }
}

fn check_weight<T: Element>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::InvalidShape(s.to_vec()));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_bias<T: Element>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::ShapeMismatch { op: "conv bias", lhs: b.shape().to_vec(), rhs: vec![channels] });
        }
    }
    Ok(())
}

/// Shapes for `conv2d(x, w)` with `x: N x Cin x H x W`, `w: Cout x Cin x k x k`.
pub(crate) fn conv_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, dilation: usize) -> Result<ConvDims> {
    let (cout, cin, k) = check_weight(w)?;
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != cin {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: w.shape().to_vec() });
    }
    Ok(ConvDims { batch: xs[0], wide_ch: cin, narrow_ch: cout, geo: Geometry::new(xs[2], xs[3], k, stride, dilation)? })
}

/// Shapes for `conv2d_transpose(x, w)` with `x: N x Cs x h x w`,
/// `w: Cs x Cout x k x k` (the weight of the paired convolution).
pub(crate) fn conv_transpose_dims<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
    out_hw: (usize, usize),
) -> Result<ConvDims> {
    let (cs, cout, k) = check_weight(w)?;
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != cs {
        return Err(Error::ShapeMismatch { op: "conv2d_transpose", lhs: xs.to_vec(), rhs: w.shape().to_vec() });
    }
    let geo = Geometry::new(out_hw.0, out_hw.1, k, stride, dilation)?;
    if geo.out_h != xs[2] || geo.out_w != xs[3] {
        return Err(invalid(format!(
            "transpose conv target {}x{} is inconsistent with input {}x{} at stride {stride}",
            out_hw.0, out_hw.1, xs[2], xs[3]
        )));
    }
    Ok(ConvDims { batch: xs[0], wide_ch: cout, narrow_ch: cs, geo })
}

fn add_bias<T: Element>(out: &mut [T], b: &Tensor<T>, plane: usize) {
    for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
        for v in chunk {
            *v += bv;
        }
    }
}

fn bias_grad<T: Element>(dy: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new([channels], db).expect("bias shape")
}

/// `N x C x P` to `C x (N * P)`, so a whole batch goes through one GEMM.
fn channel_major<T: Element>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(c * batch + n) * plane..][..plane].copy_from_slice(&x[(n * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// Inverse of [`channel_major`].
fn batch_major<T: Element>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(n * channels + c) * plane..][..plane].copy_from_slice(&x[(c * batch + n) * plane..][..plane]);
        }
    }
    out
}

/// Unfolds every batch item into one `patch x (N * p)` block.
fn im2col_batch<T: Element>(x: &Tensor<T>, d: &ConvDims) -> Vec<T> {
    let p = d.geo.out_len();
    let ld = d.batch * p;
    let mut cols = vec![T::zero(); d.patch() * ld];
    for n in 0..d.batch {
        im2col(x.item(n), d.wide_ch, &d.geo, &mut cols[n * p..], ld);
    }
    cols
}

/// Scatters a `patch x (N * p)` block back into `N x wide x H x W`.
fn col2im_batch<T: Element>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.geo.out_len();
    let item = d.wide_ch * d.geo.in_len();
    let mut x = vec![T::zero(); d.batch * item];
    for n in 0..d.batch {
        col2im(&cols[n * p..], d.wide_ch, &d.geo, &mut x[n * item..(n + 1) * item], d.batch * p);
    }
    x
}

/// Wide side `x` (N x wide x H x W) to narrow side (N x narrow x h x w).
pub(crate) fn conv_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    d: &ConvDims,
) -> Result<Tensor<T>> {
    check_bias(b, d.narrow_ch)?;
    let g = &d.geo;
    let p = g.out_len();
    let np = d.batch * p;
    let cols = im2col_batch(x, d);
    let y = gemm_new(MatRef::new(w.data(), d.narrow_ch, d.patch()), MatRef::new(&cols, d.patch(), np));
    let mut out = batch_major(&y, d.batch, d.narrow_ch, p);
    if let Some(b) = b {
        add_bias(&mut out, b, p);
    }
    Tensor::new([d.batch, d.narrow_ch, g.out_h, g.out_w], out)
}

/// Narrow side `x` (N x narrow x h x w) to wide side (N x wide x H x W).
/// Without bias this is exactly the adjoint of [`conv_forward`].
pub(crate) fn conv_transpose_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    d: &ConvDims,
) -> Result<Tensor<T>> {
    check_bias(b, d.wide_ch)?;
    let g = &d.geo;
    let p = g.out_len();
    let np = d.batch * p;
    let xc = channel_major(x.data(), d.batch, d.narrow_ch, p);
    let cols = gemm_new(MatRef::new(w.data(), d.narrow_ch, d.patch()).t(), MatRef::new(&xc, d.narrow_ch, np));
    let mut out = col2im_batch(&cols, d);
    if let Some(b) = b {
        add_bias(&mut out, b, g.in_len());
    }
    Tensor::new([d.batch, d.wide_ch, g.in_h, g.in_w], out)
}

/// Gradients of a convolution given the narrow-side cotangent `dy`.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = d.geo.out_len();
    let np = d.batch * p;
    let dyc = channel_major(dy.data(), d.batch, d.narrow_ch, p);
    let dym = MatRef::new(&dyc, d.narrow_ch, np);
    let dw = need[1].then(|| {
        let cols = im2col_batch(x, d);
        Tensor::new(w.shape().to_vec(), gemm_new(dym, MatRef::new(&cols, d.patch(), np).t())).expect("dw shape")
    });
    let dx = need[0].then(|| {
        let cols = gemm_new(MatRef::new(w.data(), d.narrow_ch, d.patch()).t(), dym);
        Tensor::new(x.shape().to_vec(), col2im_batch(&cols, d)).expect("dx shape")
    });
    let db = need[2].then(|| bias_grad(dy.data(), d.narrow_ch, p));
    ConvGrads { dx, dw, db }
}

/// Gradients of a transpose convolution given the wide-side cotangent `dy`.
pub(crate) fn conv_transpose_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = &d.geo;
    let p = g.out_len();
    let np = d.batch * p;
    let (mut dx, mut dw) = (None, None);
    if need[0] || need[1] {
        let cols = im2col_batch(dy, d);
        let cm = MatRef::new(&cols, d.patch(), np);
        if need[0] {
            let dxc = gemm_new(MatRef::new(w.data(), d.narrow_ch, d.patch()), cm);
            dx = Some(Tensor::new(x.shape().to_vec(), batch_major(&dxc, d.batch, d.narrow_ch, p)).expect("dx shape"));
        }
        if need[1] {
            let xc = channel_major(x.data(), d.batch, d.narrow_ch, p);
            dw = Some(
                Tensor::new(w.shape().to_vec(), gemm_new(MatRef::new(&xc, d.narrow_ch, np), cm.t())).expect("dw shape"),
            );
        }
    }
    let db = need[2].then(|| bias_grad(dy.data(), d.wide_ch, g.in_len()));
    ConvGrads { dx, dw, db }
}

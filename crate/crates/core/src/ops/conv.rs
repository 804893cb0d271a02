use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a convolution or pooling window sweep along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    if kernel == 0 || kernel > input + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + k - padding` lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if n + padding <= k {
        return (0, 0);
    }
    let hi = ((n - 1 + padding - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [c_in, h, w] = *input else {
            return Err(Error::shape(format!("conv input must be [C,H,W], got {input:?}")));
        };
        let [c_out, kc, kh, kw] = *kernels else {
            return Err(Error::shape(format!(
                "conv kernels must be [C_out,C_in,k,k], got {kernels:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("kernels must be square, got {kh}x{kw}")));
        }
        let oh = conv_output_len(h, kh, stride, padding)?;
        let ow = conv_output_len(w, kw, stride, padding)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            oh,
            ow,
        })
    }

    /// Calls `f(oy, iy, ox_lo, ox_hi, ix_lo)` for every output row touched by kernel tap `(ky, kx)`.
    #[inline]
    fn for_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (oy_lo, oy_hi) = valid_range(self.h, self.oh, ky, self.stride, self.padding);
        let (ox_lo, ox_hi) = valid_range(self.w, self.ow, kx, self.stride, self.padding);
        if ox_lo >= ox_hi {
            return;
        }
        let ix_lo = ox_lo * self.stride + kx - self.padding;
        for oy in oy_lo..oy_hi {
            let iy = oy * self.stride + ky - self.padding;
            f(oy, iy, ox_lo, ox_hi, ix_lo);
        }
    }
}

/// Zero-padded cross-correlation over `f64` buffers; shared with path counting.
pub(crate) fn conv2d_f64(
    input: &[f64],
    input_shape: &[usize],
    kernels: &[f64],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, [usize; 3])> {
    let g = Geometry::new(input_shape, kernel_shape, stride, padding)?;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0f64; g.c_out * plane_out];
    for co in 0..g.c_out {
        let acc = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let x = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernels[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    g.for_tap(ky, kx, |oy, iy, lo, hi, ix_lo| {
                        let row = &mut acc[oy * g.ow + lo..oy * g.ow + hi];
                        if g.stride == 1 {
                            let src = &x[iy * g.w + ix_lo..iy * g.w + ix_lo + (hi - lo)];
                            for (a, &v) in row.iter_mut().zip(src) {
                                *a += wv * v;
                            }
                        } else {
                            for (j, a) in row.iter_mut().enumerate() {
                                *a += wv * x[iy * g.w + ix_lo + j * g.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    Ok((out, [g.c_out, g.oh, g.ow]))
}

fn widen(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

fn narrow(data: Vec<f64>) -> Vec<f32> {
    data.into_iter().map(|v| v as f32).collect()
}

/// Bias-free 2-D convolution (cross-correlation) with zero padding.
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, k, k]`; the result is
/// `[C_out, H', W']` with `H' = (H + 2p - k) / stride + 1`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (out, shape) = conv2d_f64(
        &widen(input.data()),
        input.shape(),
        &widen(kernels.data()),
        kernels.shape(),
        stride,
        padding,
    )?;
    Tensor::new(shape.to_vec(), narrow(out))
}

/// Gradients of a convolution with respect to its input and its kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(input.shape(), kernels.shape(), stride, padding)?;
    grad_out.expect_shape(&[g.c_out, g.oh, g.ow], "conv upstream gradient")?;
    let x = widen(input.data());
    let wk = widen(kernels.data());
    let go = widen(grad_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; wk.len()];
    for co in 0..g.c_out {
        let gplane = &go[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            let gin = &mut gx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wk[widx];
                    let mut acc = 0.0f64;
                    g.for_tap(ky, kx, |oy, iy, lo, hi, ix_lo| {
                        for j in 0..hi - lo {
                            let gv = gplane[oy * g.ow + lo + j];
                            let ix = iy * g.w + ix_lo + j * g.stride;
                            acc += gv * xin[ix];
                            gin[ix] += wv * gv;
                        }
                    });
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), narrow(gx))?,
        Tensor::new(kernels.shape().to_vec(), narrow(gw))?,
    ))
}

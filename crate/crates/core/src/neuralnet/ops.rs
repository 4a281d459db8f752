//! Layer kernels with exact backward passes.
//!
//! Convolutions lower each sample to an im2col matrix and run one GEMM;
//! transposed convolution is the adjoint of the same lowering.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg("stride must be >= 1"));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose tap `kx` reads inside the image.
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.pad as isize;
        // need 0 <= o*s + shift < size
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = (size as isize - 1 - shift).div_euclid(s) + 1;
        let lo = lo.max(0) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo.min(hi), hi)
    }
}

fn im2col<F: Real>(g: &Geometry, image: &[F], cols: &mut [F]) {
    let l = g.cols();
    cols.iter_mut().for_each(|x| *x = F::zero());
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.out_h, g.height);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.out_w, g.width);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        out_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            out_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &Geometry, cols: &[F], image: &mut [F]) {
    let l = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.out_h, g.height);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.out_w, g.width);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let in_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst_row[ox * g.stride + kx - g.pad] += in_row[ox];
                    }
                }
            }
        }
    }
}

fn conv_geometry<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, stride: usize, pad: usize) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(format!(
            "conv weight expects {wc} input channels, input has {c} (input {:?}, weight {:?})",
            input.shape(),
            weight.shape()
        )));
    }
    Ok((n, o, Geometry::new(c, h, w, kh, kw, stride, pad)?))
}

/// Cross-correlation with zero padding. `input` is `[N, C, H, W]`,
/// `weight` is `[O, C, KH, KW]`, `bias` is `[O]`.
pub fn conv2d<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: Option<&Tensor<F>>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let (n, o, g) = conv_geometry(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::shape(format!("bias has {} entries, expected {o}", b.len())));
        }
    }
    let (rows, l) = (g.rows(), g.cols());
    let in_size = g.channels * g.height * g.width;
    let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
    let mut cols = vec![F::zero(); rows * l];
    for s in 0..n {
        im2col(&g, &input.data()[s * in_size..(s + 1) * in_size], &mut cols);
        let dst = &mut out.data_mut()[s * o * l..(s + 1) * o * l];
        F::gemm(o, rows, l, weight.data(), false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(l).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|x| *x += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn conv2d_backward<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, stride: usize, pad: usize, grad_out: &Tensor<F>) -> Result<ConvGrads<F>> {
    let (n, o, g) = conv_geometry(input, weight, stride, pad)?;
    let expected = [n, o, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out is {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (rows, l) = (g.rows(), g.cols());
    let in_size = g.channels * g.height * g.width;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[o]);
    let mut cols = vec![F::zero(); rows * l];
    for s in 0..n {
        let go = &grad_out.data()[s * o * l..(s + 1) * o * l];
        im2col(&g, &input.data()[s * in_size..(s + 1) * in_size], &mut cols);
        // dW[o, r] += dY[o, l] · cols[r, l]ᵀ
        F::gemm(o, l, rows, go, false, &cols, true, grad_w.data_mut(), true);
        for (oc, chunk) in go.chunks_exact(l).enumerate() {
            let mut acc = F::zero();
            for &v in chunk {
                acc += v;
            }
            grad_b.data_mut()[oc] += acc;
        }
        // dcols[r, l] = W[o, r]ᵀ · dY[o, l]
        F::gemm(rows, o, l, weight.data(), true, go, false, &mut cols, false);
        col2im(&g, &cols, &mut grad_in.data_mut()[s * in_size..(s + 1) * in_size]);
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

pub fn relu<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    let data = input.data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward<F: Real>(input: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu grad {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index of its maximum (first in row-major
/// order on ties).
pub fn maxpool2x2<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let src = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [best + 1, best + w, best + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + y * ow + x;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward<F: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool argmax/grad length mismatch"));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[idx] += g;
    }
    Ok(grad_in)
}

fn deconv_geometry<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, stride: usize) -> Result<(usize, usize, usize, Geometry)> {
    let (n, ci, h, w) = input.dims4()?;
    let (wci, co, kh, kw) = weight.dims4()?;
    if wci != ci {
        return Err(Error::shape(format!(
            "deconv weight expects {wci} input channels, input has {ci}"
        )));
    }
    if stride < 2 || stride % 2 != 0 || kh != 2 * stride || kw != 2 * stride {
        return Err(Error::shape(format!(
            "deconv needs an even stride >= 2 and kernel 2*stride, got stride {stride}, kernel {kh}x{kw}"
        )));
    }
    // The output image seen through a forward conv with this geometry maps
    // back onto the h x w input exactly.
    let g = Geometry::new(co, h * stride, w * stride, kh, kw, stride, stride / 2)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok((n, ci, co, g))
}

/// Transposed convolution upscaling by `stride`. `weight` is
/// `[C_in, C_out, 2S, 2S]`; output is `[N, C_out, S·H, S·W]`.
pub fn deconv2d<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, stride: usize) -> Result<Tensor<F>> {
    let (n, ci, co, g) = deconv_geometry(input, weight, stride)?;
    let (rows, l) = (g.rows(), g.cols());
    let out_size = co * g.height * g.width;
    let mut out = Tensor::zeros(&[n, co, g.height, g.width]);
    let mut cols = vec![F::zero(); rows * l];
    for s in 0..n {
        let x = &input.data()[s * ci * l..(s + 1) * ci * l];
        // cols[r, l] = W[ci, r]ᵀ · x[ci, l]
        F::gemm(rows, ci, l, weight.data(), true, x, false, &mut cols, false);
        col2im(&g, &cols, &mut out.data_mut()[s * out_size..(s + 1) * out_size]);
    }
    Ok(out)
}

pub struct DeconvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
}

pub fn deconv2d_backward<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, stride: usize, grad_out: &Tensor<F>) -> Result<DeconvGrads<F>> {
    let (n, ci, co, g) = deconv_geometry(input, weight, stride)?;
    let expected = [n, co, g.height, g.width];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "deconv grad_out is {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (rows, l) = (g.rows(), g.cols());
    let out_size = co * g.height * g.width;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut cols = vec![F::zero(); rows * l];
    for s in 0..n {
        im2col(&g, &grad_out.data()[s * out_size..(s + 1) * out_size], &mut cols);
        let x = &input.data()[s * ci * l..(s + 1) * ci * l];
        // dW[ci, r] += x[ci, l] · cols[r, l]ᵀ
        F::gemm(ci, l, rows, x, false, &cols, true, grad_w.data_mut(), true);
        // dx[ci, l] = W[ci, r] · cols[r, l]
        F::gemm(ci, rows, l, weight.data(), false, &cols, false, &mut grad_in.data_mut()[s * ci * l..(s + 1) * ci * l], false);
    }
    Ok(DeconvGrads {
        input: grad_in,
        weight: grad_w,
    })
}

/// Bilinear interpolation taps for a kernel of size `2·stride`.
pub fn bilinear_taps(stride: usize) -> Vec<f64> {
    let size = 2 * stride;
    let factor = size.div_ceil(2) as f64;
    let center = factor - 0.5;
    (0..size).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect()
}

/// Deconvolution weights `[C, C, 2S, 2S]` that upsample each channel
/// bilinearly and independently.
pub fn bilinear_kernel<F: Real>(channels: usize, stride: usize) -> Tensor<F> {
    let taps = bilinear_taps(stride);
    let k = taps.len();
    let mut t = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        for y in 0..k {
            for x in 0..k {
                t.data_mut()[((c * channels + c) * k + y) * k + x] = F::from_f64(taps[y] * taps[x]);
            }
        }
    }
    t
}

/// Elementwise sum of two equally shaped score maps.
pub fn fuse_sum<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

//! Forward and backward kernels for the fixed operation set.
//!
//! Convolutions run as im2col followed by a single-threaded GEMM, one image at
//! a time, so the accumulation order is fixed for a given shape.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. Transposition is expressed purely
/// through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the dimensions and
    // strides passed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid, stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], weight: &[usize]) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::config(format!(
                "conv2d input must be 4-d, got {input:?}"
            )));
        };
        let [filters, wc, kh, kw] = *weight else {
            return Err(Error::config(format!(
                "conv2d weight must be 4-d, got {weight:?}"
            )));
        };
        if wc != in_channels {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {in_channels}, weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::config("conv2d kernel must be square"));
        }
        if height < kh || width < kw {
            return Err(Error::config(format!(
                "conv2d input {height}x{width} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel: kh,
        })
    }

    pub fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h(), self.out_w()]
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (k, ow, oh, w) = (g.kernel, g.out_w(), g.out_h(), g.width);
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * w..(c + 1) * g.height * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + ki) * w + kj..(oy + ki) * w + kj + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (k, ow, oh, w) = (g.kernel, g.out_w(), g.out_h(), g.width);
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * w..(c + 1) * g.height * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ki) * w + kj..(oy + ki) * w + kj + ow];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Valid stride-1 convolution. `bias` may be omitted for the synapse-current
/// passes that reuse this kernel with transformed weights.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeometry::infer(input.shape(), weight.shape())?;
    if let Some(b) = bias {
        b.expect_shape(&[g.filters])?;
    }
    let (kk, p, f) = (g.patch_len(), g.positions(), g.filters);
    let in_len = g.in_channels * g.height * g.width;
    let mut out = vec![0.0; g.batch * f * p];
    let mut cols = vec![0.0; kk * p];
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * f * p..(n + 1) * f * p];
        if let Some(b) = bias {
            for (fi, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[fi]);
            }
        }
        gemm(f, kk, p, weight.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::new(g.output_shape(), out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::infer(input.shape(), weight.shape())?;
    grad_out.expect_shape(&g.output_shape())?;
    let (kk, p, f) = (g.patch_len(), g.positions(), g.filters);
    let in_len = g.in_channels * g.height * g.width;
    let mut dw = vec![0.0; f * kk];
    let mut db = vec![0.0; f];
    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for n in 0..g.batch {
        let dy = &grad_out.data()[n * f * p..(n + 1) * f * p];
        for (fi, row) in dy.chunks(p).enumerate() {
            db[fi] += row.iter().sum::<f64>();
        }
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(f, p, kk, dy, false, &cols, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, f, p, weight.data(), true, dy, false, 0.0, &mut dcols);
            col2im(&g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: dx
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![f], db)?,
    })
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, d] = *input.shape() else {
        return Err(Error::config(format!(
            "linear input must be 2-d, got {:?}",
            input.shape()
        )));
    };
    let [wd, m] = *weight.shape() else {
        return Err(Error::config(format!(
            "linear weight must be 2-d, got {:?}",
            weight.shape()
        )));
    };
    if wd != d {
        return Err(Error::config(format!(
            "linear dimension mismatch: input has {d} features, weight expects {wd}"
        )));
    }
    Ok((n, d, m))
}

/// `input[N,D] * weight[D,M] + bias[M]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, m) = linear_dims(input, weight)?;
    let mut out = vec![0.0; n * m];
    if let Some(b) = bias {
        b.expect_shape(&[m])?;
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, d, m, input.data(), false, weight.data(), false, 1.0, &mut out);
    Tensor::new(vec![n, m], out)
}

pub struct LinearGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<LinearGrads> {
    let (n, d, m) = linear_dims(input, weight)?;
    grad_out.expect_shape(&[n, m])?;
    let mut dw = vec![0.0; d * m];
    gemm(d, n, m, input.data(), true, grad_out.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; m];
    for row in grad_out.data().chunks(m) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = if need_input {
        let mut dx = vec![0.0; n * d];
        gemm(n, m, d, grad_out.data(), false, weight.data(), true, 0.0, &mut dx);
        Some(Tensor::new(vec![n, d], dx)?)
    } else {
        None
    };
    Ok(LinearGrads {
        input: dx,
        weight: Tensor::new(vec![d, m], dw)?,
        bias: Tensor::new(vec![m], db)?,
    })
}

/// 2x2 max pooling. Returns the output and, per output element, the flat
/// index of the selected input (first maximum in row-major window order).
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::config(format!(
            "maxpool2 input must be 4-d, got {:?}",
            input.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "maxpool2 needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

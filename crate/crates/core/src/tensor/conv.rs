//! 2-D convolution (cross-correlation) and its exact adjoint, implemented with
//! im2col / col2im around a strided GEMM.
//!
//! Layouts: images are `[C, H, W]` or batched `[B, C, H, W]`; kernels are
//! `[C_out, C_in, k, k]`. The transposed convolution uses the same kernel
//! tensor as the forward one, so `conv2d_transpose(·, K)` is the linear
//! adjoint of `conv2d(·, K)` for a fixed geometry.

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully resolved geometry of one convolution. The forward direction maps
/// `[C_in, in_h, in_w]` to `[C_out, out_h, out_w]`; the transposed direction
/// maps back to exactly the recorded input extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::ShapeConfig(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::ShapeConfig(format!(
            "({extent} + 2*{pad} - {kernel}) / {stride} is not integral"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::ShapeConfig(format!(
                "conv extents must be positive (c_in {c_in}, c_out {c_out}, k {kernel}, stride {stride}, {in_h}x{in_w})"
            )));
        }
        let out_h = out_extent(in_h, kernel, stride, pad)?;
        let out_w = out_extent(in_w, kernel, stride, pad)?;
        Ok(Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Writes the `[C_in·k·k, out_h·out_w]` patch matrix of one image.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let npos = self.positions();
        for c in 0..self.c_in {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch matrix back into one image (adjoint of `im2col`).
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let npos = self.positions();
        img.fill(T::zero());
        for c in 0..self.c_in {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward convolution of `batch` images stored back to back.
    pub(crate) fn forward<T: Scalar>(&self, x: &[T], batch: usize, kernel: &[T]) -> Vec<T> {
        let (pl, np) = (self.patch_len(), self.positions());
        let mut cols = vec![T::zero(); pl * np];
        let mut out = vec![T::zero(); batch * self.output_len()];
        for b in 0..batch {
            self.im2col(&x[b * self.input_len()..(b + 1) * self.input_len()], &mut cols);
            let dst = &mut out[b * self.output_len()..(b + 1) * self.output_len()];
            gemm(self.c_out, pl, np, kernel, pl, 1, &cols, np, 1, dst, np, 1, false);
        }
        out
    }

    /// Transposed convolution: the adjoint of [`forward`](Self::forward).
    pub(crate) fn transpose<T: Scalar>(&self, y: &[T], batch: usize, kernel: &[T]) -> Vec<T> {
        let (pl, np) = (self.patch_len(), self.positions());
        let mut cols = vec![T::zero(); pl * np];
        let mut out = vec![T::zero(); batch * self.input_len()];
        for b in 0..batch {
            let src = &y[b * self.output_len()..(b + 1) * self.output_len()];
            // cols = Kᵀ · y_b
            gemm(pl, self.c_out, np, kernel, 1, pl, src, np, 1, &mut cols, np, 1, false);
            self.col2im(&cols, &mut out[b * self.input_len()..(b + 1) * self.input_len()]);
        }
        out
    }

    /// `Σ_b y_b · im2col(x_b)ᵀ`, shaped like the kernel. This is the kernel
    /// gradient of the forward convolution (with `y` the output gradient) and,
    /// with the roles swapped, of the transposed convolution.
    pub(crate) fn kernel_grad<T: Scalar>(&self, x: &[T], y: &[T], batch: usize) -> Vec<T> {
        let (pl, np) = (self.patch_len(), self.positions());
        let mut cols = vec![T::zero(); pl * np];
        let mut grad = vec![T::zero(); self.c_out * pl];
        for b in 0..batch {
            self.im2col(&x[b * self.input_len()..(b + 1) * self.input_len()], &mut cols);
            let yb = &y[b * self.output_len()..(b + 1) * self.output_len()];
            gemm(self.c_out, np, pl, yb, np, 1, &cols, 1, np, &mut grad, pl, 1, true);
        }
        grad
    }
}

/// Splits an image tensor shape into (batch, C, H, W, was_batched).
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0, 0])),
    }
}

fn kernel_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [co, ci, kh, kw] if kh == kw => Ok((co, ci, kh)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0, 0])),
    }
}

/// Cross-correlation of `x` (`[C_in,H,W]` or `[B,C_in,H,W]`) with `kernel`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (b, c, h, w, batched) = image_dims(x.shape(), "conv2d")?;
    let (co, ci, k) = kernel_dims(kernel.shape(), "conv2d")?;
    if ci != c {
        return Err(Error::shape("conv2d", x.shape(), kernel.shape()));
    }
    let g = ConvGeometry::new(ci, co, k, stride, pad, h, w)?;
    let out = g.forward(x.data(), b, kernel.data());
    let shape = if batched {
        vec![b, co, g.out_h, g.out_w]
    } else {
        vec![co, g.out_h, g.out_w]
    };
    Tensor::new(shape, out)?.ensure_finite("conv2d")
}

/// Transposed convolution of `y` back to the input space of `conv2d` with the
/// same kernel, stride and pad. `out_hw` selects the target extents when more
/// than one input size maps onto `y`'s extents; `None` picks the smallest.
pub fn conv2d_transpose<T: Scalar>(
    y: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    let (b, c, h, w, batched) = image_dims(y.shape(), "conv2d_transpose")?;
    let (co, ci, k) = kernel_dims(kernel.shape(), "conv2d_transpose")?;
    if co != c {
        return Err(Error::shape("conv2d_transpose", y.shape(), kernel.shape()));
    }
    let (th, tw) = match out_hw {
        Some(hw) => hw,
        None => {
            let base = |e: usize| ((e - 1) * stride + k).checked_sub(2 * pad);
            match (base(h), base(w)) {
                (Some(th), Some(tw)) if th > 0 && tw > 0 => (th, tw),
                _ => {
                    return Err(Error::ShapeConfig(format!(
                        "no input extent maps onto {h}x{w} with k {k}, stride {stride}, pad {pad}"
                    )))
                }
            }
        }
    };
    let g = ConvGeometry::new(ci, co, k, stride, pad, th, tw)?;
    if (g.out_h, g.out_w) != (h, w) {
        return Err(Error::shape("conv2d_transpose", y.shape(), &[b, co, g.out_h, g.out_w]));
    }
    let out = g.transpose(y.data(), b, kernel.data());
    let shape = if batched { vec![b, ci, th, tw] } else { vec![ci, th, tw] };
    Tensor::new(shape, out)?.ensure_finite("conv2d_transpose")
}

/// Gradient of `⟨conv2d(x, K), dy⟩` with respect to `K`.
pub fn conv2d_kernel_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let batch = x.numel() / geom.input_len().max(1);
    if x.numel() != batch * geom.input_len() || dy.numel() != batch * geom.output_len() {
        return Err(Error::shape("conv2d_kernel_grad", x.shape(), dy.shape()));
    }
    Tensor::new(
        geom.kernel_shape().to_vec(),
        geom.kernel_grad(x.data(), dy.data(), batch),
    )
}

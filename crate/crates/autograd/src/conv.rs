//! `im2col` lowering for 2-D convolution and its transpose.

use crate::{gemm, Scalar, ShapeError, Tensor};

pub fn conv_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + kernel - 2 * pad
}

/// Geometry of a strided convolution from an `h×w` image to `ho×wo`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

/// `[B, C, H, W]` image into a `[C·k·k, B·Ho·Wo]` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut col = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` to `[C, B·P]`.
pub(crate) fn batch_to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * plane..][..plane];
            out[(c * batch + b) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B·P]` to `[B, C, P]`.
pub(crate) fn channel_to_batch_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[(c * batch + b) * plane..][..plane];
            out[(b * channels + c) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, ShapeError> {
    if x_shape.len() != 4 {
        return Err(ShapeError::Rank {
            op: "conv2d",
            expected: 4,
            got: x_shape.to_vec(),
        });
    }
    if w_shape.len() != 4 || w_shape[1] != x_shape[1] || w_shape[2] != w_shape[3] {
        return Err(ShapeError::Mismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let kernel = w_shape[2];
    if x_shape[2] + 2 * pad < kernel || x_shape[3] + 2 * pad < kernel {
        return Err(ShapeError::Mismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    Ok(ConvGeom {
        batch: x_shape[0],
        channels: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        kernel,
        stride,
        pad,
        ho: conv_out_size(x_shape[2], kernel, stride, pad),
        wo: conv_out_size(x_shape[3], kernel, stride, pad),
    })
}

/// Geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of (image = the transposed conv's output).
pub(crate) fn conv_transpose_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, ShapeError> {
    if x_shape.len() != 4 {
        return Err(ShapeError::Rank {
            op: "conv_transpose2d",
            expected: 4,
            got: x_shape.to_vec(),
        });
    }
    if w_shape.len() != 4 || w_shape[0] != x_shape[1] || w_shape[2] != w_shape[3] {
        return Err(ShapeError::Mismatch {
            op: "conv_transpose2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let kernel = w_shape[2];
    if (x_shape[2] - 1) * stride + kernel < 2 * pad + 1 {
        return Err(ShapeError::Mismatch {
            op: "conv_transpose2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let h = conv_transpose_out_size(x_shape[2], kernel, stride, pad);
    let w = conv_transpose_out_size(x_shape[3], kernel, stride, pad);
    Ok(ConvGeom {
        batch: x_shape[0],
        channels: w_shape[1],
        h,
        w,
        kernel,
        stride,
        pad,
        ho: x_shape[2],
        wo: x_shape[3],
    })
}

/// Plain (non-recording) convolution; returns the output and the patch
/// matrix so callers that need a weight gradient can reuse it.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, ShapeError> {
    let (out, _) = conv2d_raw(x, weight, bias, stride, pad)?;
    Ok(out)
}

pub(crate) fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>), ShapeError> {
    let g = conv_geom(x.shape(), weight.shape(), stride, pad)?;
    let out_c = weight.dim(0);
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(ShapeError::Mismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let col = im2col(x.data(), &g);
    let mut out_cm = vec![T::zero(); out_c * g.col_cols()];
    gemm(out_c, g.col_rows(), g.col_cols(), weight.data(), false, &col, false, T::zero(), &mut out_cm);
    let plane = g.ho * g.wo;
    let mut out = channel_to_batch_major(&out_cm, g.batch, out_c, plane);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.batch, plane);
    }
    let t = Tensor::new(vec![g.batch, out_c, g.ho, g.wo], out)?;
    Ok((t, col))
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], batch: usize, plane: usize) {
    let channels = bias.len();
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            for v in &mut out[(b * channels + c) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

pub(crate) fn channel_bias_grad<T: Scalar>(grad: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += grad[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    gb
}

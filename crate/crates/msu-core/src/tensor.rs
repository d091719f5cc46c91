//! Dense row-major tensors, the conv-to-GEMM lowering, and Frobenius norms.
//!
//! Weights are stored as 32-bit floats; GEMM and norm accumulation happen in
//! 64-bit and are rounded back to 32-bit at the end. Convolution weights of
//! shape `(Cout, Cin, Kh, Kw)` lower to a `(Cout, Cin*Kh*Kw)` matrix with the
//! `(Cin, Kh, Kw)` axes flattened in that order, which is also the row order
//! produced by [`im2col`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// An n-dimensional array of finite 32-bit floats in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    /// Builds a tensor, checking that `data` matches the shape volume and is finite.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::LengthMismatch { expected: volume, actual: data.len() });
        }
        if data.len() != volume {
            return Err(Error::LengthMismatch { expected: volume, actual: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let volume: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; volume] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if volume != self.data.len() {
            return Err(Error::LengthMismatch { expected: self.data.len(), actual: volume });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise sum `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }
}

/// A 2-D view of a weight tensor as the left operand of a GEMM.
///
/// `rows` runs over the output axis, `cols` over the reduction axis. The
/// mapping to tensor coordinates is a bijection; with the canonical row-major
/// lowering the flat index of `(row, col)` in the view equals the flat index
/// in the original tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmView {
    rows: usize,
    cols: usize,
    origin: Vec<usize>,
}

impl GemmView {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Shape of the tensor this view was lowered from.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Flat index into the original tensor's row-major buffer.
    pub fn flat(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    /// Inverse of [`flat`](Self::flat).
    pub fn from_flat(&self, flat: usize) -> (usize, usize) {
        (flat / self.cols, flat % self.cols)
    }

    /// Original tensor coordinates of a view cell.
    pub fn coords(&self, row: usize, col: usize) -> Vec<usize> {
        let mut rem = self.flat(row, col);
        let mut out = vec![0usize; self.origin.len()];
        for (i, &extent) in self.origin.iter().enumerate().rev() {
            out[i] = rem % extent;
            rem /= extent;
        }
        out
    }
}

/// Lowers fc weights `(Out, In)` or conv weights `(Cout, Cin, Kh, Kw)` to a
/// GEMM-shaped matrix view. Other ranks are rejected.
pub fn as_gemm_view(weights: &DenseTensor) -> Result<GemmView> {
    match *weights.shape() {
        [out, input] => Ok(GemmView { rows: out, cols: input, origin: weights.shape().to_vec() }),
        [cout, cin, kh, kw] => {
            Ok(GemmView { rows: cout, cols: cin * kh * kw, origin: weights.shape().to_vec() })
        }
        _ => Err(Error::UnsupportedRank(weights.rank())),
    }
}

/// Spatial output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls a `(C, H, W)` input into a `(C*Kh*Kw, P)` matrix whose column `p`
/// holds the receptive field of output position `p`, zero outside the padded
/// bounds. Column order is row-major over output positions.
pub fn im2col(
    input: &DenseTensor,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<DenseTensor> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::UnsupportedRank(input.rank()));
    };
    let (kh, kw) = kernel;
    let (out_h, out_w) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::IncompatibleBlocking(alloc::format!(
                "kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
            )))
        }
    };
    let positions = out_h * out_w;
    let col_rows = c * kh * kw;
    let mut data = vec![0.0f32; col_rows * positions];
    let src = input.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let p = oy * out_w + ox;
            for ch in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let row = (ch * kh + ky) * kw + kx;
                        data[row * positions + p] =
                            src[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    DenseTensor::new(&[col_rows, positions], data)
}

/// Adjoint of [`im2col`]: folds a `(C*Kh*Kw, P)` matrix back onto a `(C, H, W)`
/// tensor, accumulating overlapping contributions. Used by conv backward.
pub fn col2im(
    cols: &DenseTensor,
    input_shape: (usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<DenseTensor> {
    let (c, h, w) = input_shape;
    let (kh, kw) = kernel;
    let (out_h, out_w) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::IncompatibleBlocking(alloc::format!(
                "kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
            )))
        }
    };
    let positions = out_h * out_w;
    if cols.shape() != [c * kh * kw, positions] {
        return Err(Error::ShapeMismatch {
            expected: vec![c * kh * kw, positions],
            actual: cols.shape().to_vec(),
        });
    }
    let mut data = vec![0.0f32; c * h * w];
    let src = cols.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let p = oy * out_w + ox;
            for ch in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let row = (ch * kh + ky) * kw + kx;
                        data[(ch * h + iy as usize) * w + ix as usize] +=
                            src[row * positions + p];
                    }
                }
            }
        }
    }
    DenseTensor::new(&[c, h, w], data)
}

/// `sqrt(sum of squares)`, accumulated in 64-bit.
pub fn frobenius_norm(t: &DenseTensor) -> f32 {
    libm::sqrt(sum_squares(t.data())) as f32
}

/// Frobenius distance `||a - b||_F` in 64-bit, used for ADMM residuals.
pub fn frobenius_distance(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(libm::sqrt(sum))
}

pub(crate) fn sum_squares(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

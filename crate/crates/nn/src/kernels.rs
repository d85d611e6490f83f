//! Forward and backward kernels for the dense layers. Convolutions are
//! lowered to GEMM through an explicit column buffer.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    fn rowmajor(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "matrix view out of bounds"
        );
    }
}

/// `c = a * b + beta * c` where `c` is row-major `[a.rows, b.cols]`.
fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    a.check();
    b.check();
    // SAFETY: every view was bounds-checked above and `c` has exactly
    // `a.rows * b.cols` elements with row stride `b.cols`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a 1-D convolution over `[batch, c_in, len_in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub len_out: usize,
}

impl ConvGeom {
    pub fn conv1d(input: &[usize], weight: &[usize], stride: usize, dilation: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 3 || input[1] != weight[1] {
            return Err(shape_err("conv1d", input, weight));
        }
        if stride == 0 || dilation == 0 {
            return Err(invalid("conv1d", "stride and dilation must be >= 1"));
        }
        let span = dilation * (weight[2] - 1) + 1;
        let padded = input[2] + 2 * padding;
        if span > padded {
            return Err(shape_err("conv1d", input, weight));
        }
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            c_out: weight[0],
            len_in: input[2],
            kernel: weight[2],
            stride,
            dilation,
            padding,
            len_out: (padded - span) / stride + 1,
        })
    }

    /// Transposed convolution: weight layout `[c_in, c_out, kernel]`,
    /// output length `(len - 1) * stride + kernel - 2 * padding`.
    pub fn conv_transpose1d(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 3 || input[1] != weight[0] {
            return Err(shape_err("conv_transpose1d", input, weight));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose1d", "stride must be >= 1"));
        }
        let full = (input[2] - 1) * stride + weight[2];
        if 2 * padding >= full {
            return Err(invalid(
                "conv_transpose1d",
                format!("padding {padding} consumes the whole output of length {full}"),
            ));
        }
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            c_out: weight[1],
            len_in: input[2],
            kernel: weight[2],
            stride,
            dilation: 1,
            padding,
            len_out: full - 2 * padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input index read by output position `l` at tap `k`, if in range.
    #[inline]
    fn source(&self, l: usize, k: usize) -> Option<usize> {
        let pos = (l * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (kk, lo) = (g.kernel, g.len_out);
    for ci in 0..g.c_in {
        let xrow = &x[ci * g.len_in..(ci + 1) * g.len_in];
        for k in 0..kk {
            let dst = &mut col[(ci * kk + k) * lo..(ci * kk + k + 1) * lo];
            if g.stride == 1 {
                let off = (k * g.dilation) as isize - g.padding as isize;
                let start = (-off).max(0) as usize;
                let end = ((g.len_in as isize - off).min(lo as isize)).max(start as isize) as usize;
                dst[..start].fill(0.0);
                dst[end..].fill(0.0);
                let s0 = (start as isize + off) as usize;
                dst[start..end].copy_from_slice(&xrow[s0..s0 + (end - start)]);
            } else {
                for (l, d) in dst.iter_mut().enumerate() {
                    *d = g.source(l, k).map_or(0.0, |p| xrow[p]);
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (kk, lo) = (g.kernel, g.len_out);
    for ci in 0..g.c_in {
        let xrow = &mut dx[ci * g.len_in..(ci + 1) * g.len_in];
        for k in 0..kk {
            let src = &col[(ci * kk + k) * lo..(ci * kk + k + 1) * lo];
            for (l, &v) in src.iter().enumerate() {
                if let Some(p) = g.source(l, k) {
                    xrow[p] += v;
                }
            }
        }
    }
}

pub fn conv1d_forward(g: &ConvGeom, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let rows = g.c_in * g.kernel;
    let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * g.len_out]
    };
    let wm = Mat::rowmajor(w.data(), g.c_out, rows);
    for b in 0..g.batch {
        let xb = &x.data()[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        let cm = if g.is_pointwise() {
            Mat::rowmajor(xb, rows, g.len_out)
        } else {
            im2col(g, xb, &mut col);
            Mat::rowmajor(&col, rows, g.len_out)
        };
        let ob = &mut out[b * g.c_out * g.len_out..(b + 1) * g.c_out * g.len_out];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(g.len_out).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        gemm(wm, cm, if bias.is_some() { 1.0 } else { 0.0 }, ob);
    }
    Tensor::new(vec![g.batch, g.c_out, g.len_out], out).expect("conv1d output shape")
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv1d_backward(g: &ConvGeom, x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let rows = g.c_in * g.kernel;
    let mut gx = vec![0.0; g.batch * g.c_in * g.len_in];
    let mut gw = vec![0.0; g.c_out * rows];
    let mut gb = vec![0.0; g.c_out];
    let mut col = vec![0.0; rows * g.len_out];
    let mut dcol = vec![0.0; rows * g.len_out];
    let wm = Mat::rowmajor(w.data(), g.c_out, rows);
    for b in 0..g.batch {
        let xb = &x.data()[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        let gyb = &gy.data()[b * g.c_out * g.len_out..(b + 1) * g.c_out * g.len_out];
        let gym = Mat::rowmajor(gyb, g.c_out, g.len_out);
        for (co, row) in gyb.chunks(g.len_out).enumerate() {
            gb[co] += row.iter().sum::<f64>();
        }
        let gxb = &mut gx[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        if g.is_pointwise() {
            gemm(gym, Mat::rowmajor(xb, rows, g.len_out).t(), 1.0, &mut gw);
            gemm(wm.t(), gym, 1.0, gxb);
        } else {
            im2col(g, xb, &mut col);
            gemm(gym, Mat::rowmajor(&col, rows, g.len_out).t(), 1.0, &mut gw);
            gemm(wm.t(), gym, 0.0, &mut dcol);
            col2im_add(g, &dcol, gxb);
        }
    }
    (
        Tensor::new(vec![g.batch, g.c_in, g.len_in], gx).expect("grad input shape"),
        Tensor::new(vec![g.c_out, g.c_in, g.kernel], gw).expect("grad weight shape"),
        Tensor::new(vec![g.c_out], gb).expect("grad bias shape"),
    )
}

pub fn conv_transpose1d_forward(g: &ConvGeom, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let rows = g.c_out * g.kernel;
    let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
    let mut cols = vec![0.0; rows * g.len_in];
    let wm = Mat::rowmajor(w.data(), g.c_in, rows);
    for b in 0..g.batch {
        let xb = &x.data()[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        gemm(wm.t(), Mat::rowmajor(xb, g.c_in, g.len_in), 0.0, &mut cols);
        let ob = &mut out[b * g.c_out * g.len_out..(b + 1) * g.c_out * g.len_out];
        for co in 0..g.c_out {
            let orow = &mut ob[co * g.len_out..(co + 1) * g.len_out];
            if let Some(bias) = bias {
                orow.fill(bias.data()[co]);
            }
            for k in 0..g.kernel {
                let src = &cols[(co * g.kernel + k) * g.len_in..(co * g.kernel + k + 1) * g.len_in];
                for (i, &v) in src.iter().enumerate() {
                    let p = (i * g.stride + k) as isize - g.padding as isize;
                    if p >= 0 && (p as usize) < g.len_out {
                        orow[p as usize] += v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.c_out, g.len_out], out).expect("conv_transpose1d output shape")
}

pub fn conv_transpose1d_backward(g: &ConvGeom, x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let rows = g.c_out * g.kernel;
    let mut gx = vec![0.0; g.batch * g.c_in * g.len_in];
    let mut gw = vec![0.0; g.c_in * rows];
    let mut gb = vec![0.0; g.c_out];
    let mut dcols = vec![0.0; rows * g.len_in];
    let wm = Mat::rowmajor(w.data(), g.c_in, rows);
    for b in 0..g.batch {
        let xb = &x.data()[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        let gyb = &gy.data()[b * g.c_out * g.len_out..(b + 1) * g.c_out * g.len_out];
        for co in 0..g.c_out {
            let grow = &gyb[co * g.len_out..(co + 1) * g.len_out];
            gb[co] += grow.iter().sum::<f64>();
            for k in 0..g.kernel {
                let dst = &mut dcols[(co * g.kernel + k) * g.len_in..(co * g.kernel + k + 1) * g.len_in];
                for (i, d) in dst.iter_mut().enumerate() {
                    let p = (i * g.stride + k) as isize - g.padding as isize;
                    *d = if p >= 0 && (p as usize) < g.len_out {
                        grow[p as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        let dm = Mat::rowmajor(&dcols, rows, g.len_in);
        gemm(wm, dm, 0.0, &mut gx[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in]);
        gemm(Mat::rowmajor(xb, g.c_in, g.len_in), dm.t(), 1.0, &mut gw);
    }
    (
        Tensor::new(vec![g.batch, g.c_in, g.len_in], gx).expect("grad input shape"),
        Tensor::new(vec![g.c_in, g.c_out, g.kernel], gw).expect("grad weight shape"),
        Tensor::new(vec![g.c_out], gb).expect("grad bias shape"),
    )
}

/// `y = x w^T + b` for `x: [n, in]`, `w: [out, in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = vec![0.0; n * dout];
    if let Some(bias) = bias {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(
        Mat::rowmajor(x.data(), n, din),
        Mat::rowmajor(w.data(), dout, din).t(),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut out,
    );
    Tensor::new(vec![n, dout], out).expect("linear output shape")
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let gym = Mat::rowmajor(gy.data(), n, dout);
    let mut gx = vec![0.0; n * din];
    gemm(gym, Mat::rowmajor(w.data(), dout, din), 0.0, &mut gx);
    let mut gw = vec![0.0; dout * din];
    gemm(gym.t(), Mat::rowmajor(x.data(), n, din), 0.0, &mut gw);
    let mut gb = vec![0.0; dout];
    for row in gy.data().chunks(dout) {
        for (b, v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    (
        Tensor::new(vec![n, din], gx).expect("grad input shape"),
        Tensor::new(vec![dout, din], gw).expect("grad weight shape"),
        Tensor::new(vec![dout], gb).expect("grad bias shape"),
    )
}

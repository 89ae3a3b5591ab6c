//! Raw numeric kernels shared by the forward ops and the reverse pass.
//!
//! Everything here works on plain slices; shape checking happens in the
//! recording layer. Parallel loops only ever split over independent output
//! rows, so results are bitwise identical to the sequential order.

use rayon::prelude::*;

use super::Element;

const PAR_MIN_FLOPS: usize = 1 << 16;

/// C[m,n] = op_a(A) * op_b(B), where `ta`/`tb` transpose the 2-D operand.
/// Physical layouts: A is [m,k] (or [k,m] when `ta`), B is [k,n] (or [n,k]
/// when `tb`).
pub fn matmul2<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    // Normalize the lhs so the inner loops always stream rows of A.
    let a_rows: Vec<T>;
    let a = if ta {
        a_rows = transpose2(a, k, m);
        &a_rows[..]
    } else {
        a
    };

    let par = m * k * n >= PAR_MIN_FLOPS;
    let body = |i: usize, row_out: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        if tb {
            // B stored [n,k]: every output element is a contiguous dot.
            for (j, o) in row_out.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                *o = acc;
            }
        } else {
            for o in row_out.iter_mut() {
                *o = T::zero();
            }
            for (p, &aip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    row_out[j] += aip * b_row[j];
                }
            }
        }
    };

    if par {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

pub fn transpose2<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Strides of a row-major layout.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Flat-index map from an output shape onto a (possibly broadcast) source
/// shape of identical rank: source dims of extent 1 contribute stride 0.
pub struct BcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BcastMap {
    pub fn new(out_shape: &[usize], src_shape: &[usize]) -> Self {
        debug_assert_eq!(out_shape.len(), src_shape.len());
        let full = strides_of(src_shape);
        let src_strides = src_shape
            .iter()
            .zip(full)
            .map(|(&ext, s)| if ext == 1 { 0 } else { s })
            .collect();
        BcastMap {
            out_shape: out_shape.to_vec(),
            src_strides,
        }
    }

    pub fn src_index(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for d in (0..self.out_shape.len()).rev() {
            let coord = flat % self.out_shape[d];
            flat /= self.out_shape[d];
            idx += coord * self.src_strides[d];
        }
        idx
    }
}

/// Sum `grad` (laid out as `from_shape`) down onto `to_shape`, which must be
/// `from_shape` with some extents replaced by 1 (or a single element).
pub fn reduce_to_shape<T: Element>(grad: &[T], from_shape: &[usize], to_shape: &[usize]) -> Vec<T> {
    let to_numel: usize = to_shape.iter().product();
    if to_numel == grad.len() && from_shape == to_shape {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); to_numel];
    if to_numel == 1 {
        let mut acc = T::zero();
        for &g in grad {
            acc += g;
        }
        out[0] = acc;
        return out;
    }
    let map = BcastMap::new(from_shape, to_shape);
    for (i, &g) in grad.iter().enumerate() {
        out[map.src_index(i)] += g;
    }
    out
}

/// Row-wise softmax over the trailing `axis_len` stride; operates on groups
/// laid out as [outer, axis_len, inner].
pub fn softmax_axis<T: Element>(x: &[T], outer: usize, axis_len: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max_v = x[base];
            for a in 1..axis_len {
                let v = x[base + a * inner];
                if v > max_v {
                    max_v = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                let e = (x[base + a * inner] - max_v).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
}

pub fn log_softmax_axis<T: Element>(
    x: &[T],
    outer: usize,
    axis_len: usize,
    inner: usize,
    out: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max_v = x[base];
            for a in 1..axis_len {
                let v = x[base + a * inner];
                if v > max_v {
                    max_v = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                sum += (x[base + a * inner] - max_v).exp();
            }
            let lse = max_v + sum.ln();
            for a in 0..axis_len {
                out[base + a * inner] = x[base + a * inner] - lse;
            }
        }
    }
}

pub const GELU_COEF: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_value<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub fn sigmoid_value<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Geometry of one conv2d / pool2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if kernel > padded || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

/// Gather conv patches into a [rows = B*h_out*w_out, cols = C*kh*kw] matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.batch * g.h_out * g.w_out;
    let cols = g.c_in * g.kh * g.kw;
    let mut out = vec![T::zero(); rows * cols];
    let x_plane = g.h * g.w;
    out.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(row, dst)| {
            let b = row / (g.h_out * g.w_out);
            let rem = row % (g.h_out * g.w_out);
            let oy = rem / g.w_out;
            let ox = rem % g.w_out;
            let y0 = (oy * g.stride) as isize - g.padding as isize;
            let x0 = (ox * g.stride) as isize - g.padding as isize;
            let mut col = 0;
            for c in 0..g.c_in {
                let plane = &x[(b * g.c_in + c) * x_plane..(b * g.c_in + c + 1) * x_plane];
                for ky in 0..g.kh {
                    let yy = y0 + ky as isize;
                    for kx in 0..g.kw {
                        let xx = x0 + kx as isize;
                        dst[col] = if yy >= 0 && yy < g.h as isize && xx >= 0 && xx < g.w as isize {
                            plane[yy as usize * g.w + xx as usize]
                        } else {
                            T::zero()
                        };
                        col += 1;
                    }
                }
            }
        });
    out
}

/// Scatter-add the column matrix back into input layout (inverse of im2col).
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    let x_plane = g.h * g.w;
    let col_w = g.c_in * g.kh * g.kw;
    for row in 0..g.batch * g.h_out * g.w_out {
        let src = &cols[row * col_w..(row + 1) * col_w];
        let b = row / (g.h_out * g.w_out);
        let rem = row % (g.h_out * g.w_out);
        let oy = rem / g.w_out;
        let ox = rem % g.w_out;
        let y0 = (oy * g.stride) as isize - g.padding as isize;
        let x0 = (ox * g.stride) as isize - g.padding as isize;
        let mut col = 0;
        for c in 0..g.c_in {
            let base = (b * g.c_in + c) * x_plane;
            for ky in 0..g.kh {
                let yy = y0 + ky as isize;
                for kx in 0..g.kw {
                    let xx = x0 + kx as isize;
                    if yy >= 0 && yy < g.h as isize && xx >= 0 && xx < g.w as isize {
                        out[base + yy as usize * g.w + xx as usize] += src[col];
                    }
                    col += 1;
                }
            }
        }
    }
    out
}

/// [rows, c_out] -> [B, c_out, h_out, w_out] where rows = B*h_out*w_out.
pub fn rows_to_nchw<T: Element>(rows_mat: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    for row in 0..g.batch * plane {
        let b = row / plane;
        let p = row % plane;
        for c in 0..g.c_out {
            out[(b * g.c_out + c) * plane + p] = rows_mat[row * g.c_out + c];
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.batch * plane * g.c_out];
    for row in 0..g.batch * plane {
        let b = row / plane;
        let p = row % plane;
        for c in 0..g.c_out {
            out[row * g.c_out + c] = x[(b * g.c_out + c) * plane + p];
        }
    }
    out
}

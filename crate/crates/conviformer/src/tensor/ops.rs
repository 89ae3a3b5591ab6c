//! Forward operations: compute the value, record how to undo it.

use rand::Rng;

use super::kernels::{self, BcastMap, ConvGeom};
use super::{numel_of, Element, Result, Tape, Tensor, TensorError};

/// How a node was produced. Ids always point at earlier nodes, so the tape
/// is topologically ordered by construction.
pub enum Op<T: Element> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// mul * x + add, scalars fixed at record time.
    Affine { a: usize, mul: T, add: T },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    PowScalar { a: usize, p: T },
    Matmul(MatmulRec),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    MaxPool2d { x: usize, geom: ConvGeom, argmax: Vec<usize> },
    Softmax { a: usize, outer: usize, axis_len: usize, inner: usize },
    LogSoftmax { a: usize, outer: usize, axis_len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    BroadcastTo { a: usize },
    ReduceSum { a: usize, axis: Option<usize> },
    ReduceMean { a: usize, axis: Option<usize> },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    SelectColumns { a: usize, ids: Vec<usize> },
    /// Inverted dropout; `keep` holds the per-element multiplier (0 or 1/(1-rate)).
    Dropout { a: usize, keep: Vec<T> },
}

/// Batched matrix multiply record. Slices of `a` are logically [m,k]
/// (physically transposed when `ta`); `b` is either per-slice or a single
/// shared [k,n] operand.
pub struct MatmulRec {
    pub a: usize,
    pub b: usize,
    pub ta: bool,
    pub tb: bool,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Output shape for elementwise binary ops. Accepts identical shapes, a
/// single-element operand against anything, or equal-rank shapes where
/// mismatched extents are 1. Anything else is a shape error.
fn broadcast_out_shape(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<Vec<usize>> {
    if sa == sb {
        return Ok(sa.to_vec());
    }
    if numel_of(sa) == 1 {
        return Ok(sb.to_vec());
    }
    if numel_of(sb) == 1 {
        return Ok(sa.to_vec());
    }
    if sa.len() != sb.len() {
        return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
    }
    let mut out = Vec::with_capacity(sa.len());
    for (&da, &db) in sa.iter().zip(sb) {
        if da == db {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else if db == 1 {
            out.push(da);
        } else {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
    }
    Ok(out)
}

/// Evaluate an elementwise binary op under the broadcast rule above.
pub(crate) fn broadcast_binary<T: Element>(
    av: &[T],
    sa: &[usize],
    bv: &[T],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = numel_of(out_shape);
    let mut out = Vec::with_capacity(n);
    if sa == sb {
        for i in 0..n {
            out.push(f(av[i], bv[i]));
        }
    } else if av.len() == 1 {
        let a = av[0];
        for &b in bv {
            out.push(f(a, b));
        }
    } else if bv.len() == 1 {
        let b = bv[0];
        for &a in av {
            out.push(f(a, b));
        }
    } else {
        let ma = BcastMap::new(out_shape, sa);
        let mb = BcastMap::new(out_shape, sb);
        for i in 0..n {
            out.push(f(av[ma.src_index(i)], bv[mb.src_index(i)]));
        }
    }
    out
}

macro_rules! binary_op {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.check_tensor(a, stringify!($name))?;
            self.check_tensor(b, stringify!($name))?;
            let out_shape =
                broadcast_out_shape(stringify!($name), a.shape(), b.shape())?;
            let data = broadcast_binary(
                self.value(a),
                a.shape(),
                self.value(b),
                b.shape(),
                &out_shape,
                $f,
            );
            self.finite_check(&data, stringify!($name))?;
            let ng = self.node(a.id()).needs_grad || self.node(b.id()).needs_grad;
            Ok(self.push(data, out_shape, ng, Op::$variant { a: a.id(), b: b.id() }))
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(&mut self, a: &Tensor) -> Result<Tensor> {
            self.check_tensor(a, stringify!($name))?;
            let data: Vec<T> = self.value(a).iter().map(|&x| $f(x)).collect();
            self.finite_check(&data, stringify!($name))?;
            let ng = self.node(a.id()).needs_grad;
            Ok(self.push(data, a.shape().to_vec(), ng, Op::$variant { a: a.id() }))
        }
    };
}

impl<T: Element> Tape<T> {
    binary_op!(add, Add, |x, y| x + y);
    binary_op!(sub, Sub, |x, y| x - y);
    binary_op!(mul, Mul, |x, y| x * y);
    binary_op!(div, Div, |x, y| x / y);

    unary_op!(exp, Exp, |x: T| x.exp());
    unary_op!(log, Log, |x: T| x.ln());
    unary_op!(sqrt, Sqrt, |x: T| x.sqrt());
    unary_op!(abs, Abs, |x: T| x.abs());
    unary_op!(relu, Relu, |x: T| x.max(T::zero()));
    unary_op!(sigmoid, Sigmoid, kernels::sigmoid_value);
    unary_op!(gelu, Gelu, kernels::gelu_value);

    pub fn affine(&mut self, a: &Tensor, mul: T, add: T) -> Result<Tensor> {
        self.check_tensor(a, "affine")?;
        let data: Vec<T> = self.value(a).iter().map(|&x| mul * x + add).collect();
        self.finite_check(&data, "affine")?;
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(data, a.shape().to_vec(), ng, Op::Affine { a: a.id(), mul, add }))
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.affine(a, -T::one(), T::zero())
    }

    pub fn pow_scalar(&mut self, a: &Tensor, p: T) -> Result<Tensor> {
        self.check_tensor(a, "pow_scalar")?;
        let data: Vec<T> = self.value(a).iter().map(|&x| x.powf(p)).collect();
        self.finite_check(&data, "pow_scalar")?;
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(data, a.shape().to_vec(), ng, Op::PowScalar { a: a.id(), p }))
    }

    /// Matrix product over the trailing two dims. Accepts: two rank-2
    /// operands; equal leading (batch) dims; or a batched lhs against a
    /// single shared rank-2 rhs. `ta`/`tb` transpose the per-slice matrices.
    pub fn matmul_t(&mut self, a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        self.check_tensor(a, "matmul")?;
        self.check_tensor(b, "matmul")?;
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be rank >= 2: {sa:?} x {sb:?}")));
        }
        let (m, ka) = if ta {
            (sa[sa.len() - 1], sa[sa.len() - 2])
        } else {
            (sa[sa.len() - 2], sa[sa.len() - 1])
        };
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims disagree: {sa:?} x {sb:?}")));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty() && !lead_a.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(shape_err("matmul", format!("batch dims disagree: {sa:?} x {sb:?}")));
        }
        let batch: usize = lead_a.iter().product::<usize>().max(1);
        let k = ka;

        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); batch * m * n];
        for s in 0..batch {
            let a_slice = &av[s * m * k..(s + 1) * m * k];
            let b_slice = if shared_rhs { bv } else { &bv[s * k * n..(s + 1) * k * n] };
            kernels::matmul2(a_slice, b_slice, m, k, n, ta, tb, &mut out[s * m * n..(s + 1) * m * n]);
        }
        self.finite_check(&out, "matmul")?;

        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let ng = self.node(a.id()).needs_grad || self.node(b.id()).needs_grad;
        Ok(self.push(
            out,
            out_shape,
            ng,
            Op::Matmul(MatmulRec {
                a: a.id(),
                b: b.id(),
                ta,
                tb,
                batch,
                m,
                k,
                n,
                shared_rhs,
            }),
        ))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul_t(a, b, false, false)
    }

    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        self.check_tensor(x, "conv2d")?;
        self.check_tensor(w, "conv2d")?;
        let sx = x.shape();
        let sw = w.shape();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("need x[B,C,H,W], w[O,C,kh,kw]: {sx:?}, {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("channel mismatch: {} vs {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (h_out, w_out) = match (
            ConvGeom::out_extent(sx[2], sw[2], stride, padding),
            ConvGeom::out_extent(sx[3], sw[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {}x{} larger than padded input {}x{}", sw[2], sw[3], sx[2] + 2 * padding, sx[3] + 2 * padding),
                ))
            }
        };
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            h_out,
            w_out,
        };
        let cols = kernels::im2col(self.value(x), &geom);
        let rows = geom.batch * h_out * w_out;
        let kdim = geom.c_in * geom.kh * geom.kw;
        let mut out_rows = vec![T::zero(); rows * geom.c_out];
        kernels::matmul2(&cols, self.value(w), rows, kdim, geom.c_out, false, true, &mut out_rows);
        let out = kernels::rows_to_nchw(&out_rows, &geom);
        self.finite_check(&out, "conv2d")?;
        let out_shape = vec![geom.batch, geom.c_out, h_out, w_out];
        let ng = self.node(x.id()).needs_grad || self.node(w.id()).needs_grad;
        Ok(self.push(out, out_shape, ng, Op::Conv2d { x: x.id(), w: w.id(), geom }))
    }

    pub fn max_pool2d(&mut self, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        self.check_tensor(x, "max_pool2d")?;
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(shape_err("max_pool2d", format!("need x[B,C,H,W]: {sx:?}")));
        }
        if stride == 0 || k == 0 {
            return Err(TensorError::InvalidArg { op: "max_pool2d", detail: "k and stride must be >= 1".into() });
        }
        let (h_out, w_out) = match (
            ConvGeom::out_extent(sx[2], k, stride, 0),
            ConvGeom::out_extent(sx[3], k, stride, 0),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(shape_err("max_pool2d", format!("window {k} larger than input {}x{}", sx[2], sx[3]))),
        };
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sx[1],
            kh: k,
            kw: k,
            stride,
            padding: 0,
            h_out,
            w_out,
        };
        let xv = self.value(x);
        let plane = sx[2] * sx[3];
        let mut out = vec![T::zero(); sx[0] * sx[1] * h_out * w_out];
        let mut argmax = vec![0usize; out.len()];
        let mut oi = 0;
        for bc in 0..sx[0] * sx[1] {
            let src = &xv[bc * plane..(bc + 1) * plane];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = src[oy * stride * sx[3] + ox * stride];
                    let mut best_idx = oy * stride * sx[3] + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * stride + ky) * sx[3] + (ox * stride + kx);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = bc * plane + best_idx;
                    oi += 1;
                }
            }
        }
        let ng = self.node(x.id()).needs_grad;
        Ok(self.push(
            out,
            vec![sx[0], sx[1], h_out, w_out],
            ng,
            Op::MaxPool2d { x: x.id(), geom, argmax },
        ))
    }

    fn axis_split(&self, t: &Tensor, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op, axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_tensor(a, "softmax")?;
        let (outer, axis_len, inner) = self.axis_split(a, axis, "softmax")?;
        let mut out = vec![T::zero(); a.numel()];
        kernels::softmax_axis(self.value(a), outer, axis_len, inner, &mut out);
        self.finite_check(&out, "softmax")?;
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(out, a.shape().to_vec(), ng, Op::Softmax { a: a.id(), outer, axis_len, inner }))
    }

    pub fn log_softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_tensor(a, "log_softmax")?;
        let (outer, axis_len, inner) = self.axis_split(a, axis, "log_softmax")?;
        let mut out = vec![T::zero(); a.numel()];
        kernels::log_softmax_axis(self.value(a), outer, axis_len, inner, &mut out);
        self.finite_check(&out, "log_softmax")?;
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(out, a.shape().to_vec(), ng, Op::LogSoftmax { a: a.id(), outer, axis_len, inner }))
    }

    /// Normalize over the last dim, then scale/shift by `gain`/`bias`
    /// (both shaped [last_dim]).
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: T) -> Result<Tensor> {
        self.check_tensor(x, "layer_norm")?;
        self.check_tensor(gain, "layer_norm")?;
        self.check_tensor(bias, "layer_norm")?;
        let shape = x.shape();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gain/bias must be [{d}], got {:?}/{:?}", gain.shape(), bias.shape()),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / T::from_usize(d);
        for (vi, chunk) in xv.chunks(d).enumerate() {
            let mut mean = T::zero();
            for &v in chunk {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in chunk {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            let dst = &mut out[vi * d..(vi + 1) * d];
            for i in 0..d {
                dst[i] = (chunk[i] - mean) * rstd * gv[i] + bv[i];
            }
        }
        self.finite_check(&out, "layer_norm")?;
        let ng = self.node(x.id()).needs_grad
            || self.node(gain.id()).needs_grad
            || self.node(bias.id()).needs_grad;
        Ok(self.push(
            out,
            shape.to_vec(),
            ng,
            Op::LayerNorm { x: x.id(), gain: gain.id(), bias: bias.id(), eps },
        ))
    }

    /// Same data, new shape. The buffer is shared, not copied.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_tensor(a, "reshape")?;
        if numel_of(&shape) != a.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        let data = self.node(a.id()).data.clone();
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push_shared(data, shape, ng, Op::Reshape { a: a.id() }))
    }

    pub fn permute(&mut self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.check_tensor(a, "permute")?;
        let shape = a.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArg {
                op: "permute",
                detail: format!("invalid permutation {perm:?} for rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(a), shape, perm);
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(data, out_shape, ng, Op::Permute { a: a.id(), perm: perm.to_vec() }))
    }

    /// Swap the trailing two dims.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let rank = a.rank();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat", detail: "no operands".into() });
        }
        for p in parts {
            self.check_tensor(p, "concat")?;
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let out_row = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let extent = p.shape()[axis];
            let pv = self.value(p);
            for o in 0..outer {
                let src = &pv[o * extent * inner..(o + 1) * extent * inner];
                let dst = &mut out[o * out_row + offset * inner..o * out_row + (offset + extent) * inner];
                dst.copy_from_slice(src);
            }
            offset += extent;
        }
        let ng = parts.iter().any(|p| self.node(p.id()).needs_grad);
        Ok(self.push(
            out,
            out_shape,
            ng,
            Op::Concat { parts: parts.iter().map(|p| p.id()).collect(), axis },
        ))
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_tensor(a, "slice")?;
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, rank: shape.len() });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::InvalidArg {
                op: "slice",
                detail: format!("range {start}..{} out of extent {}", start + len, shape[axis]),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &av[(o * extent + start) * inner..(o * extent + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(out, out_shape, ng, Op::Slice { a: a.id(), axis, start }))
    }

    /// Materialize `a` expanded to `shape`; `a` must have equal rank with
    /// extent-1 dims wherever the shapes differ.
    pub fn broadcast_to(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_tensor(a, "broadcast_to")?;
        let sa = a.shape();
        if sa.len() != shape.len()
            || sa.iter().zip(&shape).any(|(&d, &o)| d != o && d != 1)
        {
            return Err(shape_err("broadcast_to", format!("{sa:?} -> {shape:?}")));
        }
        let map = BcastMap::new(&shape, sa);
        let av = self.value(a);
        let n = numel_of(&shape);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(av[map.src_index(i)]);
        }
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(out, shape, ng, Op::BroadcastTo { a: a.id() }))
    }

    pub fn reduce_sum(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_impl(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_impl(a, axis, true)
    }

    fn reduce_impl(&mut self, a: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let opname: &'static str = if mean { "reduce_mean" } else { "reduce_sum" };
        self.check_tensor(a, opname)?;
        let (data, out_shape) = match axis {
            None => {
                let mut acc = T::zero();
                for &v in self.value(a) {
                    acc += v;
                }
                if mean {
                    acc = acc / T::from_usize(a.numel().max(1));
                }
                (vec![acc], vec![1])
            }
            Some(ax) => {
                let (outer, extent, inner) = self.axis_split(a, ax, opname)?;
                let av = self.value(a);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let src = &av[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            dst[i] += src[i];
                        }
                    }
                }
                if mean {
                    let inv = T::one() / T::from_usize(extent.max(1));
                    for v in &mut out {
                        *v = *v * inv;
                    }
                }
                let mut shape = a.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                (out, shape)
            }
        };
        let ng = self.node(a.id()).needs_grad;
        let op = if mean {
            Op::ReduceMean { a: a.id(), axis }
        } else {
            Op::ReduceSum { a: a.id(), axis }
        };
        Ok(self.push(data, out_shape, ng, op))
    }

    /// Gather rows of `table` ([V, D]) by index: out[i] = table[ids[i]].
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.check_tensor(table, "embedding_lookup")?;
        let st = table.shape();
        if st.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table must be [V,D]: {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArg {
                op: "embedding_lookup",
                detail: format!("index {bad} out of vocabulary {v}"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.node(table.id()).needs_grad;
        Ok(self.push(
            out,
            vec![ids.len(), d],
            ng,
            Op::EmbeddingLookup { table: table.id(), ids: ids.to_vec() },
        ))
    }

    /// Per-row column pick from [N, C]: out[i] = a[i, ids[i]].
    pub fn select_columns(&mut self, a: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.check_tensor(a, "select_columns")?;
        let s = a.shape();
        if s.len() != 2 {
            return Err(shape_err("select_columns", format!("need [N,C]: {s:?}")));
        }
        let (nrows, c) = (s[0], s[1]);
        if ids.len() != nrows {
            return Err(shape_err("select_columns", format!("{} ids for {nrows} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(TensorError::InvalidArg {
                op: "select_columns",
                detail: format!("column {bad} out of range {c}"),
            });
        }
        let av = self.value(a);
        let out: Vec<T> = ids.iter().enumerate().map(|(r, &col)| av[r * c + col]).collect();
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(out, vec![nrows], ng, Op::SelectColumns { a: a.id(), ids: ids.to_vec() }))
    }

    /// Inverted dropout. `rate` = 0 records an identity op; the mask is
    /// drawn once at record time so replays are deterministic.
    pub fn dropout<R: Rng>(&mut self, a: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
        self.check_tensor(a, "dropout")?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<T> = if rate == 0.0 {
            vec![T::one(); a.numel()]
        } else {
            (0..a.numel())
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
                .collect()
        };
        let data: Vec<T> = self.value(a).iter().zip(&keep).map(|(&x, &m)| x * m).collect();
        let ng = self.node(a.id()).needs_grad;
        Ok(self.push(data, a.shape().to_vec(), ng, Op::Dropout { a: a.id(), keep }))
    }
}

pub(crate) fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = kernels::strides_of(shape);
    let mut out = vec![T::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    out
}

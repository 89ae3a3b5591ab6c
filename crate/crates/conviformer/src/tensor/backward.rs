//! Reverse pass: walk the tape backwards, applying each op's gradient rule.

use super::kernels::{self, BcastMap};
use super::ops::MatmulRec;
use super::{Element, Gradients, Op, Result, Tape, Tensor, TensorError};

impl<T: Element> Tape<T> {
    /// Backpropagate from a scalar. Every `requires_grad` leaf reachable
    /// from `loss` ends up with a populated gradient; unreachable nodes get
    /// none. Two runs over the same tape produce bitwise-identical buffers.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients<T>> {
        self.check_tensor(loss, "backward")?;
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar { numel: loss.numel() });
        }
        if !self.scalar_value(loss).is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.len()).map(|_| None).collect();
        grads[loss.id()] = Some(vec![T::one()]);

        for id in (0..=loss.id()).rev() {
            if !self.node(id).needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_rule(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients::new(self.tag, grads))
    }

    fn apply_rule(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.node(id).op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.accum_reduced(grads, *a, id, g, false);
                self.accum_reduced(grads, *b, id, g, false);
            }
            Op::Sub { a, b } => {
                self.accum_reduced(grads, *a, id, g, false);
                self.accum_reduced(grads, *b, id, g, true);
            }
            Op::Mul { a, b } => {
                self.accum_mulrule(grads, *a, *b, id, g, MulKind::Mul);
                self.accum_mulrule(grads, *b, *a, id, g, MulKind::Mul);
            }
            Op::Div { a, b } => {
                // out = a / b
                self.accum_mulrule(grads, *a, *b, id, g, MulKind::DivNum);
                if self.node(*b).needs_grad {
                    let out_shape = &self.node(id).shape;
                    let av = &self.node(*a).data;
                    let bv = &self.node(*b).data;
                    let contrib = eval_pair(av, &self.node(*a).shape, bv, &self.node(*b).shape, out_shape, g, |a, b, gi| {
                        -gi * a / (b * b)
                    });
                    self.accum_vec(grads, *b, contrib, out_shape);
                }
            }
            Op::Affine { a, mul, .. } => {
                if self.node(*a).needs_grad {
                    let contrib: Vec<T> = g.iter().map(|&gi| *mul * gi).collect();
                    self.add_into(grads, *a, &contrib);
                }
            }
            Op::Exp { a } => self.unary_input_rule(grads, *a, id, g, |_, y, gi| gi * y),
            Op::Log { a } => self.unary_input_rule(grads, *a, id, g, |x, _, gi| gi / x),
            Op::Sqrt { a } => self.unary_input_rule(grads, *a, id, g, |_, y, gi| {
                if y == T::zero() {
                    T::zero()
                } else {
                    gi * T::from_f64(0.5) / y
                }
            }),
            Op::Abs { a } => self.unary_input_rule(grads, *a, id, g, |x, _, gi| {
                if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            }),
            Op::Relu { a } => self.unary_input_rule(grads, *a, id, g, |x, _, gi| {
                if x > T::zero() {
                    gi
                } else {
                    T::zero()
                }
            }),
            Op::Sigmoid { a } => {
                self.unary_input_rule(grads, *a, id, g, |_, y, gi| gi * y * (T::one() - y))
            }
            Op::Gelu { a } => {
                self.unary_input_rule(grads, *a, id, g, |x, _, gi| gi * kernels::gelu_grad(x))
            }
            Op::PowScalar { a, p } => {
                let p = *p;
                self.unary_input_rule(grads, *a, id, g, move |x, _, gi| {
                    if x == T::zero() {
                        T::zero()
                    } else {
                        gi * p * x.powf(p - T::one())
                    }
                });
            }

            Op::Matmul(rec) => self.matmul_rule(grads, rec, g),
            Op::Conv2d { x, w, geom } => self.conv_rule(grads, *x, *w, geom, g),
            Op::MaxPool2d { x, argmax, .. } => {
                if self.node(*x).needs_grad {
                    let buf = self.grad_buf(grads, *x);
                    for (gi, &src) in g.iter().zip(argmax) {
                        buf[src] += *gi;
                    }
                }
            }

            Op::Softmax { a, outer, axis_len, inner } => {
                if self.node(*a).needs_grad {
                    let s = &self.node(id).data;
                    let mut dx = vec![T::zero(); s.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = T::zero();
                            for k in 0..*axis_len {
                                let idx = base + k * inner;
                                dot += g[idx] * s[idx];
                            }
                            for k in 0..*axis_len {
                                let idx = base + k * inner;
                                dx[idx] = s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    self.add_into(grads, *a, &dx);
                }
            }
            Op::LogSoftmax { a, outer, axis_len, inner } => {
                if self.node(*a).needs_grad {
                    let y = &self.node(id).data;
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis_len * inner + i;
                            let mut gsum = T::zero();
                            for k in 0..*axis_len {
                                gsum += g[base + k * inner];
                            }
                            for k in 0..*axis_len {
                                let idx = base + k * inner;
                                dx[idx] = g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                    self.add_into(grads, *a, &dx);
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => self.layer_norm_rule(grads, *x, *gain, *bias, *eps, g),

            Op::Reshape { a } => {
                if self.node(*a).needs_grad {
                    self.add_into(grads, *a, g);
                }
            }
            Op::Permute { a, perm } => {
                if self.node(*a).needs_grad {
                    let mut inv = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let back = super::ops::permute_data(g, &self.node(id).shape, &inv);
                    self.add_into(grads, *a, &back);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.node(id).shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let extent = self.node(p).shape[*axis];
                    if self.node(p).needs_grad {
                        let mut contrib = vec![T::zero(); outer * extent * inner];
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + extent) * inner];
                            contrib[o * extent * inner..(o + 1) * extent * inner].copy_from_slice(src);
                        }
                        self.add_into(grads, p, &contrib);
                    }
                    offset += extent;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.node(*a).needs_grad {
                    let in_shape = &self.node(*a).shape;
                    let out_shape = &self.node(id).shape;
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let extent = in_shape[*axis];
                    let len = out_shape[*axis];
                    let buf = self.grad_buf(grads, *a);
                    for o in 0..outer {
                        let dst = &mut buf[(o * extent + start) * inner..(o * extent + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::BroadcastTo { a } => self.accum_reduced(grads, *a, id, g, false),

            Op::ReduceSum { a, axis } => self.reduce_rule(grads, *a, g, *axis, false),
            Op::ReduceMean { a, axis } => self.reduce_rule(grads, *a, g, *axis, true),

            Op::EmbeddingLookup { table, ids } => {
                if self.node(*table).needs_grad {
                    let d = self.node(*table).shape[1];
                    let buf = self.grad_buf(grads, *table);
                    for (row, &i) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut buf[i * d..(i + 1) * d];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += *sv;
                        }
                    }
                }
            }
            Op::SelectColumns { a, ids } => {
                if self.node(*a).needs_grad {
                    let c = self.node(*a).shape[1];
                    let buf = self.grad_buf(grads, *a);
                    for (row, &col) in ids.iter().enumerate() {
                        buf[row * c + col] += g[row];
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if self.node(*a).needs_grad {
                    let contrib: Vec<T> = g.iter().zip(keep).map(|(&gi, &m)| gi * m).collect();
                    self.add_into(grads, *a, &contrib);
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: usize) -> &'a mut [T] {
        let numel = self.node(id).data.len();
        grads[id].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], id: usize, contrib: &[T]) {
        let buf = self.grad_buf(grads, id);
        for (d, s) in buf.iter_mut().zip(contrib) {
            *d += *s;
        }
    }

    fn accum_vec(&self, grads: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>, from_shape: &[usize]) {
        let to_shape = &self.node(id).shape;
        if from_shape == &to_shape[..] {
            self.add_into(grads, id, &contrib);
        } else {
            let reduced = kernels::reduce_to_shape(&contrib, from_shape, to_shape);
            self.add_into(grads, id, &reduced);
        }
    }

    /// dIn += (possibly sum-reduced) g, negated for the rhs of `sub`.
    fn accum_reduced(&self, grads: &mut [Option<Vec<T>>], target: usize, out_id: usize, g: &[T], negate: bool) {
        if !self.node(target).needs_grad {
            return;
        }
        let out_shape = &self.node(out_id).shape;
        let to_shape = &self.node(target).shape;
        let reduced = kernels::reduce_to_shape(g, out_shape, to_shape);
        if negate {
            let neg: Vec<T> = reduced.iter().map(|&v| -v).collect();
            self.add_into(grads, target, &neg);
        } else {
            self.add_into(grads, target, &reduced);
        }
    }

    /// dTarget += reduce(g ⊙ f(other)) for the product-like rules.
    fn accum_mulrule(&self, grads: &mut [Option<Vec<T>>], target: usize, other: usize, out_id: usize, g: &[T], kind: MulKind) {
        if !self.node(target).needs_grad {
            return;
        }
        let out_shape = &self.node(out_id).shape;
        let ov = &self.node(other).data;
        let os = &self.node(other).shape;
        let contrib = eval_single(ov, os, out_shape, g, |o, gi| match kind {
            MulKind::Mul => gi * o,
            MulKind::DivNum => gi / o,
        });
        self.accum_vec(grads, target, contrib, out_shape);
    }

    fn unary_input_rule(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: usize,
        out_id: usize,
        g: &[T],
        rule: impl Fn(T, T, T) -> T,
    ) {
        if !self.node(a).needs_grad {
            return;
        }
        let xv = &self.node(a).data;
        let yv = &self.node(out_id).data;
        let contrib: Vec<T> = xv
            .iter()
            .zip(yv.iter())
            .zip(g)
            .map(|((&x, &y), &gi)| rule(x, y, gi))
            .collect();
        self.add_into(grads, a, &contrib);
    }

    fn reduce_rule(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: usize,
        g: &[T],
        axis: Option<usize>,
        mean: bool,
    ) {
        if !self.node(a).needs_grad {
            return;
        }
        let in_shape = &self.node(a).shape;
        match axis {
            None => {
                let n = self.node(a).data.len();
                let scale = if mean { T::one() / T::from_usize(n.max(1)) } else { T::one() };
                let v = g[0] * scale;
                let buf = self.grad_buf(grads, a);
                for d in buf.iter_mut() {
                    *d += v;
                }
            }
            Some(ax) => {
                let outer: usize = in_shape[..ax].iter().product();
                let extent = in_shape[ax];
                let inner: usize = in_shape[ax + 1..].iter().product();
                let scale = if mean { T::one() / T::from_usize(extent.max(1)) } else { T::one() };
                let buf = self.grad_buf(grads, a);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let dst = &mut buf[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for i in 0..inner {
                            dst[i] += src[i] * scale;
                        }
                    }
                }
            }
        }
    }

    fn matmul_rule(&self, grads: &mut [Option<Vec<T>>], rec: &MatmulRec, g: &[T]) {
        let MatmulRec { a, b, ta, tb, batch, m, k, n, shared_rhs } = *rec;
        let av = &self.node(a).data;
        let bv = &self.node(b).data;
        let (sa, sb) = (m * k, k * n);
        let so = m * n;

        if self.node(a).needs_grad {
            let mut da = vec![T::zero(); av.len()];
            for s in 0..batch {
                let gs = &g[s * so..(s + 1) * so];
                let bsl = if shared_rhs { &bv[..] } else { &bv[s * sb..(s + 1) * sb] };
                let dst = &mut da[s * sa..(s + 1) * sa];
                match (ta, tb) {
                    (false, false) => kernels::matmul2(gs, bsl, m, n, k, false, true, dst),
                    (false, true) => kernels::matmul2(gs, bsl, m, n, k, false, false, dst),
                    (true, false) => kernels::matmul2(bsl, gs, k, n, m, false, true, dst),
                    (true, true) => kernels::matmul2(bsl, gs, k, n, m, true, true, dst),
                }
            }
            self.add_into(grads, a, &da);
        }

        if self.node(b).needs_grad {
            let mut db = vec![T::zero(); bv.len()];
            let mut scratch = if shared_rhs && batch > 1 { vec![T::zero(); sb] } else { Vec::new() };
            for s in 0..batch {
                let gs = &g[s * so..(s + 1) * so];
                let asl = &av[s * sa..(s + 1) * sa];
                let dst: &mut [T] = if shared_rhs && batch > 1 {
                    &mut scratch
                } else if shared_rhs {
                    &mut db
                } else {
                    &mut db[s * sb..(s + 1) * sb]
                };
                match (ta, tb) {
                    (false, false) => kernels::matmul2(asl, gs, k, m, n, true, false, dst),
                    (true, false) => kernels::matmul2(asl, gs, k, m, n, false, false, dst),
                    (false, true) => kernels::matmul2(gs, asl, n, m, k, true, false, dst),
                    (true, true) => kernels::matmul2(gs, asl, n, m, k, true, true, dst),
                }
                if shared_rhs && batch > 1 {
                    for (d, s) in db.iter_mut().zip(&scratch) {
                        *d += *s;
                    }
                }
            }
            self.add_into(grads, b, &db);
        }
    }

    fn conv_rule(&self, grads: &mut [Option<Vec<T>>], x: usize, w: usize, geom: &kernels::ConvGeom, g: &[T]) {
        let rows = geom.batch * geom.h_out * geom.w_out;
        let kdim = geom.c_in * geom.kh * geom.kw;
        let g_rows = kernels::nchw_to_rows(g, geom);

        if self.node(w).needs_grad {
            let cols = kernels::im2col(&self.node(x).data, geom);
            let mut dw = vec![T::zero(); geom.c_out * kdim];
            kernels::matmul2(&g_rows, &cols, geom.c_out, rows, kdim, true, false, &mut dw);
            self.add_into(grads, w, &dw);
        }
        if self.node(x).needs_grad {
            let mut d_cols = vec![T::zero(); rows * kdim];
            kernels::matmul2(&g_rows, &self.node(w).data, rows, geom.c_out, kdim, false, false, &mut d_cols);
            let dx = kernels::col2im(&d_cols, geom);
            self.add_into(grads, x, &dx);
        }
    }

    fn layer_norm_rule(&self, grads: &mut [Option<Vec<T>>], x: usize, gain: usize, bias: usize, eps: T, g: &[T]) {
        let xv = &self.node(x).data;
        let gv = &self.node(gain).data;
        let d = self.node(gain).shape[0];
        let inv_d = T::one() / T::from_usize(d);
        let vecs = xv.len() / d;

        let need_x = self.node(x).needs_grad;
        let need_gain = self.node(gain).needs_grad;
        let need_bias = self.node(bias).needs_grad;

        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut dgain = if need_gain { vec![T::zero(); d] } else { Vec::new() };
        let mut dbias = if need_bias { vec![T::zero(); d] } else { Vec::new() };

        for v in 0..vecs {
            let xs = &xv[v * d..(v + 1) * d];
            let gs = &g[v * d..(v + 1) * d];
            let mut mean = T::zero();
            for &val in xs {
                mean += val;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &val in xs {
                let c = val - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();

            if need_gain || need_bias {
                for i in 0..d {
                    let xhat = (xs[i] - mean) * rstd;
                    if need_gain {
                        dgain[i] += gs[i] * xhat;
                    }
                    if need_bias {
                        dbias[i] += gs[i];
                    }
                }
            }
            if need_x {
                let mut mean_gg = T::zero();
                let mut mean_gg_xhat = T::zero();
                for i in 0..d {
                    let gg = gs[i] * gv[i];
                    let xhat = (xs[i] - mean) * rstd;
                    mean_gg += gg;
                    mean_gg_xhat += gg * xhat;
                }
                mean_gg = mean_gg * inv_d;
                mean_gg_xhat = mean_gg_xhat * inv_d;
                let out = &mut dx[v * d..(v + 1) * d];
                for i in 0..d {
                    let gg = gs[i] * gv[i];
                    let xhat = (xs[i] - mean) * rstd;
                    out[i] = rstd * (gg - mean_gg - xhat * mean_gg_xhat);
                }
            }
        }

        if need_x {
            self.add_into(grads, x, &dx);
        }
        if need_gain {
            self.add_into(grads, gain, &dgain);
        }
        if need_bias {
            self.add_into(grads, bias, &dbias);
        }
    }
}

enum MulKind {
    Mul,
    DivNum,
}

/// Evaluate `rule(other_value, g)` elementwise over the broadcast output.
fn eval_single<T: Element>(
    ov: &[T],
    os: &[usize],
    out_shape: &[usize],
    g: &[T],
    rule: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = g.len();
    let mut out = Vec::with_capacity(n);
    if ov.len() == n && os == out_shape {
        for i in 0..n {
            out.push(rule(ov[i], g[i]));
        }
    } else if ov.len() == 1 {
        let o = ov[0];
        for &gi in g {
            out.push(rule(o, gi));
        }
    } else {
        let map = BcastMap::new(out_shape, os);
        for (i, &gi) in g.iter().enumerate() {
            out.push(rule(ov[map.src_index(i)], gi));
        }
    }
    out
}

/// Same, for rules needing both operand values.
fn eval_pair<T: Element>(
    av: &[T],
    sa: &[usize],
    bv: &[T],
    sb: &[usize],
    out_shape: &[usize],
    g: &[T],
    rule: impl Fn(T, T, T) -> T,
) -> Vec<T> {
    let n = g.len();
    let mut out = Vec::with_capacity(n);
    let scalar_a = av.len() == 1;
    let scalar_b = bv.len() == 1;
    if av.len() == n && bv.len() == n && sa == out_shape && sb == out_shape {
        for i in 0..n {
            out.push(rule(av[i], bv[i], g[i]));
        }
    } else {
        let ma = if scalar_a { None } else { Some(BcastMap::new(out_shape, sa)) };
        let mb = if scalar_b { None } else { Some(BcastMap::new(out_shape, sb)) };
        for (i, &gi) in g.iter().enumerate() {
            let a = match &ma {
                None => av[0],
                Some(m) => av[m.src_index(i)],
            };
            let b = match &mb {
                None => bv[0],
                Some(m) => bv[m.src_index(i)],
            };
            out.push(rule(a, b, gi));
        }
    }
    out
}

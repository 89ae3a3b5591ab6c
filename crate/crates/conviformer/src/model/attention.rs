//! Gated positional self-attention and plain self-attention.
//!
//! GPSA blends two attention distributions per head: a content softmax
//! (QK^T, scaled) and a positional softmax over scores `alpha_h * (v_pos_h
//! . r_ij)`, where `r_ij = (dx, dy, dx^2 + dy^2)` from patch-grid
//! coordinates. A learned per-head gate `sigma(lambda_h)` picks the mix:
//!
//!   A_h = (1 - sigma(lambda_h)) * softmax(QK^T / sqrt(d_h))
//!       +      sigma(lambda_h)  * softmax(alpha_h * v_pos_h . r)
//!
//! Convolutional initialization points each head's positional peak at a
//! fixed offset, so freshly initialized layers act like a convolution.

use crate::rng::StreamRng;
use crate::tensor::{Result as TResult, Tape, Tensor};

use super::blocks::Linear;
use super::params::{BoundParams, Init, ParamId, ParamStore};
use super::PatchGrid;
use crate::tensor::Element;

/// Relative-coordinate features for a token grid: `[t_p, t_p, 3]` with
/// entries `(dx, dy, dx^2 + dy^2)` in patch units.
pub fn relative_coords<T: Element>(tape: &mut Tape<T>, grid: &PatchGrid) -> TResult<Tensor> {
    let t = grid.t_p;
    let gw = grid.grid_w;
    let mut data = Vec::with_capacity(t * t * 3);
    for i in 0..t {
        let (yi, xi) = ((i / gw) as f64, (i % gw) as f64);
        for j in 0..t {
            let (yj, xj) = ((j / gw) as f64, (j % gw) as f64);
            let dx = xj - xi;
            let dy = yj - yi;
            data.push(T::from_f64(dx));
            data.push(T::from_f64(dy));
            data.push(T::from_f64(dx * dx + dy * dy));
        }
    }
    tape.constant(data, vec![t, t, 3])
}

/// Head offsets on a `ceil(sqrt(n_heads))` grid centered at zero, and the
/// matching positional vectors `(2*dx, 2*dy, -1)`. With a positive locality
/// strength these concentrate each head's positional attention at its
/// offset.
pub fn conv_init_v_pos(n_heads: usize) -> Vec<f64> {
    let m = (n_heads as f64).sqrt().ceil() as usize;
    let center = (m as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n_heads * 3);
    for h in 0..n_heads {
        let dy = (h / m) as f64 - center;
        let dx = (h % m) as f64 - center;
        out.push(2.0 * dx);
        out.push(2.0 * dy);
        out.push(-1.0);
    }
    out
}

pub fn head_offset(n_heads: usize, head: usize) -> (f64, f64) {
    let m = (n_heads as f64).sqrt().ceil() as usize;
    let center = (m as f64 - 1.0) / 2.0;
    ((head % m) as f64 - center, (head / m) as f64 - center)
}

/// Shared q/k/v/o projections.
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttnProj {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut StreamRng) -> Self {
        AttnProj {
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, rng),
        }
    }
}

/// Split [B, T, D] into heads: [B, H, T, D/H].
fn split_heads<T: Element>(tape: &mut Tape<T>, x: &Tensor, n_heads: usize) -> TResult<Tensor> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = tape.reshape(x, vec![b, t, n_heads, d / n_heads])?;
    tape.permute(&r, &[0, 2, 1, 3])
}

/// Inverse of `split_heads`.
fn merge_heads<T: Element>(tape: &mut Tape<T>, x: &Tensor) -> TResult<Tensor> {
    let (b, h, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(&p, vec![b, t, h * dh])
}

/// Content attention rows: softmax(QK^T / sqrt(d_h)), shape [B, H, T, T].
fn content_attention<T: Element>(
    tape: &mut Tape<T>,
    proj: &AttnProj,
    bound: &BoundParams,
    x: &Tensor,
    n_heads: usize,
) -> TResult<Tensor> {
    let q = proj.wq.apply(tape, bound, x)?;
    let k = proj.wk.apply(tape, bound, x)?;
    let qh = split_heads(tape, &q, n_heads)?;
    let kh = split_heads(tape, &k, n_heads)?;
    let dh = qh.shape()[3];
    let scores = tape.matmul_t(&qh, &kh, false, true)?;
    let scaled = tape.affine(&scores, T::from_f64(1.0 / (dh as f64).sqrt()), T::zero())?;
    tape.softmax(&scaled, 3)
}

fn apply_values<T: Element>(
    tape: &mut Tape<T>,
    proj: &AttnProj,
    bound: &BoundParams,
    x: &Tensor,
    attn: &Tensor,
    n_heads: usize,
    dropout: f64,
    rng: &mut StreamRng,
) -> TResult<Tensor> {
    let v = proj.wv.apply(tape, bound, x)?;
    let vh = split_heads(tape, &v, n_heads)?;
    let ctx = tape.matmul(attn, &vh)?;
    let merged = merge_heads(tape, &ctx)?;
    let out = proj.wo.apply(tape, bound, &merged)?;
    if dropout > 0.0 {
        tape.dropout(&out, dropout, rng)
    } else {
        Ok(out)
    }
}

pub struct GpsaLayer {
    pub proj: AttnProj,
    pub v_pos: ParamId,
    pub lambda: ParamId,
    pub alpha: ParamId,
    pub n_heads: usize,
}

impl GpsaLayer {
    /// Gate lambda and locality strength alpha start at 1 (positional side
    /// favored early); v_pos gets the convolutional offsets.
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, n_heads: usize, rng: &mut StreamRng) -> Self {
        let proj = AttnProj::new(store, prefix, d, rng);
        let v_pos = store.add(
            &format!("{prefix}.v_pos"),
            vec![n_heads, 3],
            Init::Data(conv_init_v_pos(n_heads)),
            rng,
        );
        let lambda = store.add(&format!("{prefix}.lambda"), vec![n_heads], Init::Const(1.0), rng);
        let alpha = store.add(&format!("{prefix}.alpha"), vec![n_heads], Init::Const(1.0), rng);
        GpsaLayer { proj, v_pos, lambda, alpha, n_heads }
    }

    /// Positional attention rows: softmax over `alpha_h * (v_pos_h . r_ij)`,
    /// shape [H, T, T]. Independent of token content.
    pub fn positional_attention<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        rel: &Tensor,
    ) -> TResult<Tensor> {
        let t = rel.shape()[0];
        let flat = tape.reshape(rel, vec![t * t, 3])?;
        let scores = tape.matmul_t(&flat, bound.get(self.v_pos), false, true)?; // [T*T, H]
        let per_head = tape.permute(&scores, &[1, 0])?;
        let shaped = tape.reshape(&per_head, vec![self.n_heads, t, t])?;
        let alpha = tape.reshape(bound.get(self.alpha), vec![self.n_heads, 1, 1])?;
        let scaled = tape.mul(&shaped, &alpha)?;
        tape.softmax(&scaled, 2)
    }

    /// Blended attention rows [B, H, T, T]. Each row is a convex combination
    /// of two softmax rows, so it sums to 1.
    pub fn attention<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        rel: &Tensor,
    ) -> TResult<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let content = content_attention(tape, &self.proj, bound, x, self.n_heads)?;
        let pos = self.positional_attention(tape, bound, rel)?;
        let pos_b = tape.reshape(&pos, vec![1, self.n_heads, t, t])?;
        let pos_full = tape.broadcast_to(&pos_b, vec![b, self.n_heads, t, t])?;

        let gate = tape.sigmoid(bound.get(self.lambda))?;
        let gate = tape.reshape(&gate, vec![1, self.n_heads, 1, 1])?;
        let one = tape.scalar(T::one());
        let inv_gate = tape.sub(&one, &gate)?;

        let content_part = tape.mul(&content, &inv_gate)?;
        let pos_part = tape.mul(&pos_full, &gate)?;
        tape.add(&content_part, &pos_part)
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        rel: &Tensor,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> TResult<Tensor> {
        let attn = self.attention(tape, bound, x, rel)?;
        apply_values(tape, &self.proj, bound, x, &attn, self.n_heads, dropout, rng)
    }
}

pub struct SaLayer {
    pub proj: AttnProj,
    pub n_heads: usize,
}

impl SaLayer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, n_heads: usize, rng: &mut StreamRng) -> Self {
        SaLayer {
            proj: AttnProj::new(store, prefix, d, rng),
            n_heads,
        }
    }

    pub fn attention<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
    ) -> TResult<Tensor> {
        content_attention(tape, &self.proj, bound, x, self.n_heads)
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> TResult<Tensor> {
        let attn = self.attention(tape, bound, x)?;
        apply_values(tape, &self.proj, bound, x, &attn, self.n_heads, dropout, rng)
    }
}

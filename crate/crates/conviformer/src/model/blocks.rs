//! Shared layers: linear projections, layer norm, the GELU feed-forward,
//! and the convolutional frontend.

use crate::rng::StreamRng;
use crate::tensor::{Element, Result as TResult, Tape, Tensor};

use super::params::{BoundParams, Init, ParamId, ParamStore};
use super::ModelError;

const LN_EPS: f64 = 1e-5;
const PROJ_STD: f64 = 0.02;

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        let w = store.add(&format!("{prefix}.weight"), vec![d_in, d_out], Init::Normal { std: PROJ_STD }, rng);
        let b = store.add(&format!("{prefix}.bias"), vec![d_out], Init::Zeros, rng);
        Linear { w, b, d_out }
    }

    /// x [.., d_in] -> [.., d_out].
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: &Tensor) -> TResult<Tensor> {
        let y = tape.matmul(x, bound.get(self.w))?;
        let mut bshape = vec![1; y.rank() - 1];
        bshape.push(self.d_out);
        let b = tape.reshape(bound.get(self.b), bshape)?;
        tape.add(&y, &b)
    }
}

pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormP {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut StreamRng) -> Self {
        LayerNormP {
            gain: store.add(&format!("{prefix}.gain"), vec![d], Init::Const(1.0), rng),
            bias: store.add(&format!("{prefix}.bias"), vec![d], Init::Zeros, rng),
        }
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: &Tensor) -> TResult<Tensor> {
        tape.layer_norm(x, bound.get(self.gain), bound.get(self.bias), T::from_f64(LN_EPS))
    }
}

/// Two-layer feed-forward with GELU.
pub struct Ffn {
    pub w1: Linear,
    pub w2: Linear,
}

impl Ffn {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, expansion: usize, rng: &mut StreamRng) -> Self {
        Ffn {
            w1: Linear::new(store, &format!("{prefix}.fc1"), d, d * expansion, rng),
            w2: Linear::new(store, &format!("{prefix}.fc2"), d * expansion, d, rng),
        }
    }

    pub fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> TResult<Tensor> {
        let h = self.w1.apply(tape, bound, x)?;
        let a = tape.gelu(&h)?;
        let out = self.w2.apply(tape, bound, &a)?;
        if dropout > 0.0 {
            tape.dropout(&out, dropout, rng)
        } else {
            Ok(out)
        }
    }
}

/// One 3x3 conv parameter set.
pub struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
    pub c_out: usize,
}

impl ConvP {
    fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut StreamRng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        ConvP {
            w: store.add(&format!("{prefix}.weight"), vec![c_out, c_in, k, k], Init::Normal { std }, rng),
            b: store.add(&format!("{prefix}.bias"), vec![c_out], Init::Zeros, rng),
            c_out,
        }
    }

    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        stride: usize,
        padding: usize,
    ) -> TResult<Tensor> {
        let y = tape.conv2d(x, bound.get(self.w), stride, padding)?;
        let b = tape.reshape(bound.get(self.b), vec![1, self.c_out, 1, 1])?;
        tape.add(&y, &b)
    }
}

/// Channelwise layer norm on an NCHW map (normalizes across channels at
/// each spatial position).
struct ChannelNorm {
    ln: LayerNormP,
}

impl ChannelNorm {
    fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut StreamRng) -> Self {
        ChannelNorm { ln: LayerNormP::new(store, prefix, c, rng) }
    }

    fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: &Tensor) -> TResult<Tensor> {
        let nhwc = tape.permute(x, &[0, 2, 3, 1])?;
        let normed = self.ln.apply(tape, bound, &nhwc)?;
        tape.permute(&normed, &[0, 3, 1, 2])
    }
}

struct FrontendBlock {
    conv: ConvP,
    norm: ChannelNorm,
}

/// Convolutional frontend: `log2(d_s)` blocks of [3x3 conv stride 2,
/// channel norm, GELU], then a stride-1 3x3 conv to `conv_channels`. Emits
/// a `floor(h/d_s) x floor(w/d_s) x conv_channels` map.
///
/// Per-block padding adapts to the extent parity so each stride-2 conv
/// halves with floor exactly; the reduction therefore requires `d_s` to be
/// a power of two (every resolution of interest: 2 at 448/512/600 on a
/// 224 base, powers of two at the toy scales).
pub struct Frontend {
    blocks: Vec<FrontendBlock>,
    final_conv: ConvP,
    pub d_s: usize,
}

impl Frontend {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_s: usize,
        conv_channels: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        if !d_s.is_power_of_two() {
            return Err(ModelError::Config {
                detail: format!("frontend downsample factor {d_s} is not a power of two"),
            });
        }
        let n_blocks = d_s.trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let c_in = if i == 0 { 3 } else { conv_channels };
            blocks.push(FrontendBlock {
                conv: ConvP::new(store, &format!("{prefix}.block{i}.conv"), c_in, conv_channels, 3, rng),
                norm: ChannelNorm::new(store, &format!("{prefix}.block{i}.norm"), conv_channels, rng),
            });
        }
        let final_in = if n_blocks == 0 { 3 } else { conv_channels };
        let final_conv = ConvP::new(store, &format!("{prefix}.final"), final_in, conv_channels, 3, rng);
        Ok(Frontend { blocks, final_conv, d_s })
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: &Tensor) -> TResult<Tensor> {
        let mut cur = x.clone();
        for block in &self.blocks {
            // even extent: pad 1 keeps out = in/2; odd: pad 0 gives floor(in/2)
            let h = cur.shape()[2];
            let pad = if h % 2 == 0 { 1 } else { 0 };
            let c = block.conv.apply(tape, bound, &cur, 2, pad)?;
            let n = block.norm.apply(tape, bound, &c)?;
            cur = tape.gelu(&n)?;
        }
        self.final_conv.apply(tape, bound, &cur, 1, 1)
    }
}

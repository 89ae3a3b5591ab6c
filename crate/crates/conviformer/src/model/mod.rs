//! The Conviformer network: convolutional frontend, patch embedding, GPSA
//! stack, class token, self-attention stack, and the classification /
//! embedding heads.

use std::fmt;

use crate::rng::{Stream, StreamRng};
use crate::tensor::{Element, Result as TResult, Tape, Tensor, TensorError};

pub mod attention;
pub mod blocks;
pub mod config;
pub mod params;

pub use attention::{conv_init_v_pos, head_offset, relative_coords, GpsaLayer, SaLayer};
pub use blocks::{Ffn, Frontend, LayerNormP, Linear};
pub use config::{downsample_factor, patch_count, ConviformerConfig, PatchGrid};
pub use params::{BoundParams, Init, Param, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config { detail: String },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config { detail } => write!(f, "model config: {detail}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

pub type ModelResult<V> = std::result::Result<V, ModelError>;

/// One-hidden-layer GELU MLP (the genus/family classification heads).
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, d_out, rng),
        }
    }

    fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: &Tensor) -> TResult<Tensor> {
        let h = self.fc1.apply(tape, bound, x)?;
        let a = tape.gelu(&h)?;
        self.fc2.apply(tape, bound, &a)
    }
}

struct GpsaBlock {
    norm1: LayerNormP,
    attn: GpsaLayer,
    norm2: LayerNormP,
    ffn: Ffn,
}

struct SaBlock {
    norm1: LayerNormP,
    attn: SaLayer,
    norm2: LayerNormP,
    ffn: Ffn,
}

struct PatchEmbed {
    w: ParamId,
    b: ParamId,
    patch_size: usize,
    d_emb: usize,
}

impl PatchEmbed {
    fn new<T: Element>(store: &mut ParamStore<T>, c_in: usize, patch_size: usize, d_emb: usize, rng: &mut StreamRng) -> Self {
        PatchEmbed {
            w: store.add(
                "patch_embed.weight",
                vec![d_emb, c_in, patch_size, patch_size],
                Init::Normal { std: 0.02 },
                rng,
            ),
            b: store.add("patch_embed.bias", vec![d_emb], Init::Zeros, rng),
            patch_size,
            d_emb,
        }
    }

    /// [B, C, h', w'] -> [B, t_p, d_emb] over non-overlapping windows.
    fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, z: &Tensor) -> TResult<Tensor> {
        let y = tape.conv2d(z, bound.get(self.w), self.patch_size, 0)?;
        let (b, d, gh, gw) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
        let flat = tape.reshape(&y, vec![b, d, gh * gw])?;
        let tokens = tape.permute(&flat, &[0, 2, 1])?;
        let bias = tape.reshape(bound.get(self.b), vec![1, 1, self.d_emb])?;
        tape.add(&tokens, &bias)
    }
}

/// Classification and embedding head outputs for one batch.
pub struct HeadOutputs {
    pub logits_tax: Tensor,
    pub logits_gen: Tensor,
    pub logits_fam: Tensor,
    pub emb_tax: Tensor,
    pub emb_gen: Tensor,
    pub emb_fam: Tensor,
}

pub struct Heads {
    tax: Linear,
    gen: Mlp,
    fam: Mlp,
    emb_tax: Linear,
    emb_gen: Linear,
    emb_fam: Linear,
}

pub struct Conviformer<T: Element> {
    pub cfg: ConviformerConfig,
    pub store: ParamStore<T>,
    /// Input side length the frontend was sized for.
    pub input_res: usize,
    frontend: Option<Frontend>,
    patch_embed: PatchEmbed,
    cls_token: ParamId,
    gpsa_blocks: Vec<GpsaBlock>,
    sa_blocks: Vec<SaBlock>,
    final_norm: LayerNormP,
    heads: Heads,
}

impl<T: Element> Conviformer<T> {
    /// Build a model for inputs of side `input_res`. Parameter registration
    /// order (= init stream consumption order = checkpoint order): frontend,
    /// patch embed, class token, GPSA blocks, SA blocks, final norm, heads.
    pub fn new(cfg: ConviformerConfig, input_res: usize, seed: u64) -> ModelResult<Self> {
        cfg.validate()?;
        let grid = PatchGrid::for_mode(input_res, input_res, &cfg)?;
        let mut rng = StreamRng::new(seed, Stream::ParamInit);
        let mut store: ParamStore<T> = ParamStore::new();

        let frontend = if cfg.use_frontend {
            Some(Frontend::new(&mut store, "frontend", grid.d_s, cfg.conv_channels, &mut rng)?)
        } else {
            None
        };
        let embed_in = if cfg.use_frontend { cfg.conv_channels } else { 3 };
        let patch_embed = PatchEmbed::new(&mut store, embed_in, cfg.patch_size, cfg.d_emb, &mut rng);
        let cls_token = store.add("cls_token", vec![cfg.d_emb], Init::Zeros, &mut rng);

        let mut gpsa_blocks = Vec::with_capacity(cfg.n_gpsa_layers);
        for i in 0..cfg.n_gpsa_layers {
            let p = format!("gpsa.{i}");
            gpsa_blocks.push(GpsaBlock {
                norm1: LayerNormP::new(&mut store, &format!("{p}.norm1"), cfg.d_emb, &mut rng),
                attn: GpsaLayer::new(&mut store, &p, cfg.d_emb, cfg.n_heads, &mut rng),
                norm2: LayerNormP::new(&mut store, &format!("{p}.norm2"), cfg.d_emb, &mut rng),
                ffn: Ffn::new(&mut store, &format!("{p}.ffn"), cfg.d_emb, cfg.ffn_expansion, &mut rng),
            });
        }
        let mut sa_blocks = Vec::with_capacity(cfg.n_sa_layers);
        for i in 0..cfg.n_sa_layers {
            let p = format!("sa.{i}");
            sa_blocks.push(SaBlock {
                norm1: LayerNormP::new(&mut store, &format!("{p}.norm1"), cfg.d_emb, &mut rng),
                attn: SaLayer::new(&mut store, &p, cfg.d_emb, cfg.n_heads, &mut rng),
                norm2: LayerNormP::new(&mut store, &format!("{p}.norm2"), cfg.d_emb, &mut rng),
                ffn: Ffn::new(&mut store, &format!("{p}.ffn"), cfg.d_emb, cfg.ffn_expansion, &mut rng),
            });
        }
        let final_norm = LayerNormP::new(&mut store, "norm", cfg.d_emb, &mut rng);
        let heads = Heads {
            tax: Linear::new(&mut store, "head.tax", cfg.d_emb, cfg.n_taxa, &mut rng),
            gen: Mlp::new(&mut store, "head.gen", cfg.d_emb, cfg.head_hidden, cfg.n_genus, &mut rng),
            fam: Mlp::new(&mut store, "head.fam", cfg.d_emb, cfg.head_hidden, cfg.n_family, &mut rng),
            emb_tax: Linear::new(&mut store, "emb.tax", cfg.d_emb, cfg.emb_dim_taxa, &mut rng),
            emb_gen: Linear::new(&mut store, "emb.gen", cfg.d_emb, cfg.emb_dim_genus, &mut rng),
            emb_fam: Linear::new(&mut store, "emb.fam", cfg.d_emb, cfg.emb_dim_family, &mut rng),
        };

        Ok(Conviformer {
            cfg,
            store,
            input_res,
            frontend,
            patch_embed,
            cls_token,
            gpsa_blocks,
            sa_blocks,
            final_norm,
            heads,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TResult<BoundParams> {
        self.store.bind(tape)
    }

    pub fn grid_for(&self, h: usize, w: usize) -> ModelResult<PatchGrid> {
        PatchGrid::for_mode(h, w, &self.cfg)
    }

    /// Feature map from the convolutional frontend (identity-shaped pass in
    /// ConViT mode where the patch embed reads the raw image).
    pub fn frontend_features(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
    ) -> ModelResult<Tensor> {
        match &self.frontend {
            Some(fe) => Ok(fe.apply(tape, bound, x)?),
            None => Ok(x.clone()),
        }
    }

    /// Full forward pass: returns `out_feat` [B, d_emb] (the class-token
    /// state after the final norm) and the pre-class-token token states
    /// [B, t_p, d_emb].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor,
        train: bool,
        rng: &mut StreamRng,
    ) -> ModelResult<(Tensor, Tensor)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ModelError::Config {
                detail: format!("input must be [B,3,h,w], got {shape:?}"),
            });
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        if h != w {
            return Err(ModelError::Config {
                detail: format!("input must be square after presizing, got {h}x{w}"),
            });
        }
        let grid = self.grid_for(h, w)?;
        if let Some(fe) = &self.frontend {
            if grid.d_s != fe.d_s {
                return Err(ModelError::Config {
                    detail: format!(
                        "model frontend built for downsample {}, input {h}px implies {}",
                        fe.d_s, grid.d_s
                    ),
                });
            }
        }
        let dropout = if train { self.cfg.dropout } else { 0.0 };

        let z = self.frontend_features(tape, bound, x)?;
        debug_assert_eq!(&z.shape()[2..], &[grid.h_prime, grid.w_prime][..]);
        let mut tokens = self.patch_embed.apply(tape, bound, &z)?;
        debug_assert_eq!(tokens.shape()[1], grid.t_p);

        let rel = relative_coords(tape, &grid)?;
        for block in &self.gpsa_blocks {
            let n1 = block.norm1.apply(tape, bound, &tokens)?;
            let a = block.attn.forward(tape, bound, &n1, &rel, dropout, rng)?;
            tokens = tape.add(&tokens, &a)?;
            let n2 = block.norm2.apply(tape, bound, &tokens)?;
            let f = block.ffn.apply(tape, bound, &n2, dropout, rng)?;
            tokens = tape.add(&tokens, &f)?;
        }
        let token_states = tokens.clone();

        // class token joins after the last GPSA layer, at position 0
        let cls = tape.reshape(bound.get(self.cls_token), vec![1, 1, self.cfg.d_emb])?;
        let cls_b = tape.broadcast_to(&cls, vec![b, 1, self.cfg.d_emb])?;
        let mut seq = tape.concat(&[cls_b, tokens], 1)?;

        for block in &self.sa_blocks {
            let n1 = block.norm1.apply(tape, bound, &seq)?;
            let a = block.attn.forward(tape, bound, &n1, dropout, rng)?;
            seq = tape.add(&seq, &a)?;
            let n2 = block.norm2.apply(tape, bound, &seq)?;
            let f = block.ffn.apply(tape, bound, &n2, dropout, rng)?;
            seq = tape.add(&seq, &f)?;
        }

        let normed = self.final_norm.apply(tape, bound, &seq)?;
        let cls_state = tape.slice(&normed, 1, 0, 1)?;
        let out_feat = tape.reshape(&cls_state, vec![b, self.cfg.d_emb])?;
        Ok((out_feat, token_states))
    }

    /// Classification logits and metric embeddings from `out_feat`.
    pub fn heads(&self, tape: &mut Tape<T>, bound: &BoundParams, out_feat: &Tensor) -> TResult<HeadOutputs> {
        Ok(HeadOutputs {
            logits_tax: self.heads.tax.apply(tape, bound, out_feat)?,
            logits_gen: self.heads.gen.apply(tape, bound, out_feat)?,
            logits_fam: self.heads.fam.apply(tape, bound, out_feat)?,
            emb_tax: self.heads.emb_tax.apply(tape, bound, out_feat)?,
            emb_gen: self.heads.emb_gen.apply(tape, bound, out_feat)?,
            emb_fam: self.heads.emb_fam.apply(tape, bound, out_feat)?,
        })
    }

    /// Direct access to one GPSA block's attention layer (validation hooks).
    pub fn gpsa_layer(&self, i: usize) -> &GpsaLayer {
        &self.gpsa_blocks[i].attn
    }

    pub fn sa_layer(&self, i: usize) -> &SaLayer {
        &self.sa_blocks[i].attn
    }
}

//! Convolutionally guided vision transformer, end to end: a tape-based
//! autograd core, the aspect-preserving presize pipeline, the gated
//! positional self-attention model with hierarchical heads, the full loss
//! family, a synthetic fine-grained dataset generator, named-tensor
//! checkpoints with cross-architecture weight conversion, and a small
//! training/evaluation harness.

pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod hierarchy;
pub mod image;
pub mod losses;
pub mod model;
pub mod presizer;
pub mod rng;
pub mod synth;
pub mod train;
pub mod validation;
pub mod tensor;

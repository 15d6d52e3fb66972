//! Tiny decoder-only transformer whose per-layer mixer is chosen among
//! full, windowed and linear attention.

mod forward;
mod operators;
mod params;
mod spec;

pub use forward::{block_forward, logits, model_forward, validate_batch, BlockOutput, ForwardOutput, LayerMixer};
pub use operators::{
    apply_operator, causal_mask, full_attention, linear_attention, local_causal_mask, soft_mix, window_attention,
    MixerContext, KEY_EPS, LN_EPS, PROB_SUM_TOL,
};
pub use params::{layer_of, AttentionWeights, LayerWeights, LinearWeights, ModelParams, ParamKind, Parameters};
pub use spec::{HybridArch, ModelSpec, OperatorKind};

use super::operators::{apply_operator, soft_mix, MixerContext, LN_EPS};
use super::params::{LayerWeights, ModelParams, Parameters};
use super::spec::{HybridArch, ModelSpec, OperatorKind};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{DashError, Result};

/// How a layer mixes its sequence.
#[derive(Clone, Debug)]
pub enum LayerMixer {
    Discrete(OperatorKind),
    /// Soft mixture over `candidates` weighted by the routing node `probs`.
    Soft {
        probs: NodeId,
        candidates: Vec<OperatorKind>,
    },
}

impl LayerMixer {
    pub fn from_arch(arch: &HybridArch) -> Vec<LayerMixer> {
        arch.ops().iter().map(|&o| LayerMixer::Discrete(o)).collect()
    }
}

pub struct BlockOutput {
    /// Post-mixer residual stream `U = X + Mix(LN(X))`.
    pub post_mixer: NodeId,
    /// `X' = U + FFN(LN(U))`.
    pub output: NodeId,
}

pub struct ForwardOutput {
    /// `[batch·T, vocab]`
    pub logits: NodeId,
    /// `U^(l)` for every layer.
    pub post_mixer: Vec<NodeId>,
}

/// One pre-norm residual block.
pub fn block_forward(
    tape: &mut Tape,
    x: NodeId,
    layer: &LayerWeights<NodeId>,
    mixer: &LayerMixer,
    ctx: &MixerContext,
) -> Result<BlockOutput> {
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
    let mixed = match mixer {
        LayerMixer::Discrete(kind) => apply_operator(tape, *kind, normed, &layer.attn, &layer.linear, ctx)?,
        LayerMixer::Soft { probs, candidates } => {
            soft_mix(tape, normed, &layer.attn, &layer.linear, *probs, candidates, ctx)?
        }
    };
    let post_mixer = tape.add(x, mixed)?;
    let normed = tape.layer_norm(post_mixer, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    let hidden = tape.matmul(normed, layer.ffn_in)?;
    let hidden = tape.silu(hidden)?;
    let ffn = tape.matmul(hidden, layer.ffn_out)?;
    let output = tape.add(post_mixer, ffn)?;
    Ok(BlockOutput { post_mixer, output })
}

/// Checks a batch of equal-length token sequences against the model.
pub fn validate_batch(spec: &ModelSpec, batch: &[Vec<usize>]) -> Result<usize> {
    let seq_len = batch.first().map_or(0, Vec::len);
    if batch.is_empty() || seq_len == 0 {
        return Err(DashError::Config("empty batch".into()));
    }
    if batch.iter().any(|s| s.len() != seq_len) {
        return Err(DashError::Config("sequences in a batch must share one length".into()));
    }
    if seq_len > spec.max_seq_len {
        return Err(DashError::SequenceTooLong {
            len: seq_len,
            max: spec.max_seq_len,
        });
    }
    if let Some(&id) = batch.iter().flatten().find(|&&id| id >= spec.vocab) {
        return Err(DashError::TokenOutOfRange { id, vocab: spec.vocab });
    }
    Ok(seq_len)
}

/// Embedding → blocks (each dispatched by `mixers`) → final norm → head.
pub fn model_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams<NodeId>,
    batch: &[Vec<usize>],
    mixers: &[LayerMixer],
) -> Result<ForwardOutput> {
    let seq_len = validate_batch(spec, batch)?;
    if mixers.len() != spec.layers || params.layers.len() != spec.layers {
        return Err(DashError::Config(format!(
            "expected {} layer mixers, got {}",
            spec.layers,
            mixers.len()
        )));
    }
    let ctx = MixerContext::new(spec, seq_len, batch.len())?;
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let tok = tape.embedding(params.embed, &ids)?;
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();
    let pos = tape.embedding(params.pos, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut post_mixer = Vec::with_capacity(spec.layers);
    for (layer, mixer) in params.layers.iter().zip(mixers) {
        let out = block_forward(tape, x, layer, mixer, &ctx)?;
        post_mixer.push(out.post_mixer);
        x = out.output;
    }
    let normed = tape.layer_norm(x, params.lnf_gain, params.lnf_bias, LN_EPS)?;
    let logits = tape.matmul(normed, params.head)?;
    Ok(ForwardOutput { logits, post_mixer })
}

/// Gradient-free logits of a discrete architecture.
pub fn logits(spec: &ModelSpec, params: &Parameters, arch: &HybridArch, batch: &[Vec<usize>]) -> Result<Tensor> {
    arch.check_layers(spec)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = model_forward(&mut tape, spec, &bound, batch, &LayerMixer::from_arch(arch))?;
    Ok(tape.value(out.logits).clone())
}

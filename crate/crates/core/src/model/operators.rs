//! Candidate sequence mixers.
//!
//! All mixers take a normalized input laid out as `[batch·T, d]` with the
//! rows of each sequence contiguous, and return the same shape.

use std::sync::Arc;

use super::params::{AttentionWeights, LinearWeights};
use super::spec::{ModelSpec, OperatorKind};
use crate::autodiff::{NodeId, Tape, Tensor, MASK_NEG};
use crate::error::{DashError, Result};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Key-normalization epsilon for the linear mixer.
pub const KEY_EPS: f64 = 1e-8;
/// Routing vectors must sum to one within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Additive mask letting position `t` see `t-window+1..=t`.
/// `window >= seq_len` gives the plain causal mask.
pub fn local_causal_mask(seq_len: usize, window: usize) -> Tensor {
    let mut m = Tensor::zeros(&[seq_len, seq_len]);
    for t in 0..seq_len {
        for s in 0..seq_len {
            let visible = s <= t && t - s < window;
            if !visible {
                m.data_mut()[t * seq_len + s] = MASK_NEG;
            }
        }
    }
    m
}

pub fn causal_mask(seq_len: usize) -> Tensor {
    local_causal_mask(seq_len, seq_len)
}

/// Per-forward context: batch layout plus the two attention masks.
#[derive(Clone, Debug)]
pub struct MixerContext {
    pub n_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub window: usize,
    causal: Arc<Tensor>,
    local: Arc<Tensor>,
}

impl MixerContext {
    pub fn new(spec: &ModelSpec, seq_len: usize, batch: usize) -> Result<Self> {
        Self::with_window(spec, seq_len, batch, spec.window)
    }

    pub fn with_window(spec: &ModelSpec, seq_len: usize, batch: usize, window: usize) -> Result<Self> {
        if seq_len == 0 || seq_len > spec.max_seq_len {
            return Err(DashError::SequenceTooLong {
                len: seq_len,
                max: spec.max_seq_len,
            });
        }
        if window < 1 {
            return Err(DashError::Config("window size must be at least 1".into()));
        }
        Ok(MixerContext {
            n_heads: spec.n_heads,
            head_dim: spec.head_dim(),
            seq_len,
            batch,
            window,
            causal: Arc::new(causal_mask(seq_len)),
            local: Arc::new(local_causal_mask(seq_len, window)),
        })
    }

    fn check_rows(&self, tape: &Tape, x: NodeId, op: &'static str) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] != self.batch * self.seq_len || shape[1] != self.n_heads * self.head_dim {
            return Err(DashError::Shape {
                op,
                shapes: format!(
                    "input {shape:?}, expected [{}, {}]",
                    self.batch * self.seq_len,
                    self.n_heads * self.head_dim
                ),
            });
        }
        Ok(())
    }
}

/// Causal multi-head softmax attention.
pub fn full_attention(tape: &mut Tape, x: NodeId, w: &AttentionWeights<NodeId>, ctx: &MixerContext) -> Result<NodeId> {
    let mask = ctx.causal.clone();
    masked_attention(tape, x, w, ctx, mask, "full_attention")
}

/// Multi-head softmax attention restricted to the local causal window.
pub fn window_attention(
    tape: &mut Tape,
    x: NodeId,
    w: &AttentionWeights<NodeId>,
    ctx: &MixerContext,
) -> Result<NodeId> {
    let mask = ctx.local.clone();
    masked_attention(tape, x, w, ctx, mask, "window_attention")
}

fn masked_attention(
    tape: &mut Tape,
    x: NodeId,
    w: &AttentionWeights<NodeId>,
    ctx: &MixerContext,
    mask: Arc<Tensor>,
    op: &'static str,
) -> Result<NodeId> {
    ctx.check_rows(tape, x, op)?;
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let scale = 1.0 / (ctx.head_dim as f64).sqrt();
    let t = ctx.seq_len;
    let mut sequences = Vec::with_capacity(ctx.batch);
    for b in 0..ctx.batch {
        let (qb, kb, vb) = if ctx.batch == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, b * t, (b + 1) * t)?,
                tape.slice_rows(k, b * t, (b + 1) * t)?,
                tape.slice_rows(v, b * t, (b + 1) * t)?,
            )
        };
        let mut heads = Vec::with_capacity(ctx.n_heads);
        for h in 0..ctx.n_heads {
            let (c0, c1) = (h * ctx.head_dim, (h + 1) * ctx.head_dim);
            let (qh, kh, vh) = head_slices(tape, [qb, kb, vb], c0, c1, ctx.n_heads)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, mask.clone())?;
            heads.push(tape.matmul(probs, vh)?);
        }
        sequences.push(concat_cols(tape, &heads)?);
    }
    let mixed = concat_rows(tape, &sequences)?;
    tape.matmul(mixed, w.wo)
}

/// Gated delta-rule linear attention, one recurrent state per head.
///
/// Per head with `S_0 = 0`: `k̂_t = k_t/‖k_t‖`, `g_t = σ(x_t·w_g + b_g)`,
/// `β_t = σ(x_t·w_β + b_β)`, `S_t = g_t·S_{t−1} + β_t·k̂_t·(v_t − S_{t−1}ᵀk̂_t)ᵀ`,
/// `y_t = S_tᵀ q_t`.
pub fn linear_attention(tape: &mut Tape, x: NodeId, w: &LinearWeights<NodeId>, ctx: &MixerContext) -> Result<NodeId> {
    ctx.check_rows(tape, x, "linear_attention")?;
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let gate = tape.matmul(x, w.w_gate)?;
    let gate = tape.add_row(gate, w.b_gate)?;
    let gate = tape.sigmoid(gate)?;
    let beta = tape.matmul(x, w.w_beta)?;
    let beta = tape.add_row(beta, w.b_beta)?;
    let beta = tape.sigmoid(beta)?;
    let t = ctx.seq_len;
    let mut sequences = Vec::with_capacity(ctx.batch);
    for b in 0..ctx.batch {
        let rows = |tape: &mut Tape, n: NodeId| -> Result<NodeId> {
            if ctx.batch == 1 {
                Ok(n)
            } else {
                tape.slice_rows(n, b * t, (b + 1) * t)
            }
        };
        let (qb, kb, vb, gb, bb) = (
            rows(tape, q)?,
            rows(tape, k)?,
            rows(tape, v)?,
            rows(tape, gate)?,
            rows(tape, beta)?,
        );
        let mut heads = Vec::with_capacity(ctx.n_heads);
        for h in 0..ctx.n_heads {
            let (c0, c1) = (h * ctx.head_dim, (h + 1) * ctx.head_dim);
            let (qh, kh, vh) = head_slices(tape, [qb, kb, vb], c0, c1, ctx.n_heads)?;
            let kh = tape.l2_normalize(kh, KEY_EPS)?;
            let gh = tape.slice_cols(gb, h, h + 1)?;
            let bh = tape.slice_cols(bb, h, h + 1)?;
            heads.push(tape.delta_scan(qh, kh, vh, gh, bh)?);
        }
        sequences.push(concat_cols(tape, &heads)?);
    }
    let mixed = concat_rows(tape, &sequences)?;
    tape.matmul(mixed, w.wo)
}

fn head_slices(
    tape: &mut Tape,
    [q, k, v]: [NodeId; 3],
    c0: usize,
    c1: usize,
    n_heads: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    if n_heads == 1 {
        return Ok((q, k, v));
    }
    Ok((
        tape.slice_cols(q, c0, c1)?,
        tape.slice_cols(k, c0, c1)?,
        tape.slice_cols(v, c0, c1)?,
    ))
}

fn concat_cols(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(parts)
    }
}

fn concat_rows(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(parts)
    }
}

/// Dispatches a single discrete operator.
pub fn apply_operator(
    tape: &mut Tape,
    kind: OperatorKind,
    x: NodeId,
    attn: &AttentionWeights<NodeId>,
    linear: &LinearWeights<NodeId>,
    ctx: &MixerContext,
) -> Result<NodeId> {
    match kind {
        OperatorKind::Full => full_attention(tape, x, attn, ctx),
        OperatorKind::Window => window_attention(tape, x, attn, ctx),
        OperatorKind::Linear => linear_attention(tape, x, linear, ctx),
    }
}

/// Probability-weighted combination `Σ_o p_o · Operator_o(x)` of the
/// candidates, all evaluated on the same normalized input.
pub fn soft_mix(
    tape: &mut Tape,
    x: NodeId,
    attn: &AttentionWeights<NodeId>,
    linear: &LinearWeights<NodeId>,
    probs: NodeId,
    candidates: &[OperatorKind],
    ctx: &MixerContext,
) -> Result<NodeId> {
    let p = tape.value(probs);
    if p.numel() != candidates.len() {
        return Err(DashError::Shape {
            op: "soft_mix",
            shapes: format!("{} probabilities for {} candidates", p.numel(), candidates.len()),
        });
    }
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(DashError::ProbsNotNormalized(total));
    }
    let outputs = candidates
        .iter()
        .map(|&kind| apply_operator(tape, kind, x, attn, linear, ctx))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(probs, &outputs)
}

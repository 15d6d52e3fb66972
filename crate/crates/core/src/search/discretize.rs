use serde::{Deserialize, Serialize};

use super::routing::ArchState;
use crate::model::{HybridArch, OperatorKind};

/// Margin below which a layer counts as ambiguous.
pub const AMBIGUOUS_MARGIN: f64 = 0.2;

/// Index of the largest probability. Exact ties go to the cheaper
/// operator, i.e. the one later in candidate order.
pub fn argmax_cheapest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v >= p[best] {
            best = i;
        }
    }
    best
}

/// Per-layer argmax at the state's current temperature. Layer 0, which was
/// held FULL during search, becomes LINEAR in the deployed model.
pub fn discretize(state: &ArchState) -> HybridArch {
    let candidates = state.space.candidates();
    let mut ops = vec![OperatorKind::Linear];
    ops.extend(state.probs().iter().map(|p| candidates[argmax_cheapest(p)]));
    HybridArch::new(ops)
}

/// `n_FULL + (w/T)·n_WINDOW`.
pub fn realized_budget(arch: &HybridArch, window: usize, seq_len: usize) -> f64 {
    arch.ops().iter().map(|op| op.relative_cost(window, seq_len)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub entropy: f64,
    pub top1: f64,
    pub margin: f64,
}

impl LayerDiagnostics {
    pub fn of(p: &[f64]) -> LayerDiagnostics {
        let entropy = p.iter().filter(|&&x| x > 0.0).fold(0.0, |h, &x| h - x * x.ln());
        let mut sorted = p.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let top1 = sorted[0];
        let margin = top1 - sorted.get(1).copied().unwrap_or(0.0);
        LayerDiagnostics { entropy, top1, margin }
    }

    pub fn is_ambiguous(&self) -> bool {
        self.margin < AMBIGUOUS_MARGIN
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
    pub avg_entropy: f64,
    pub avg_top1: f64,
    pub avg_margin: f64,
    pub ambiguous: usize,
}

impl RoutingDiagnostics {
    pub fn from_probs(probs: &[Vec<f64>]) -> RoutingDiagnostics {
        let layers: Vec<LayerDiagnostics> = probs.iter().map(|p| LayerDiagnostics::of(p)).collect();
        let n = layers.len().max(1) as f64;
        RoutingDiagnostics {
            avg_entropy: layers.iter().map(|l| l.entropy).sum::<f64>() / n,
            avg_top1: layers.iter().map(|l| l.top1).sum::<f64>() / n,
            avg_margin: layers.iter().map(|l| l.margin).sum::<f64>() / n,
            ambiguous: layers.iter().filter(|l| l.is_ambiguous()).count(),
            layers,
        }
    }
}

/// Diagnostics over the searchable layers at the state's current temperature.
pub fn routing_diagnostics(state: &ArchState) -> RoutingDiagnostics {
    RoutingDiagnostics::from_probs(&state.probs())
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DashError, Result};

/// Shape of the tiny decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    /// Longest sequence the positional table covers.
    pub max_seq_len: usize,
    /// Local attention window in tokens.
    pub window: usize,
    pub ffn_mult: usize,
}

impl Default for ModelSpec {
    /// Desk-scale default: `window / max_seq_len = 0.125`.
    fn default() -> Self {
        ModelSpec {
            layers: 8,
            d_model: 64,
            n_heads: 2,
            vocab: 64,
            max_seq_len: 128,
            window: 16,
            ffn_mult: 4,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DashError::Config(msg));
        if self.layers < 2 {
            return fail(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.window < 1 || self.window > self.max_seq_len {
            return fail(format!("window {} must lie in 1..={}", self.window, self.max_seq_len));
        }
        if self.vocab < 2 || self.ffn_mult == 0 {
            return fail("vocab must be >= 2 and ffn_mult >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Sequence-mixing operator assigned to a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Full,
    Window,
    Linear,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 3] = [OperatorKind::Full, OperatorKind::Window, OperatorKind::Linear];

    pub fn mnemonic(self) -> char {
        match self {
            OperatorKind::Full => 'F',
            OperatorKind::Window => 'W',
            OperatorKind::Linear => 'L',
        }
    }

    /// Attention cost relative to full attention: `(1, w/T, 0)`.
    pub fn relative_cost(self, window: usize, seq_len: usize) -> f64 {
        match self {
            OperatorKind::Full => 1.0,
            OperatorKind::Window => window.min(seq_len) as f64 / seq_len as f64,
            OperatorKind::Linear => 0.0,
        }
    }

    /// Whether this operator uses the shared attention projections.
    pub fn uses_attention_weights(self) -> bool {
        !matches!(self, OperatorKind::Linear)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic())
    }
}

impl FromStr for OperatorKind {
    type Err = DashError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "FULL" | "full" => Ok(OperatorKind::Full),
            "W" | "WINDOW" | "window" => Ok(OperatorKind::Window),
            "L" | "LINEAR" | "linear" => Ok(OperatorKind::Linear),
            other => Err(DashError::Config(format!("unknown operator `{other}`"))),
        }
    }
}

/// A discrete per-layer operator assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HybridArch {
    ops: Vec<OperatorKind>,
}

impl HybridArch {
    pub fn new(ops: Vec<OperatorKind>) -> Self {
        HybridArch { ops }
    }

    pub fn uniform(layers: usize, op: OperatorKind) -> Self {
        HybridArch { ops: vec![op; layers] }
    }

    pub fn all_full(layers: usize) -> Self {
        Self::uniform(layers, OperatorKind::Full)
    }

    pub fn all_linear(layers: usize) -> Self {
        Self::uniform(layers, OperatorKind::Linear)
    }

    pub fn ops(&self) -> &[OperatorKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn with(&self, layer: usize, op: OperatorKind) -> HybridArch {
        let mut ops = self.ops.clone();
        ops[layer] = op;
        HybridArch { ops }
    }

    pub fn count(&self, op: OperatorKind) -> usize {
        self.ops.iter().filter(|&&o| o == op).count()
    }

    pub fn check_layers(&self, spec: &ModelSpec) -> Result<()> {
        if self.ops.len() != spec.layers {
            return Err(DashError::Config(format!(
                "architecture has {} layers, model has {}",
                self.ops.len(),
                spec.layers
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HybridArch {
    /// Space-separated mnemonics, e.g. `L F W F`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for HybridArch {
    type Err = DashError;

    fn from_str(s: &str) -> Result<Self> {
        let ops = s.split_whitespace().map(str::parse).collect::<Result<Vec<_>>>()?;
        if ops.is_empty() {
            return Err(DashError::Config("empty architecture".into()));
        }
        Ok(HybridArch { ops })
    }
}

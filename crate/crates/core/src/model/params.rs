//! Parameter layout shared by stored weights (`ModelParams<Tensor>`) and
//! their tape bindings (`ModelParams<NodeId>`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::ModelSpec;
use crate::autodiff::{NodeId, Tape, Tensor};

/// Projections used by both FULL and WINDOW candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

/// Projections of the gated delta-rule candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// Per-head forget gate `[d, heads]` and bias `[heads]`.
    pub w_gate: T,
    pub b_gate: T,
    /// Per-head write strength `[d, heads]` and bias `[heads]`.
    pub w_beta: T,
    pub b_beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attn: AttentionWeights<T>,
    pub linear: LinearWeights<T>,
    pub ffn_in: T,
    pub ffn_out: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: T,
    pub pos: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: T,
}

pub type Parameters = ModelParams<Tensor>;

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Shared FULL/WINDOW attention projections.
    Attention,
    /// Linear-attention candidate weights.
    Linear,
    /// Embeddings, norms, FFNs and the output head.
    Other,
}

impl ParamKind {
    /// Classifies a parameter by its dotted name.
    pub fn of(name: &str) -> ParamKind {
        if name.contains(".attn.") {
            ParamKind::Attention
        } else if name.contains(".linear.") {
            ParamKind::Linear
        } else {
            ParamKind::Other
        }
    }

    pub fn is_attention_operator(self) -> bool {
        matches!(self, ParamKind::Attention | ParamKind::Linear)
    }
}

/// Layer index encoded in a parameter name (`layers.<l>.…`).
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

impl<T> ModelParams<T> {
    /// Applies `f` to every parameter in a fixed order, passing its name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let mut g = |name: String, t: &T| f(&name, t);
        ModelParams {
            embed: g("embed".into(), &self.embed),
            pos: g("pos".into(), &self.pos),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, lw)| {
                    let p = |s: &str| format!("layers.{l}.{s}");
                    LayerWeights {
                        attn: AttentionWeights {
                            wq: g(p("attn.wq"), &lw.attn.wq),
                            wk: g(p("attn.wk"), &lw.attn.wk),
                            wv: g(p("attn.wv"), &lw.attn.wv),
                            wo: g(p("attn.wo"), &lw.attn.wo),
                        },
                        linear: LinearWeights {
                            wq: g(p("linear.wq"), &lw.linear.wq),
                            wk: g(p("linear.wk"), &lw.linear.wk),
                            wv: g(p("linear.wv"), &lw.linear.wv),
                            wo: g(p("linear.wo"), &lw.linear.wo),
                            w_gate: g(p("linear.w_gate"), &lw.linear.w_gate),
                            b_gate: g(p("linear.b_gate"), &lw.linear.b_gate),
                            w_beta: g(p("linear.w_beta"), &lw.linear.w_beta),
                            b_beta: g(p("linear.b_beta"), &lw.linear.b_beta),
                        },
                        ffn_in: g(p("ffn_in"), &lw.ffn_in),
                        ffn_out: g(p("ffn_out"), &lw.ffn_out),
                        ln1_gain: g(p("ln1_gain"), &lw.ln1_gain),
                        ln1_bias: g(p("ln1_bias"), &lw.ln1_bias),
                        ln2_gain: g(p("ln2_gain"), &lw.ln2_gain),
                        ln2_bias: g(p("ln2_bias"), &lw.ln2_bias),
                    }
                })
                .collect(),
            lnf_gain: g("lnf_gain".into(), &self.lnf_gain),
            lnf_bias: g("lnf_bias".into(), &self.lnf_bias),
            head: g("head".into(), &self.head),
        }
    }

    /// All parameters with their names, in the same order as [`ModelParams::map`].
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        // map() visits in a fixed order; record names and positions.
        let names = self.map(|name, _| name.to_string());
        names.for_each_pair(self, |name, t| out.push((name.clone(), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let names = self.map(|name, _| name.to_string());
        let mut out = Vec::new();
        names.for_each_pair_mut(self, |name, t| out.push((name.clone(), t)));
        out
    }

    fn refs(&self) -> Vec<&T> {
        let mut v = vec![&self.embed, &self.pos];
        for lw in &self.layers {
            v.extend([
                &lw.attn.wq,
                &lw.attn.wk,
                &lw.attn.wv,
                &lw.attn.wo,
                &lw.linear.wq,
                &lw.linear.wk,
                &lw.linear.wv,
                &lw.linear.wo,
                &lw.linear.w_gate,
                &lw.linear.b_gate,
                &lw.linear.w_beta,
                &lw.linear.b_beta,
                &lw.ffn_in,
                &lw.ffn_out,
                &lw.ln1_gain,
                &lw.ln1_bias,
                &lw.ln2_gain,
                &lw.ln2_bias,
            ]);
        }
        v.extend([&self.lnf_gain, &self.lnf_bias, &self.head]);
        v
    }

    fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.embed, &mut self.pos];
        for lw in &mut self.layers {
            v.extend([
                &mut lw.attn.wq,
                &mut lw.attn.wk,
                &mut lw.attn.wv,
                &mut lw.attn.wo,
                &mut lw.linear.wq,
                &mut lw.linear.wk,
                &mut lw.linear.wv,
                &mut lw.linear.wo,
                &mut lw.linear.w_gate,
                &mut lw.linear.b_gate,
                &mut lw.linear.w_beta,
                &mut lw.linear.b_beta,
                &mut lw.ffn_in,
                &mut lw.ffn_out,
                &mut lw.ln1_gain,
                &mut lw.ln1_bias,
                &mut lw.ln2_gain,
                &mut lw.ln2_bias,
            ]);
        }
        v.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head]);
        v
    }
}

impl ModelParams<String> {
    fn for_each_pair<'a, T>(&self, other: &'a ModelParams<T>, mut f: impl FnMut(&String, &'a T)) {
        for (n, t) in self.refs().into_iter().zip(other.refs()) {
            f(n, t);
        }
    }

    fn for_each_pair_mut<'a, T>(&self, other: &'a mut ModelParams<T>, mut f: impl FnMut(&String, &'a mut T)) {
        for (n, t) in self.refs().into_iter().zip(other.refs_mut()) {
            f(n, t);
        }
    }
}

impl Parameters {
    /// Random initialization. Projections use `N(0, 1/fan_in)`; residual
    /// output projections are further scaled by `1/sqrt(2·layers)`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let h = spec.n_heads;
        let f = spec.ffn_dim();
        let resid = 1.0 / (2.0 * spec.layers as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let proj = 1.0 / (d as f64).sqrt();
        let embed = normal(spec.vocab, d, 1.0);
        let pos = normal(spec.max_seq_len, d, 0.2);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                attn: AttentionWeights {
                    wq: normal(d, d, proj),
                    wk: normal(d, d, proj),
                    wv: normal(d, d, proj),
                    wo: normal(d, d, proj * resid),
                },
                linear: LinearWeights {
                    wq: normal(d, d, proj),
                    wk: normal(d, d, proj),
                    wv: normal(d, d, proj),
                    wo: normal(d, d, proj * resid),
                    w_gate: normal(d, h, 0.1 * proj),
                    b_gate: Tensor::full(&[h], 3.0),
                    w_beta: normal(d, h, 0.1 * proj),
                    b_beta: Tensor::zeros(&[h]),
                },
                ffn_in: normal(d, f, proj),
                ffn_out: normal(f, d, resid / (f as f64).sqrt()),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        ModelParams {
            embed,
            pos,
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head: normal(d, spec.vocab, proj),
        }
    }

    /// Binds every parameter onto `tape`; those for which `trainable`
    /// returns true become gradient-receiving leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ModelParams<NodeId> {
        self.map(|name, t| {
            if trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Initializes every linear candidate's q/k/v/o projections from the
    /// attention projections of the same layer.
    pub fn copy_attention_into_linear(&mut self) {
        for lw in &mut self.layers {
            lw.linear.wq = lw.attn.wq.clone();
            lw.linear.wk = lw.attn.wk.clone();
            lw.linear.wv = lw.attn.wv.clone();
            lw.linear.wo = lw.attn.wo.clone();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deterministic fingerprint of every value's bit pattern, optionally
    /// restricted to names accepted by `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named() {
            if !filter(&name) {
                continue;
            }
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

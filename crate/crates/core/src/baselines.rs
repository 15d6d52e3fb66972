//! Selector-style allocation baselines over the FULL/LINEAR space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DashError, Result};
use crate::eval::{eval_heldout_kl, HeldoutSet};
use crate::model::{HybridArch, ModelSpec, OperatorKind, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorResult {
    pub arch: HybridArch,
    /// For each greedy step, the held-out KL of every flip that was tried.
    pub score_trace: Vec<Vec<(usize, f64)>>,
    /// Layers flipped, in order.
    pub picks: Vec<usize>,
    /// Number of FULL layers.
    pub budget: usize,
}

/// FULL at `floor((i + 0.5)·L/B)` for `i < B`, LINEAR elsewhere.
pub fn uniform_alloc(layers: usize, budget: usize) -> Result<HybridArch> {
    if budget < 1 || budget > layers {
        return Err(DashError::BudgetOutOfRange { budget, layers });
    }
    let mut ops = vec![OperatorKind::Linear; layers];
    for i in 0..budget {
        // Integer form of floor((i + 0.5)·L/B).
        ops[(2 * i + 1) * layers / (2 * budget)] = OperatorKind::Full;
    }
    Ok(HybridArch::new(ops))
}

/// Held-out KL of every single-layer flip `from → to` applied to `arch`.
/// Lowest KL wins; ties go to the lower layer index.
fn best_flip(
    spec: &ModelSpec,
    candidates: &Parameters,
    heldout: &HeldoutSet,
    arch: &HybridArch,
    from: OperatorKind,
    to: OperatorKind,
) -> Result<(usize, Vec<(usize, f64)>)> {
    let layers: Vec<usize> = (0..arch.len()).filter(|&l| arch.ops()[l] == from).collect();
    let scores = layers
        .par_iter()
        .map(|&l| eval_heldout_kl(spec, candidates, &arch.with(l, to), heldout).map(|kl| (l, kl)))
        .collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one flip")
        .0;
    Ok((best, scores))
}

fn check_budget(spec: &ModelSpec, budget: usize) -> Result<()> {
    if budget > spec.layers {
        return Err(DashError::BudgetOutOfRange {
            budget,
            layers: spec.layers,
        });
    }
    Ok(())
}

/// Starts all-LINEAR and repeatedly flips to FULL the layer whose flip gives
/// the lowest held-out KL, until `budget` layers are FULL.
pub fn greedy_add_select(
    spec: &ModelSpec,
    candidates: &Parameters,
    budget: usize,
    heldout: &HeldoutSet,
) -> Result<SelectorResult> {
    check_budget(spec, budget)?;
    let mut arch = HybridArch::all_linear(spec.layers);
    let (mut trace, mut picks) = (Vec::new(), Vec::new());
    for _ in 0..budget {
        let (l, scores) = best_flip(
            spec,
            candidates,
            heldout,
            &arch,
            OperatorKind::Linear,
            OperatorKind::Full,
        )?;
        arch = arch.with(l, OperatorKind::Full);
        trace.push(scores);
        picks.push(l);
    }
    Ok(SelectorResult {
        arch,
        score_trace: trace,
        picks,
        budget,
    })
}

/// Starts all-FULL and repeatedly flips to LINEAR the layer whose flip gives
/// the lowest held-out KL, until `budget` layers remain FULL.
pub fn greedy_remove_select(
    spec: &ModelSpec,
    candidates: &Parameters,
    budget: usize,
    heldout: &HeldoutSet,
) -> Result<SelectorResult> {
    check_budget(spec, budget)?;
    let mut arch = HybridArch::all_full(spec.layers);
    let (mut trace, mut picks) = (Vec::new(), Vec::new());
    for _ in budget..spec.layers {
        let (l, scores) = best_flip(
            spec,
            candidates,
            heldout,
            &arch,
            OperatorKind::Full,
            OperatorKind::Linear,
        )?;
        arch = arch.with(l, OperatorKind::Linear);
        trace.push(scores);
        picks.push(l);
    }
    Ok(SelectorResult {
        arch,
        score_trace: trace,
        picks,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixed_batches;
    use crate::eval::eval_heldout_kl;
    use OperatorKind::*;

    fn full_at(arch: &HybridArch) -> Vec<usize> {
        (0..arch.len()).filter(|&l| arch.ops()[l] == Full).collect()
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(full_at(&uniform_alloc(8, 4).unwrap()), vec![1, 3, 5, 7]);
        assert_eq!(uniform_alloc(8, 8).unwrap(), HybridArch::all_full(8));
        assert_eq!(full_at(&uniform_alloc(8, 1).unwrap()), vec![4]);
        assert_eq!(full_at(&uniform_alloc(8, 2).unwrap()), vec![2, 6]);
        assert!(uniform_alloc(8, 0).is_err());
        assert!(uniform_alloc(8, 9).is_err());
    }

    fn setup() -> (ModelSpec, Parameters, HeldoutSet) {
        let spec = ModelSpec {
            layers: 4,
            d_model: 8,
            n_heads: 2,
            vocab: 12,
            max_seq_len: 10,
            window: 2,
            ffn_mult: 2,
        };
        let teacher = Parameters::init(&spec, 3);
        let mut cands = teacher.clone();
        cands.copy_attention_into_linear();
        let tokens: Vec<u16> = (0..400u32).map(|i| ((i * 5 + i / 7) % 12) as u16).collect();
        let h = HeldoutSet::new(&spec, &teacher, fixed_batches(&tokens, 2, 2, 8, 1)).unwrap();
        (spec, cands, h)
    }

    #[test]
    fn greedy_endpoints() {
        let (spec, cands, h) = setup();
        for select in [greedy_add_select, greedy_remove_select] {
            assert_eq!(select(&spec, &cands, 0, &h).unwrap().arch, HybridArch::all_linear(4));
            assert_eq!(select(&spec, &cands, 4, &h).unwrap().arch, HybridArch::all_full(4));
            let r = select(&spec, &cands, 2, &h).unwrap();
            assert_eq!(r.arch.count(Full), 2);
        }
    }

    #[test]
    fn sabotaged_layer_is_added_first() {
        let (spec, mut cands, h) = setup();
        for (name, t) in cands.named_mut() {
            // In an untrained toy a zero mixer is harmless, so the sabotage
            // blows the layer's output up instead.
            if name == "layers.2.linear.wo" {
                t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
            }
        }
        // Brute force over single flips, independent of the selector.
        let base = HybridArch::all_linear(4);
        let kls: Vec<f64> = (0..4)
            .map(|l| eval_heldout_kl(&spec, &cands, &base.with(l, Full), &h).unwrap())
            .collect();
        let brute = (0..4).min_by(|&a, &b| kls[a].total_cmp(&kls[b])).unwrap();
        let r = greedy_add_select(&spec, &cands, 1, &h).unwrap();
        assert_eq!(r.picks[0], brute);
        assert_eq!(r.picks[0], 2);
    }

    #[test]
    fn deterministic() {
        let (spec, cands, h) = setup();
        assert_eq!(
            greedy_remove_select(&spec, &cands, 1, &h).unwrap(),
            greedy_remove_select(&spec, &cands, 1, &h).unwrap()
        );
    }
}

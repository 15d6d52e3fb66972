use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, NodeId, Tape, Tensor};
use crate::error::{DashError, Result};
use crate::model::OperatorKind;

/// Which operators a searchable layer may pick from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSpace {
    /// FULL or LINEAR.
    Binary,
    /// Binary plus sliding-window attention.
    #[default]
    Tri,
}

impl CandidateSpace {
    pub fn candidates(self) -> &'static [OperatorKind] {
        match self {
            CandidateSpace::Binary => &[OperatorKind::Full, OperatorKind::Linear],
            CandidateSpace::Tri => &OperatorKind::ALL,
        }
    }

    pub fn len(self) -> usize {
        self.candidates().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Relative cost of each candidate, in candidate order.
    pub fn cost_vector(self, window: usize, seq_len: usize) -> Vec<f64> {
        self.candidates()
            .iter()
            .map(|op| op.relative_cost(window, seq_len))
            .collect()
    }
}

impl fmt::Display for CandidateSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateSpace::Binary => "binary",
            CandidateSpace::Tri => "tri",
        })
    }
}

impl FromStr for CandidateSpace {
    type Err = DashError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(CandidateSpace::Binary),
            "tri" => Ok(CandidateSpace::Tri),
            other => Err(DashError::Config(format!(
                "unknown candidate space `{other}` (expected binary or tri)"
            ))),
        }
    }
}

/// `softmax(alpha / t_arch)`.
pub fn routing_probs(alpha: &[f64], t_arch: f64) -> Vec<f64> {
    assert!(t_arch > 0.0, "architecture temperature must be positive");
    let mut p: Vec<f64> = alpha.iter().map(|a| a / t_arch).collect();
    softmax_in_place(&mut p);
    p
}

/// Row-wise routing probabilities of an alpha node `[layers, |O|]` on a tape.
pub fn routing_probs_node(tape: &mut Tape, alpha: NodeId, t_arch: f64) -> Result<NodeId> {
    if t_arch <= 0.0 {
        return Err(DashError::Config(format!(
            "architecture temperature {t_arch} must be positive"
        )));
    }
    let scaled = tape.scale(alpha, 1.0 / t_arch)?;
    tape.softmax(scaled)
}

/// Architecture logits for every searchable layer.
///
/// Layer 0 is held FULL during search and has no logits, so row `i` of
/// `alpha` belongs to model layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchState {
    pub space: CandidateSpace,
    pub alpha: Tensor,
    pub t_arch: f64,
}

impl ArchState {
    /// Zero logits (uniform routing) at temperature 1.
    pub fn new(layers: usize, space: CandidateSpace) -> Result<ArchState> {
        if layers < 2 {
            return Err(DashError::Config("search needs at least two layers".into()));
        }
        Ok(ArchState {
            space,
            alpha: Tensor::zeros(&[layers - 1, space.len()]),
            t_arch: 1.0,
        })
    }

    pub fn from_alpha(alpha: Tensor, space: CandidateSpace, t_arch: f64) -> Result<ArchState> {
        if alpha.rank() != 2 || alpha.cols() != space.len() {
            return Err(DashError::shape("arch_state", &[alpha.shape(), &[0, space.len()]]));
        }
        if !alpha.is_finite() || t_arch <= 0.0 {
            return Err(DashError::Config("alpha must be finite and t_arch positive".into()));
        }
        Ok(ArchState { space, alpha, t_arch })
    }

    pub fn searchable_layers(&self) -> usize {
        self.alpha.rows()
    }

    pub fn layers(&self) -> usize {
        self.alpha.rows() + 1
    }

    /// Routing probabilities at the current temperature, one row per searchable layer.
    pub fn probs(&self) -> Vec<Vec<f64>> {
        (0..self.alpha.rows())
            .map(|r| routing_probs(self.alpha.row(r), self.t_arch))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn routing_examples() {
        assert!(close(&routing_probs(&[0.0; 3], 1.0), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(
            &routing_probs(&[2f64.ln(), 0.0, 0.0], 1.0),
            &[0.5, 0.25, 0.25],
            1e-15
        ));
        let e10 = 10f64.exp();
        let p = routing_probs(&[1.0, 0.0, 0.0], 0.1);
        assert!((p[0] - e10 / (e10 + 2.0)).abs() < 1e-15);
        assert!((p[0] - 0.999909).abs() < 5e-7);
    }

    #[test]
    fn node_matches_plain_routing() {
        let alpha = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(alpha.clone());
        let p = routing_probs_node(&mut tape, a, 0.37).unwrap();
        for r in 0..2 {
            assert!(close(tape.value(p).row(r), &routing_probs(alpha.row(r), 0.37), 1e-15));
        }
    }

    #[test]
    fn cost_vectors() {
        assert_eq!(CandidateSpace::Tri.cost_vector(16, 128), vec![1.0, 0.125, 0.0]);
        assert_eq!(CandidateSpace::Binary.cost_vector(16, 128), vec![1.0, 0.0]);
    }

    #[test]
    fn state_shape_excludes_layer_zero() {
        let s = ArchState::new(8, CandidateSpace::Tri).unwrap();
        assert_eq!(s.alpha.shape(), &[7, 3]);
        assert_eq!(s.layers(), 8);
        assert!(ArchState::new(1, CandidateSpace::Tri).is_err());
        assert_eq!("binary".parse::<CandidateSpace>().unwrap(), CandidateSpace::Binary);
        assert!("quad".parse::<CandidateSpace>().is_err());
    }
}

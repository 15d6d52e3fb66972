use crate::autodiff::{log_sum_exp, NodeId, Tape, Tensor};
use crate::error::{DashError, Result};

/// Temperature-scaled forward KL from teacher to student, averaged over rows:
/// `(τ²/N) Σ_rows KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`.
///
/// Rows are token positions of every sequence in the batch, so with equal
/// sequence lengths this is the per-sequence loss averaged over the batch.
pub fn kl_distill_loss(tape: &mut Tape, teacher: NodeId, student: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(DashError::Config(format!(
            "distillation temperature {tau} must be positive"
        )));
    }
    let (ts, ss) = (tape.shape(teacher).to_vec(), tape.shape(student).to_vec());
    if ts != ss || ts.len() != 2 {
        return Err(DashError::shape("kl_distill_loss", &[&ts, &ss]));
    }
    let rows = ts[0] as f64;
    let zt = tape.scale(teacher, 1.0 / tau)?;
    let zs = tape.scale(student, 1.0 / tau)?;
    let pt = tape.softmax(zt)?;
    let log_pt = tape.log_softmax(zt)?;
    let log_ps = tape.log_softmax(zs)?;
    let diff = tape.sub(log_pt, log_ps)?;
    let terms = tape.mul(pt, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, tau * tau / rows)
}

/// Tape-free evaluation of the same quantity.
pub fn kl_divergence(teacher: &Tensor, student: &Tensor, tau: f64) -> f64 {
    assert_eq!(teacher.shape(), student.shape(), "logit shapes must agree");
    let rows = teacher.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let zt: Vec<f64> = teacher.row(r).iter().map(|z| z / tau).collect();
        let zs: Vec<f64> = student.row(r).iter().map(|z| z / tau).collect();
        let (lt, ls) = (log_sum_exp(&zt), log_sum_exp(&zs));
        for (a, b) in zt.iter().zip(&zs) {
            let log_pt = a - lt;
            total += log_pt.exp() * (log_pt - (b - ls));
        }
    }
    tau * tau * total / rows as f64
}

/// Expected relative attention cost `Σ_l p^(l)·c` over searchable layers.
pub fn cost_loss(tape: &mut Tape, probs: NodeId, cost: &[f64]) -> Result<NodeId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != cost.len() {
        return Err(DashError::shape("cost_loss", &[&shape, &[cost.len()]]));
    }
    let tiled: Vec<f64> = (0..shape[0]).flat_map(|_| cost.iter().copied()).collect();
    let c = tape.constant(Tensor::new(shape, tiled)?);
    let weighted = tape.mul(probs, c)?;
    tape.sum(weighted)
}

/// `L_KL + λ·L_cost`.
pub fn search_loss(tape: &mut Tape, kl: NodeId, cost: NodeId, lambda: f64) -> Result<NodeId> {
    let penalty = tape.scale(cost, lambda)?;
    tape.add(kl, penalty)
}

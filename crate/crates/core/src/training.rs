//! Teacher pretraining plus the stages on either side of the search:
//! candidate alignment before it, distillation of the chosen student after.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::corpus::random_windows;
use crate::error::{DashError, Result};
use crate::model::{
    layer_of, model_forward, HybridArch, LayerMixer, ModelParams, ModelSpec, OperatorKind, ParamKind, Parameters,
};
use crate::optim::{AdamW, LrSchedule};
use crate::search::kl_distill_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Teacher,
    Align,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Implied by the config section the values were read from.
    #[serde(skip)]
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr_main: f64,
    /// Learning rate of the shared attention projections.
    pub lr_attn_op: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Distillation temperature (distill stage only).
    #[serde(default = "one")]
    pub tau: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            steps: 500,
            batch: 8,
            seq_len: 128,
            lr_main: 3e-3,
            lr_attn_op: 1e-3,
            weight_decay: 0.01,
            schedule: LrSchedule::Cosine,
            seed: 0,
            tau: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_attn_op > 0.0) {
            return Err(DashError::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(DashError::Config("batch and seq_len must be positive".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(DashError::Config(
                "tau must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for a named parameter at `step`.
    pub fn lr_for(&self, name: &str, step: usize) -> f64 {
        let base = if ParamKind::of(name).is_attention_operator() {
            self.lr_attn_op
        } else {
            self.lr_main
        };
        base * self.schedule.factor(step, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    out
}

/// Loss on one batch plus a gradient for every parameter name. Frozen
/// parameters are reported with all-zero gradients.
pub struct StepResult {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

fn collect_grads(tape: &Tape, params: &Parameters, bound: &ModelParams<NodeId>, loss: NodeId) -> Result<StepResult> {
    let mut grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let mut out = BTreeMap::new();
    for ((name, id), (_, p)) in bound.named().into_iter().zip(params.named()) {
        let g = grads.take(*id).unwrap_or_else(|| Tensor::zeros(p.shape()));
        out.insert(name, g);
    }
    Ok(StepResult {
        loss: value,
        grads: out,
    })
}

/// Mean next-token cross-entropy: position `t` predicts token `t+1`; the
/// last position of each sequence has no target and is masked out.
pub fn cross_entropy_loss(tape: &mut Tape, logits: NodeId, batch: &[Vec<usize>]) -> Result<NodeId> {
    let t = batch[0].len();
    if t < 2 {
        return Err(DashError::Config("cross-entropy needs sequences of length >= 2".into()));
    }
    let mut targets = Vec::with_capacity(batch.len() * t);
    let mut mask = Vec::with_capacity(batch.len() * t);
    for seq in batch {
        for pos in 0..t {
            let last = pos + 1 == t;
            targets.push(if last { 0 } else { seq[pos + 1] });
            mask.push(if last { 0.0 } else { 1.0 });
        }
    }
    let count = (batch.len() * (t - 1)) as f64;
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.gather(log_probs, &targets)?;
    let mask = tape.constant(Tensor::vector(mask));
    let kept = tape.mul(picked, mask)?;
    let total = tape.sum(kept)?;
    tape.scale(total, -1.0 / count)
}

fn is_linear(name: &str) -> bool {
    ParamKind::of(name) == ParamKind::Linear
}

/// Parameters used by `arch`: a layer's attention projections only when it
/// runs FULL or WINDOW, its linear weights only when it runs LINEAR.
pub fn used_by(arch: &HybridArch, name: &str) -> bool {
    match (ParamKind::of(name), layer_of(name)) {
        (ParamKind::Attention, Some(l)) => arch.ops()[l].uses_attention_weights(),
        (ParamKind::Linear, Some(l)) => arch.ops()[l] == OperatorKind::Linear,
        _ => true,
    }
}

/// Teacher cross-entropy on one batch, all-FULL, linear weights untouched.
pub fn teacher_step(spec: &ModelSpec, params: &Parameters, batch: &[Vec<usize>]) -> Result<StepResult> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |n| !is_linear(n));
    let mixers = LayerMixer::from_arch(&HybridArch::all_full(spec.layers));
    let out = model_forward(&mut tape, spec, &bound, batch, &mixers)?;
    let loss = cross_entropy_loss(&mut tape, out.logits, batch)?;
    collect_grads(&tape, params, &bound, loss)
}

/// Post-mixer states of the all-FULL teacher, one `[batch·T, d]` tensor per layer.
pub fn teacher_states(spec: &ModelSpec, teacher: &Parameters, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, |_| false);
    let mixers = LayerMixer::from_arch(&HybridArch::all_full(spec.layers));
    let out = model_forward(&mut tape, spec, &bound, batch, &mixers)?;
    Ok(out.post_mixer.iter().map(|&u| tape.value(u).clone()).collect())
}

/// `Σ_l (1/T)·‖U_teacher − U_student‖²`, averaged over the sequences of the batch.
pub fn alignment_loss(tape: &mut Tape, teacher: &[Tensor], student: &[NodeId], seq_len: usize) -> Result<NodeId> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(DashError::Config(
            "alignment needs one teacher state per student layer".into(),
        ));
    }
    let batch = teacher[0].rows() / seq_len;
    let mut total: Option<NodeId> = None;
    for (t, &s) in teacher.iter().zip(student) {
        let t = tape.constant(t.clone());
        let d = tape.sub(t, s)?;
        let sq = tape.sq_frobenius(d)?;
        total = Some(match total {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / (seq_len * batch) as f64)
}

/// One alignment step: the student is the teacher with every mixer swapped
/// for its LINEAR candidate, and only linear weights receive gradients.
pub fn stage1_align_step(
    spec: &ModelSpec,
    teacher: &Parameters,
    student: &Parameters,
    batch: &[Vec<usize>],
) -> Result<StepResult> {
    let targets = teacher_states(spec, teacher, batch)?;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, is_linear);
    let mixers = LayerMixer::from_arch(&HybridArch::all_linear(spec.layers));
    let out = model_forward(&mut tape, spec, &bound, batch, &mixers)?;
    let loss = alignment_loss(&mut tape, &targets, &out.post_mixer, batch[0].len())?;
    collect_grads(&tape, student, &bound, loss)
}

/// Student architecture for the final distillation stage.
#[derive(Clone, Debug)]
pub enum StudentArch {
    Discrete(HybridArch),
    /// Routing probabilities per searchable layer; never accepted by distillation.
    Soft(Vec<Vec<f64>>),
}

/// One distillation step of a discrete student against the all-FULL teacher.
pub fn stage3_distill_step(
    spec: &ModelSpec,
    teacher: &Parameters,
    student: &Parameters,
    arch: &StudentArch,
    batch: &[Vec<usize>],
    tau: f64,
) -> Result<StepResult> {
    let StudentArch::Discrete(arch) = arch else {
        return Err(DashError::SoftArchitecture);
    };
    arch.check_layers(spec)?;
    let teacher_logits = crate::model::logits(spec, teacher, &HybridArch::all_full(spec.layers), batch)?;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, |n| used_by(arch, n));
    let out = model_forward(&mut tape, spec, &bound, batch, &LayerMixer::from_arch(arch))?;
    let t = tape.constant(teacher_logits);
    let loss = kl_distill_loss(&mut tape, t, out.logits, tau)?;
    collect_grads(&tape, student, &bound, loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub curve: Vec<LossPoint>,
}

/// Generic loop: draw a batch, compute a step, apply the optimizer to the
/// parameters selected by `trainable`. Deterministic given `cfg.seed`.
pub fn run_training(
    cfg: &TrainConfig,
    mut params: Parameters,
    tokens: &[u16],
    trainable: impl Fn(&str) -> bool,
    mut step_fn: impl FnMut(&Parameters, &[Vec<usize>]) -> Result<StepResult>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = random_windows(tokens, &mut rng, cfg.batch, cfg.seq_len);
        let result = step_fn(&params, &batch)?;
        if !result.loss.is_finite() {
            return Err(DashError::Diverged {
                step,
                loss: result.loss,
            });
        }
        opt.begin_step();
        for (name, p) in params.named_mut() {
            if !trainable(&name) {
                continue;
            }
            let g = &result.grads[&name];
            opt.update(&name, p, g, cfg.lr_for(&name, step), cfg.weight_decay);
        }
        curve.push(LossPoint {
            step,
            loss: result.loss,
            lr: cfg.lr_main * cfg.schedule.factor(step, cfg.steps),
        });
    }
    Ok(TrainOutcome { params, curve })
}

/// Trains the all-FULL teacher with next-token cross-entropy.
pub fn train_teacher(spec: &ModelSpec, init: Parameters, tokens: &[u16], cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training(cfg, init, tokens, |n| !is_linear(n), |p, b| teacher_step(spec, p, b))
}

/// Initializes every linear candidate from its layer's attention projections
/// and aligns all of them jointly against the frozen teacher.
pub fn align_candidates(
    spec: &ModelSpec,
    teacher: &Parameters,
    tokens: &[u16],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut student = teacher.clone();
    student.copy_attention_into_linear();
    run_training(cfg, student, tokens, is_linear, |p, b| {
        stage1_align_step(spec, teacher, p, b)
    })
}

/// Final distillation of a discrete student; every parameter the
/// architecture uses is trained, with the attention-operator learning rate
/// applied to the shared attention projections.
pub fn distill(
    spec: &ModelSpec,
    teacher: &Parameters,
    student: Parameters,
    arch: &HybridArch,
    tokens: &[u16],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let student_arch = StudentArch::Discrete(arch.clone());
    run_training(
        cfg,
        student,
        tokens,
        |n| used_by(arch, n),
        |p, b| stage3_distill_step(spec, teacher, p, &student_arch, b, cfg.tau),
    )
}

/// Mean next-token cross-entropy of the all-FULL model over fixed batches.
pub fn heldout_cross_entropy(spec: &ModelSpec, params: &Parameters, batches: &[Vec<Vec<usize>>]) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let out = model_forward(
            &mut tape,
            spec,
            &bound,
            batch,
            &LayerMixer::from_arch(&HybridArch::all_full(spec.layers)),
        )?;
        let loss = cross_entropy_loss(&mut tape, out.logits, batch)?;
        total += tape.value(loss).item();
    }
    Ok(total / batches.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::search::kl_divergence;

    fn spec() -> ModelSpec {
        ModelSpec {
            layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab: 10,
            max_seq_len: 12,
            window: 3,
            ffn_mult: 2,
        }
    }

    fn tokens(n: usize, seed: u64) -> Vec<u16> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A period-5 pattern with noise: learnable but not trivial.
        (0..n)
            .map(|i| {
                if rng.gen::<f64>() < 0.1 {
                    rng.gen_range(0..10)
                } else {
                    (i % 5) as u16
                }
            })
            .collect()
    }

    fn batch(seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_windows(&tokens(500, seed), &mut rng, 2, 8)
    }

    fn cfg(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            seq_len: 8,
            ..TrainConfig::new(stage)
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_cross_entropy() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[8, 10]));
        let b = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let l = cross_entropy_loss(&mut tape, z, &b).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_steps_return_initialization() {
        let s = spec();
        let init = Parameters::init(&s, 1);
        let out = train_teacher(&s, init.clone(), &tokens(200, 1), &cfg(Stage::Teacher, 0)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let s = spec();
        let data = tokens(3000, 2);
        let c = TrainConfig {
            lr_main: 1e-2,
            lr_attn_op: 1e-2,
            ..cfg(Stage::Teacher, 120)
        };
        let a = train_teacher(&s, Parameters::init(&s, 3), &data, &c).unwrap();
        let b = train_teacher(&s, Parameters::init(&s, 3), &data, &c).unwrap();
        assert_eq!(a.params, b.params);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let held: Vec<_> = (0..4).map(|_| random_windows(&data, &mut rng, 2, 8)).collect();
        assert!(heldout_cross_entropy(&s, &a.params, &held).unwrap() < 10f64.ln());
        // Linear candidates are not part of the teacher.
        let init = Parameters::init(&s, 3);
        assert_eq!(
            a.params.fingerprint(|n| ParamKind::of(n) == ParamKind::Linear),
            init.fingerprint(|n| ParamKind::of(n) == ParamKind::Linear)
        );
    }

    #[test]
    fn alignment_is_zero_against_copied_states() {
        let s = spec();
        let p = Parameters::init(&s, 4);
        let b = batch(4);
        let states = teacher_states(&s, &p, &b).unwrap();
        let mut tape = Tape::new();
        let copies: Vec<NodeId> = states.iter().map(|u| tape.constant(u.clone())).collect();
        let l = alignment_loss(&mut tape, &states, &copies, 8).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn alignment_gradients_reach_only_linear_weights() {
        let s = spec();
        let teacher = Parameters::init(&s, 5);
        let mut student = teacher.clone();
        student.copy_attention_into_linear();
        let r = stage1_align_step(&s, &teacher, &student, &batch(5)).unwrap();
        assert!(r.loss >= 0.0);
        let mut linear_signal = 0.0;
        for (name, g) in &r.grads {
            if ParamKind::of(name) == ParamKind::Linear {
                linear_signal += g.data().iter().map(|v| v.abs()).sum::<f64>();
            } else {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name} received a gradient");
            }
        }
        assert!(linear_signal > 0.0);
    }

    #[test]
    fn alignment_loss_decreases() {
        let s = spec();
        let data = tokens(2000, 6);
        let teacher = Parameters::init(&s, 6);
        let c = TrainConfig {
            lr_main: 1e-2,
            ..cfg(Stage::Align, 200)
        };
        let out = align_candidates(&s, &teacher, &data, &c).unwrap();
        let mean = |xs: &[LossPoint]| xs.iter().map(|p| p.loss).sum::<f64>() / xs.len() as f64;
        assert!(out.curve.iter().all(|p| p.loss >= 0.0));
        let (first, last) = (mean(&out.curve[..40]), mean(&out.curve[160..]));
        assert!(last < first, "alignment loss went from {first} to {last}");
        let frozen = |n: &str| ParamKind::of(n) != ParamKind::Linear;
        assert_eq!(out.params.fingerprint(frozen), teacher.fingerprint(frozen));
    }

    #[test]
    fn distillation_of_identical_teacher_is_zero() {
        let s = spec();
        let p = Parameters::init(&s, 7);
        let arch = StudentArch::Discrete(HybridArch::all_full(3));
        for tau in [0.5, 1.0, 4.0] {
            let r = stage3_distill_step(&s, &p, &p, &arch, &batch(7), tau).unwrap();
            assert_eq!(r.loss, 0.0);
        }
    }

    #[test]
    fn distillation_at_unit_temperature_is_token_averaged_kl() {
        let s = spec();
        let teacher = Parameters::init(&s, 8);
        let mut student = teacher.clone();
        student.copy_attention_into_linear();
        let arch = HybridArch::new(vec![OperatorKind::Full, OperatorKind::Linear, OperatorKind::Window]);
        let b = batch(8);
        let r = stage3_distill_step(&s, &teacher, &student, &StudentArch::Discrete(arch.clone()), &b, 1.0).unwrap();
        let zt = crate::model::logits(&s, &teacher, &HybridArch::all_full(3), &b).unwrap();
        let zs = crate::model::logits(&s, &student, &arch, &b).unwrap();
        assert!((r.loss - kl_divergence(&zt, &zs, 1.0)).abs() < 1e-13);
        for (name, g) in &r.grads {
            let moved = g.data().iter().any(|&v| v != 0.0);
            assert_eq!(moved, used_by(&arch, name), "{name}");
        }
    }

    #[test]
    fn soft_student_is_rejected() {
        let s = spec();
        let p = Parameters::init(&s, 9);
        let soft = StudentArch::Soft(vec![vec![0.5, 0.5]; 2]);
        assert!(matches!(
            stage3_distill_step(&s, &p, &p, &soft, &batch(9), 1.0),
            Err(DashError::SoftArchitecture)
        ));
    }

    #[test]
    fn two_learning_rate_groups() {
        let c = TrainConfig {
            lr_main: 2e-3,
            lr_attn_op: 5e-4,
            schedule: LrSchedule::Constant,
            ..cfg(Stage::Distill, 10)
        };
        assert_eq!(c.lr_for("layers.1.attn.wq", 3), 5e-4);
        assert_eq!(c.lr_for("layers.1.linear.wq", 3), 5e-4);
        assert_eq!(c.lr_for("layers.1.ffn_in", 3), 2e-3);
        assert_eq!(c.lr_for("embed", 9), 2e-3);
    }

    #[test]
    fn nan_loss_aborts() {
        let s = spec();
        let err = run_training(
            &cfg(Stage::Teacher, 5),
            Parameters::init(&s, 1),
            &tokens(100, 1),
            |_| true,
            |p, _| {
                Ok(StepResult {
                    loss: f64::NAN,
                    grads: p
                        .named()
                        .into_iter()
                        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
                        .collect(),
                })
            },
        )
        .unwrap_err();
        assert!(matches!(err, DashError::Diverged { step: 0, .. }));
    }

    #[test]
    fn loss_curve_csv_format() {
        let csv = loss_curve_csv(&[LossPoint {
            step: 0,
            loss: 2.5,
            lr: 0.001,
        }]);
        assert_eq!(csv, "step,loss,lr\n0,2.5,0.001\n");
    }
}

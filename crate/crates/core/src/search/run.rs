use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anneal::anneal_schedule;
use super::discretize::{discretize, realized_budget, routing_diagnostics, RoutingDiagnostics};
use super::loss::{cost_loss, kl_distill_loss, search_loss};
use super::routing::{routing_probs_node, ArchState, CandidateSpace};
use crate::autodiff::{Gradients, NodeId, Tape, Tensor};
use crate::corpus::random_windows;
use crate::error::{DashError, Result};
use crate::model::{logits, model_forward, HybridArch, LayerMixer, ModelParams, ModelSpec, OperatorKind, Parameters};
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda: f64,
    pub tau: f64,
    /// Micro-steps; each draws one batch.
    pub steps: usize,
    /// Micro-steps per update of alpha.
    pub grad_accum: usize,
    pub lr_alpha: f64,
    pub t_arch_initial: f64,
    pub t_arch_final: f64,
    pub anneal_steps: usize,
    pub seed: u64,
    pub space: CandidateSpace,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 0.01,
            tau: 1.0,
            steps: 1500,
            grad_accum: 8,
            lr_alpha: 0.1,
            t_arch_initial: 1.0,
            t_arch_final: 0.1,
            anneal_steps: 1500,
            seed: 0,
            space: CandidateSpace::Tri,
            batch: 4,
            seq_len: 128,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DashError::Config(format!("search: {m}")));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if self.tau.is_nan() || self.tau <= 0.0 || self.lr_alpha.is_nan() || self.lr_alpha <= 0.0 {
            return bad("tau and lr_alpha must be positive");
        }
        if self.t_arch_final.is_nan()
            || self.t_arch_final <= 0.0
            || self.t_arch_initial.is_nan()
            || self.t_arch_initial < self.t_arch_final
        {
            return bad("need t_arch_initial >= t_arch_final > 0");
        }
        if self.grad_accum == 0 || self.batch == 0 || self.seq_len == 0 {
            return bad("grad_accum, batch and seq_len must be positive");
        }
        Ok(())
    }

    /// Same config with annealing disabled (constant temperature 1).
    pub fn without_annealing(&self) -> SearchConfig {
        SearchConfig {
            t_arch_initial: 1.0,
            t_arch_final: 1.0,
            ..self.clone()
        }
    }

    pub fn t_arch_at(&self, step: usize) -> f64 {
        anneal_schedule(step, self.t_arch_initial, self.t_arch_final, self.anneal_steps)
    }
}

/// One row of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub step: usize,
    pub l_kl: f64,
    pub l_cost: f64,
    pub l_search: f64,
    pub t_arch: f64,
}

pub fn search_log_csv(records: &[SearchRecord]) -> String {
    let mut out = String::from("step,L_KL,L_cost,L_search,T_arch\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.l_kl, r.l_cost, r.l_search, r.t_arch
        ));
    }
    out
}

/// Loss value and alpha gradient for one batch.
pub struct SearchEval {
    pub record: SearchRecord,
    pub alpha_grad: Tensor,
}

/// Mixers for a soft model: layer 0 FULL, every other layer a soft mixture
/// driven by the matching row of `probs`.
pub fn soft_mixers(tape: &mut Tape, probs: NodeId, space: CandidateSpace, layers: usize) -> Result<Vec<LayerMixer>> {
    let mut mixers = vec![LayerMixer::Discrete(OperatorKind::Full)];
    for l in 1..layers {
        let row = tape.slice_rows(probs, l - 1, l)?;
        mixers.push(LayerMixer::Soft {
            probs: row,
            candidates: space.candidates().to_vec(),
        });
    }
    Ok(mixers)
}

/// Rejects any non-zero gradient that reached a model weight.
pub fn check_frozen(bound: &ModelParams<NodeId>, grads: &Gradients) -> Result<()> {
    for (name, id) in bound.named() {
        if let Some(g) = grads.get(*id) {
            if g.data().iter().any(|&v| v != 0.0) {
                return Err(DashError::FreezeViolation(name));
            }
        }
    }
    Ok(())
}

/// Nodes of the search objective built on a tape.
pub struct SearchGraph {
    pub kl: NodeId,
    pub cost: NodeId,
    pub loss: NodeId,
    pub bound: ModelParams<NodeId>,
}

/// Builds the search loss for `alpha` (any node of shape `[L−1, |O|]`) with
/// all model weights bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn search_graph(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &Parameters,
    alpha: NodeId,
    t_arch: f64,
    space: CandidateSpace,
    teacher_logits: &Tensor,
    batch: &[Vec<usize>],
    cfg: &SearchConfig,
) -> Result<SearchGraph> {
    let bound = params.bind(tape, |_| false);
    let probs = routing_probs_node(tape, alpha, t_arch)?;
    let mixers = soft_mixers(tape, probs, space, spec.layers)?;
    let out = model_forward(tape, spec, &bound, batch, &mixers)?;
    let teacher = tape.constant(teacher_logits.clone());
    let kl = kl_distill_loss(tape, teacher, out.logits, cfg.tau)?;
    let cost_vec = space.cost_vector(spec.window, batch[0].len());
    let cost = cost_loss(tape, probs, &cost_vec)?;
    let loss = search_loss(tape, kl, cost, cfg.lambda)?;
    Ok(SearchGraph { kl, cost, loss, bound })
}

/// Search loss on one batch against precomputed teacher logits, with the
/// gradient on alpha only.
pub fn search_eval(
    spec: &ModelSpec,
    params: &Parameters,
    state: &ArchState,
    teacher_logits: &Tensor,
    batch: &[Vec<usize>],
    cfg: &SearchConfig,
) -> Result<SearchEval> {
    let mut tape = Tape::new();
    let alpha = tape.param(state.alpha.clone());
    let g = search_graph(
        &mut tape,
        spec,
        params,
        alpha,
        state.t_arch,
        state.space,
        teacher_logits,
        batch,
        cfg,
    )?;
    let mut grads = tape.backward(g.loss)?;
    check_frozen(&g.bound, &grads)?;
    let alpha_grad = grads.take(alpha).expect("alpha is a parameter");
    let l_search = tape.value(g.loss).item();
    if !l_search.is_finite() {
        return Err(DashError::Diverged {
            step: 0,
            loss: l_search,
        });
    }
    Ok(SearchEval {
        record: SearchRecord {
            step: 0,
            l_kl: tape.value(g.kl).item(),
            l_cost: tape.value(g.cost).item(),
            l_search,
            t_arch: state.t_arch,
        },
        alpha_grad,
    })
}

/// Stateful search over alpha with gradient accumulation.
pub struct Searcher<'a> {
    spec: &'a ModelSpec,
    params: &'a Parameters,
    cfg: SearchConfig,
    state: ArchState,
    opt: AdamW,
    accum: Tensor,
    accumulated: usize,
    step: usize,
    teacher_arch: HybridArch,
}

impl<'a> Searcher<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a Parameters, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let mut state = ArchState::new(spec.layers, cfg.space)?;
        state.t_arch = cfg.t_arch_at(0);
        Ok(Searcher {
            spec,
            params,
            accum: Tensor::zeros(state.alpha.shape()),
            state,
            opt: AdamW::new(),
            accumulated: 0,
            step: 0,
            teacher_arch: HybridArch::all_full(spec.layers),
            cfg,
        })
    }

    pub fn state(&self) -> &ArchState {
        &self.state
    }

    pub fn into_state(self) -> ArchState {
        self.state
    }

    pub fn micro_steps_done(&self) -> usize {
        self.step
    }

    /// One micro-step: loss and alpha gradient on `batch`, and an update of
    /// alpha once `grad_accum` gradients have been accumulated.
    pub fn micro_step(&mut self, batch: &[Vec<usize>]) -> Result<SearchRecord> {
        self.state.t_arch = self.cfg.t_arch_at(self.step);
        let teacher = logits(self.spec, self.params, &self.teacher_arch, batch)?;
        let eval =
            search_eval(self.spec, self.params, &self.state, &teacher, batch, &self.cfg).map_err(|e| match e {
                DashError::Diverged { loss, .. } => DashError::Diverged { step: self.step, loss },
                other => other,
            })?;
        let scale = 1.0 / self.cfg.grad_accum as f64;
        for (a, g) in self.accum.data_mut().iter_mut().zip(eval.alpha_grad.data()) {
            *a += scale * g;
        }
        self.accumulated += 1;
        if self.accumulated == self.cfg.grad_accum {
            self.opt.begin_step();
            self.opt
                .update("alpha", &mut self.state.alpha, &self.accum, self.cfg.lr_alpha, 0.0);
            self.accum = Tensor::zeros(self.state.alpha.shape());
            self.accumulated = 0;
        }
        let record = SearchRecord {
            step: self.step,
            ..eval.record
        };
        self.step += 1;
        Ok(record)
    }

    /// Sets the temperature to its end-of-run value.
    pub fn finish(mut self) -> ArchState {
        self.state.t_arch = self.cfg.t_arch_at(self.step);
        self.state
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub state: ArchState,
    pub arch: HybridArch,
    pub diagnostics: RoutingDiagnostics,
    pub budget: f64,
    pub log: Vec<SearchRecord>,
}

/// Full search run on random windows of `tokens`, seeded by `cfg.seed`.
pub fn run_search(spec: &ModelSpec, params: &Parameters, tokens: &[u16], cfg: &SearchConfig) -> Result<SearchOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut searcher = Searcher::new(spec, params, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = random_windows(tokens, &mut rng, cfg.batch, cfg.seq_len);
        log.push(searcher.micro_step(&batch)?);
    }
    let state = searcher.finish();
    Ok(outcome(state, spec, cfg.seq_len, log))
}

pub(crate) fn outcome(state: ArchState, spec: &ModelSpec, seq_len: usize, log: Vec<SearchRecord>) -> SearchOutcome {
    let arch = discretize(&state);
    SearchOutcome {
        diagnostics: routing_diagnostics(&state),
        budget: realized_budget(&arch, spec.window, seq_len),
        arch,
        state,
        log,
    }
}

/// The `budget` searchable layers with the highest final FULL probability
/// become FULL, the rest LINEAR (binary space). Used when no searched
/// architecture lands exactly on a required budget.
pub fn project_to_budget(state: &ArchState, budget: usize) -> Result<HybridArch> {
    let searchable = state.searchable_layers();
    if budget > searchable {
        return Err(DashError::BudgetOutOfRange {
            budget,
            layers: searchable,
        });
    }
    let probs = state.probs();
    let mut order: Vec<usize> = (0..searchable).collect();
    // Stable sort keeps earlier layers first on exact ties.
    order.sort_by(|&a, &b| probs[b][0].total_cmp(&probs[a][0]));
    let mut ops = vec![OperatorKind::Linear; searchable + 1];
    for &r in order.iter().take(budget) {
        ops[r + 1] = OperatorKind::Full;
    }
    Ok(HybridArch::new(ops))
}

/// Searches in the binary space for an architecture with exactly `budget`
/// FULL layers by bisecting λ on a log scale. Returns the outcome whose
/// architecture meets the budget (projecting the closest run onto it if no
/// λ tried lands exactly) and the λ used.
pub fn search_for_budget(
    spec: &ModelSpec,
    params: &Parameters,
    tokens: &[u16],
    cfg: &SearchConfig,
    budget: usize,
    max_runs: usize,
) -> Result<(SearchOutcome, f64)> {
    let cfg = SearchConfig {
        space: CandidateSpace::Binary,
        ..cfg.clone()
    };
    let (mut lo, mut hi) = (1e-4f64.ln(), 1.0f64.ln());
    let mut best: Option<(SearchOutcome, f64)> = None;
    for _ in 0..max_runs.max(1) {
        let lambda = ((lo + hi) / 2.0).exp();
        let run = run_search(spec, params, tokens, &SearchConfig { lambda, ..cfg.clone() })?;
        let n_full = run.arch.count(OperatorKind::Full);
        let miss = n_full.abs_diff(budget);
        let better = best
            .as_ref()
            .is_none_or(|(b, _)| miss < b.arch.count(OperatorKind::Full).abs_diff(budget));
        if n_full > budget {
            lo = lambda.ln();
        } else {
            hi = lambda.ln();
        }
        if better {
            best = Some((run, lambda));
        }
        if miss == 0 {
            break;
        }
    }
    let (mut run, lambda) = best.expect("at least one run");
    if run.arch.count(OperatorKind::Full) != budget {
        run.arch = project_to_budget(&run.state, budget)?;
        run.budget = realized_budget(&run.arch, spec.window, cfg.seq_len);
    }
    Ok((run, lambda))
}

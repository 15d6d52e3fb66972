use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::testing::random;
use crate::autodiff::{finite_difference_check, Tape, Tensor};
use crate::error::DashError;
use crate::model::{logits, HybridArch, ModelSpec, OperatorKind, Parameters};

fn toy_spec() -> ModelSpec {
    ModelSpec {
        layers: 4,
        d_model: 8,
        n_heads: 2,
        vocab: 9,
        max_seq_len: 8,
        window: 2,
        ffn_mult: 2,
    }
}

fn random_batch(spec: &ModelSpec, batch: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..len).map(|_| rng.gen_range(0..spec.vocab)).collect())
        .collect()
}

fn toy_params(spec: &ModelSpec) -> Parameters {
    let mut p = Parameters::init(spec, 5);
    p.copy_attention_into_linear();
    p
}

fn cfg(lambda: f64) -> SearchConfig {
    SearchConfig {
        lambda,
        steps: 50,
        grad_accum: 1,
        anneal_steps: 50,
        batch: 2,
        seq_len: 6,
        ..SearchConfig::default()
    }
}

#[test]
fn search_loss_alpha_gradient_matches_finite_differences() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let batch = random_batch(&spec, 2, 6, 1);
    let teacher = logits(&spec, &params, &HybridArch::all_full(spec.layers), &batch).unwrap();
    let config = cfg(0.3);
    let alpha = random(&[3, 3], 9);
    let report = finite_difference_check(
        |tape, a| {
            search_graph(
                tape,
                &spec,
                &params,
                a,
                0.7,
                CandidateSpace::Tri,
                &teacher,
                &batch,
                &config,
            )
            .map(|g| g.loss)
        },
        &alpha,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_lambda_loss_is_kl_and_identical_logits_leave_cost() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let batch = random_batch(&spec, 1, 5, 2);
    // One-hot on FULL everywhere: the soft student is the teacher.
    let alpha = Tensor::from_rows(&vec![vec![60.0, 0.0, 0.0]; 3]).unwrap();
    let state = ArchState::from_alpha(alpha, CandidateSpace::Tri, 1.0).unwrap();
    let teacher = logits(&spec, &params, &HybridArch::all_full(spec.layers), &batch).unwrap();
    let with_cost = search_eval(&spec, &params, &state, &teacher, &batch, &cfg(0.5)).unwrap();
    assert!(with_cost.record.l_kl.abs() < 1e-20);
    assert!((with_cost.record.l_search - 0.5 * with_cost.record.l_cost).abs() < 1e-12);
    assert!((with_cost.record.l_cost - 3.0).abs() < 1e-12);
    let state = ArchState::new(spec.layers, CandidateSpace::Tri).unwrap();
    let no_cost = search_eval(&spec, &params, &state, &teacher, &batch, &cfg(0.0)).unwrap();
    assert_eq!(no_cost.record.l_search, no_cost.record.l_kl);
}

#[test]
fn frozen_check_rejects_weight_gradients() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |n| n == "head");
    let s = tape.sum(bound.head).unwrap();
    let grads = tape.backward(s).unwrap();
    match check_frozen(&bound, &grads) {
        Err(DashError::FreezeViolation(name)) => assert_eq!(name, "head"),
        other => panic!("expected freeze violation, got {other:?}"),
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let s = tape.sum(bound.head).unwrap();
    assert!(check_frozen(&bound, &tape.backward(s).unwrap()).is_ok());
}

#[test]
fn search_run_leaves_weights_untouched() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let before = params.fingerprint(|_| true);
    let tokens: Vec<u16> = random_batch(&spec, 1, 400, 4)[0].iter().map(|&t| t as u16).collect();
    let out = run_search(&spec, &params, &tokens, &SearchConfig { steps: 6, ..cfg(0.1) }).unwrap();
    assert_eq!(params.fingerprint(|_| true), before);
    assert_eq!(out.log.len(), 6);
    assert_eq!(out.arch.ops()[0], OperatorKind::Linear);
    assert!(out.log.windows(2).all(|w| w[1].t_arch <= w[0].t_arch));
}

#[test]
fn large_lambda_pushes_toward_linear() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let batch = random_batch(&spec, 2, 6, 3);
    let mut searcher = Searcher::new(&spec, &params, cfg(10.0).without_annealing()).unwrap();
    let p_linear = |s: &Searcher| s.state().probs().iter().map(|p| p[2]).sum::<f64>();
    let mut last = p_linear(&searcher);
    for _ in 0..50 {
        searcher.micro_step(&batch).unwrap();
        let now = p_linear(&searcher);
        assert!(now > last, "p_LINEAR fell from {last} to {now}");
        last = now;
    }
}

#[test]
fn teacher_preservation_favours_full_without_cost() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let batch = random_batch(&spec, 2, 6, 6);
    let mut searcher = Searcher::new(&spec, &params, cfg(0.0).without_annealing()).unwrap();
    let p_full = |s: &Searcher| s.state().probs().iter().map(|p| p[0]).sum::<f64>() / 3.0;
    let initial = p_full(&searcher);
    for _ in 0..200 {
        searcher.micro_step(&batch).unwrap();
    }
    assert!(p_full(&searcher) > initial);
}

#[test]
fn gradient_accumulation_updates_every_k_steps() {
    let spec = toy_spec();
    let params = toy_params(&spec);
    let batch = random_batch(&spec, 1, 4, 7);
    let mut searcher = Searcher::new(
        &spec,
        &params,
        SearchConfig {
            grad_accum: 3,
            ..cfg(0.2)
        },
    )
    .unwrap();
    let a0 = searcher.state().alpha.clone();
    searcher.micro_step(&batch).unwrap();
    searcher.micro_step(&batch).unwrap();
    assert_eq!(searcher.state().alpha, a0);
    searcher.micro_step(&batch).unwrap();
    assert_ne!(searcher.state().alpha, a0);
}

#[test]
fn projection_meets_budget_exactly() {
    let alpha = Tensor::from_rows(&[vec![0.3, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let s = ArchState::from_alpha(alpha, CandidateSpace::Binary, 1.0).unwrap();
    assert_eq!(project_to_budget(&s, 2).unwrap().to_string(), "L L F L F");
    assert_eq!(project_to_budget(&s, 0).unwrap(), HybridArch::all_linear(5));
    assert!(project_to_budget(&s, 5).is_err());
}

#[test]
fn search_log_has_expected_header() {
    let csv = search_log_csv(&[SearchRecord {
        step: 0,
        l_kl: 0.5,
        l_cost: 1.0,
        l_search: 0.6,
        t_arch: 1.0,
    }]);
    assert_eq!(csv, "step,L_KL,L_cost,L_search,T_arch\n0,0.5,1,0.6,1\n");
}

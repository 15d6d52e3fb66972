#![allow(dead_code)]

use dash::corpus::GeneratorSpec;
use dash::eval::RecallTask;
use dash::harness::RunConfig;
use dash::model::ModelSpec;

/// A configuration small enough that every stage finishes in well under a
/// second, used to exercise plumbing rather than learning.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelSpec {
            layers: 4,
            d_model: 16,
            n_heads: 2,
            vocab: 24,
            max_seq_len: 16,
            window: 4,
            ffn_mult: 2,
        },
        ..RunConfig::default()
    };
    cfg.corpus.tokens = 20_000;
    cfg.corpus.generator = GeneratorSpec {
        vocab: 24,
        n_keys: 4,
        n_values: 4,
        pairs: 2,
        gap: 4,
        segment_rate: 0.05,
        successors: 3,
        smoothing: 0.05,
        table_seed: 3,
    };
    for t in [&mut cfg.teacher, &mut cfg.align, &mut cfg.distill] {
        t.steps = 12;
        t.batch = 2;
        t.seq_len = 16;
    }
    cfg.search.steps = 8;
    cfg.search.grad_accum = 2;
    cfg.search.anneal_steps = 8;
    cfg.search.batch = 2;
    cfg.search.seq_len = 16;
    cfg.eval.heldout_batches = 2;
    cfg.eval.batch = 2;
    cfg.eval.seq_len = 16;
    cfg.eval.recall = RecallTask {
        pairs: 2,
        gap: 4,
        trials: 16,
        seed: 0,
    };
    cfg.sweep.lambdas = vec![0.01, 0.1];
    cfg.sweep.seeds = vec![0, 1];
    cfg
}

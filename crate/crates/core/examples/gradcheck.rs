//! Checks the architecture-logit gradient of the search objective against
//! central finite differences, then does the same for a few tape primitives.
//!
//! cargo run --release --example gradcheck

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dash::autodiff::{finite_difference_check, Tensor};
use dash::model::{logits, HybridArch, ModelSpec, Parameters};
use dash::search::{search_graph, CandidateSpace, SearchConfig};

fn main() {
    let spec = ModelSpec {
        layers: 4,
        d_model: 32,
        n_heads: 2,
        vocab: 32,
        max_seq_len: 16,
        window: 4,
        ffn_mult: 2,
    };
    let mut params = Parameters::init(&spec, 1);
    params.copy_attention_into_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..16).map(|_| rng.gen_range(0..32)).collect())
        .collect();
    let teacher = logits(&spec, &params, &HybridArch::all_full(spec.layers), &batch).unwrap();

    for space in [CandidateSpace::Tri, CandidateSpace::Binary] {
        let cfg = SearchConfig {
            lambda: 0.1,
            space,
            batch: 2,
            seq_len: 16,
            ..SearchConfig::default()
        };
        let alpha = Tensor::matrix(
            spec.layers - 1,
            space.len(),
            (0..(spec.layers - 1) * space.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let report = finite_difference_check(
            |tape, a| search_graph(tape, &spec, &params, a, 0.5, space, &teacher, &batch, &cfg).map(|g| g.loss),
            &alpha,
            1e-5,
            1e-5,
        )
        .unwrap();
        println!(
            "{space:>6} space: max relative error {:.2e}, max absolute {:.2e}  (worst coordinate: analytic {:+.6e}, numeric {:+.6e})",
            report.max_rel_error, report.max_abs_error, report.analytic_at_worst, report.numeric_at_worst
        );
    }

    let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37 + 0.2).sin()).collect()).unwrap();
    type Probe = fn(&mut dash::Tape, dash::NodeId) -> dash::Result<dash::NodeId>;
    let primitives: [(&str, Probe); 3] = [
        ("log_softmax", |t, x| {
            let y = t.log_softmax(x)?;
            let y = t.mul(y, x)?;
            t.sum(y)
        }),
        ("l2_normalize", |t, x| {
            let y = t.l2_normalize(x, 1e-8)?;
            let y = t.mul(y, x)?;
            t.sum(y)
        }),
        ("silu", |t, x| {
            let y = t.silu(x)?;
            t.sq_frobenius(y)
        }),
    ];
    for (name, f) in primitives {
        let r = finite_difference_check(f, &x, 1e-5, 1e-5).unwrap();
        println!(
            "{name:>12}: max relative error {:.2e} ({})",
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
}

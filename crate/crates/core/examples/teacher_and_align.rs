//! Trains the all-FULL teacher and the aligned LINEAR candidates, then shows
//! how much each layer costs when it alone is swapped for a cheaper operator.
//!
//! cargo run --release --example teacher_and_align [-- CONFIG.toml]
//!
//! Weights are cached in the config's output directory; delete them to retrain.

mod common;

use dash::corpus::MarkovTable;
use dash::eval::eval_heldout_kl;
use dash::model::{HybridArch, OperatorKind};
use dash::training::heldout_cross_entropy;

fn main() {
    let p = common::prepare();
    let spec = &p.cfg.model;
    let table = MarkovTable::generate(&p.corpus.spec);
    let ce = heldout_cross_entropy(spec, &p.teacher, &p.heldout.batches).unwrap();
    println!(
        "teacher held-out cross-entropy {ce:.4} nats (chain entropy rate {:.4}, uniform {:.4})",
        table.entropy_rate(),
        (spec.vocab as f64).ln()
    );

    let kl = |arch: &HybridArch| eval_heldout_kl(spec, &p.candidates, arch, &p.heldout).unwrap();
    println!(
        "all-LINEAR student, before distillation: KL {:.4}",
        kl(&HybridArch::all_linear(spec.layers))
    );
    println!("\nsingle-layer swaps (all other layers FULL):");
    println!("{:>6} {:>10} {:>10}", "layer", "→ WINDOW", "→ LINEAR");
    for l in 0..spec.layers {
        let base = HybridArch::all_full(spec.layers);
        println!(
            "{l:>6} {:>10.4} {:>10.4}",
            kl(&base.with(l, OperatorKind::Window)),
            kl(&base.with(l, OperatorKind::Linear))
        );
    }
}

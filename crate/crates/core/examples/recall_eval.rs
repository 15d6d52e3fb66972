//! Associative recall accuracy as the key-value gap grows, comparing the
//! teacher with distilled students (all-LINEAR against a searched hybrid).
//!
//! cargo run --release --example recall_eval [-- CONFIG.toml]

mod common;

use dash::eval::{eval_recall_task, ModelPredictor, RecallTask};
use dash::model::HybridArch;
use dash::search::run_search;
use dash::training::distill;

fn main() {
    let p = common::prepare();
    let spec = &p.cfg.model;
    let searched = run_search(spec, &p.candidates, p.train_tokens(), &p.cfg.search)
        .unwrap()
        .arch;
    let hybrid = distill(
        spec,
        &p.teacher,
        p.candidates.clone(),
        &searched,
        p.train_tokens(),
        &p.cfg.distill,
    )
    .unwrap()
    .params;
    let linear_arch = HybridArch::all_linear(spec.layers);
    let linear = distill(
        spec,
        &p.teacher,
        p.candidates.clone(),
        &linear_arch,
        p.train_tokens(),
        &p.cfg.distill,
    )
    .unwrap()
    .params;
    let full = HybridArch::all_full(spec.layers);
    let models = [
        ("teacher", &p.teacher, &full),
        ("all-LINEAR", &linear, &linear_arch),
        ("searched", &hybrid, &searched),
    ];
    println!("searched architecture: {searched}\n");
    let base = &p.cfg.eval.recall;
    let max_gap = spec.max_seq_len - (base.prompt_len() - base.gap);
    print!("{:>12}", "gap");
    let gaps: Vec<usize> = [0, 2, 4, 8, 16, 24].into_iter().filter(|&g| g <= max_gap).collect();
    for g in &gaps {
        print!("{g:>8}");
    }
    println!();
    for (name, params, arch) in models {
        print!("{name:>12}");
        for &gap in &gaps {
            let task = RecallTask { gap, ..base.clone() };
            let predictor = ModelPredictor { spec, params, arch };
            print!("{:>8.3}", eval_recall_task(&predictor, &p.corpus.spec, &task).unwrap());
        }
        println!();
    }
    println!("\nchance level is {:.3}", 1.0 / p.corpus.spec.n_values as f64);
}

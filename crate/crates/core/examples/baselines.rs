//! Compares layer-selection rules at a fixed number of FULL layers: the
//! uniform spacing rule, greedy add, greedy remove, and searched allocation,
//! each distilled for the same number of steps.
//!
//! cargo run --release --example baselines [-- CONFIG.toml]

mod common;

use dash::baselines::{greedy_add_select, greedy_remove_select, uniform_alloc};
use dash::eval::eval_heldout_kl;
use dash::model::HybridArch;
use dash::search::search_for_budget;
use dash::training::distill;

fn main() {
    let p = common::prepare();
    let spec = &p.cfg.model;
    let budget = (spec.layers / 4).max(1);
    let (searched, lambda) =
        search_for_budget(spec, &p.candidates, p.train_tokens(), &p.cfg.search, budget, 6).unwrap();
    let add = greedy_add_select(spec, &p.candidates, budget, &p.heldout).unwrap();
    let remove = greedy_remove_select(spec, &p.candidates, budget, &p.heldout).unwrap();
    println!(
        "greedy add picked layers {:?}; greedy remove dropped {:?}",
        add.picks, remove.picks
    );
    println!("search settled on λ = {lambda:.4}\n");

    let rows: [(&str, HybridArch); 4] = [
        ("uniform", uniform_alloc(spec.layers, budget).unwrap()),
        ("greedy add", add.arch),
        ("greedy remove", remove.arch),
        ("searched", searched.arch),
    ];
    println!("{budget} FULL layers, {} distillation steps each", p.cfg.distill.steps);
    println!("{:>14}  {:<18} {:>10} {:>10}", "rule", "arch", "KL before", "KL after");
    for (name, arch) in rows {
        let before = eval_heldout_kl(spec, &p.candidates, &arch, &p.heldout).unwrap();
        let student = distill(
            spec,
            &p.teacher,
            p.candidates.clone(),
            &arch,
            p.train_tokens(),
            &p.cfg.distill,
        )
        .unwrap()
        .params;
        let after = eval_heldout_kl(spec, &student, &arch, &p.heldout).unwrap();
        println!("{name:>14}  {:<18} {before:>10.4} {after:>10.4}", arch.to_string());
    }
}

//! Sweeps the cost coefficient over the configured grid with distillation,
//! then renders the allocation strip and budget chart.
//!
//! cargo run --release --example lambda_sweep [-- CONFIG.toml]
//!
//! Set DASH_THREADS to cap the worker pool.

mod common;

use dash::harness::{budget_label, emit_report, median, report_rows, run_sweep, sweep_csv, SweepInputs};

fn main() {
    let p = common::prepare();
    let cfg = &p.cfg;
    let inputs = SweepInputs {
        spec: &cfg.model,
        teacher: &p.teacher,
        candidates: &p.candidates,
        train_tokens: p.train_tokens(),
        heldout: &p.heldout,
        search: &cfg.search,
        distill: cfg.sweep.distill.then_some(&cfg.distill),
    };
    let records = run_sweep(&inputs, &cfg.sweep.lambdas, &cfg.sweep.seeds).unwrap();
    println!(
        "{:>8} {:>5} {:>10} {:>8} {:>8} {:>9}  arch",
        "lambda", "seed", "budget", "entropy", "margin", "KL"
    );
    for r in &records {
        match &r.arch {
            Some(a) => println!(
                "{:>8} {:>5} {:>10} {:>8.3} {:>8.3} {:>9.4}  {a}",
                r.lambda,
                r.seed,
                budget_label(r.budget),
                r.avg_entropy,
                r.avg_margin,
                r.heldout_kl
            ),
            None => println!(
                "{:>8} {:>5} failed: {}",
                r.lambda,
                r.seed,
                r.error.as_deref().unwrap_or("?")
            ),
        }
    }
    println!();
    for (lambda, group) in cfg.sweep.lambdas.iter().zip(records.chunks(cfg.sweep.seeds.len())) {
        let b: Vec<f64> = group.iter().map(|r| r.budget).collect();
        let k: Vec<f64> = group.iter().map(|r| r.heldout_kl).collect();
        println!(
            "λ = {lambda:<6} median {}  median KL {:.4}",
            budget_label(median(&b).unwrap()),
            median(&k).unwrap()
        );
    }
    let dir = p.out_dir().join("example_sweep");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("sweep.csv"), sweep_csv(&records)).unwrap();
    emit_report(&report_rows(&records), cfg.model.window, cfg.search.seq_len, &dir).unwrap();
    println!(
        "\nwrote sweep.csv, report.csv, allocation.svg and budget_kl.svg to {}",
        dir.display()
    );
}

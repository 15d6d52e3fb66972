//! One architecture search, stepping the searcher by hand to watch the
//! routing probabilities sharpen as the temperature anneals.
//!
//! cargo run --release --example arch_search [-- CONFIG.toml]

mod common;

use dash::corpus::random_windows;
use dash::search::{discretize, realized_budget, routing_diagnostics, search_log_csv, Searcher};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let p = common::prepare();
    let spec = &p.cfg.model;
    let cfg = p.cfg.search.clone();
    println!(
        "λ = {}, {} micro-steps, T_arch {} → {}, {} space",
        cfg.lambda, cfg.steps, cfg.t_arch_initial, cfg.t_arch_final, cfg.space
    );
    let mut searcher = Searcher::new(spec, &p.candidates, cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = random_windows(p.train_tokens(), &mut rng, cfg.batch, cfg.seq_len);
        let rec = searcher.micro_step(&batch).unwrap();
        if step % (cfg.steps / 5).max(1) == 0 || step + 1 == cfg.steps {
            let d = routing_diagnostics(searcher.state());
            println!(
                "step {step:>4}  T_arch {:.3}  L_KL {:.4}  L_cost {:.3}  entropy {:.3}  margin {:.3}",
                rec.t_arch, rec.l_kl, rec.l_cost, d.avg_entropy, d.avg_margin
            );
        }
        log.push(rec);
    }
    let state = searcher.finish();
    println!("\nfinal routing probabilities (layer 0 is fixed):");
    for (l, probs) in state.probs().iter().enumerate() {
        let cells: Vec<String> = state
            .space
            .candidates()
            .iter()
            .zip(probs)
            .map(|(k, p)| format!("{}={p:.3}", k.mnemonic()))
            .collect();
        println!("  layer {}: {}", l + 1, cells.join("  "));
    }
    let arch = discretize(&state);
    let d = routing_diagnostics(&state);
    println!(
        "\narchitecture {arch}  budget B={}  ambiguous layers {}",
        realized_budget(&arch, spec.window, cfg.seq_len),
        d.ambiguous
    );
    std::fs::create_dir_all(p.out_dir()).unwrap();
    std::fs::write(p.out_dir().join("example_search_log.csv"), search_log_csv(&log)).unwrap();
}

//! The full pipeline in one call, writing every artifact to the config's
//! output directory: corpus → teacher → alignment → sweep → search →
//! distillation → evaluation.
//!
//! cargo run --release --example end_to_end [-- CONFIG.toml]

mod common;

use dash::harness::run_pipeline;

fn main() {
    let cfg = common::load_config();
    let out = cfg.paths.out.join("end_to_end");
    let t0 = std::time::Instant::now();
    let result = run_pipeline(&cfg, Some(&out)).unwrap();
    println!("{}", result.report);
    println!(
        "\nfinished in {:.0}s; artifacts in {}",
        t0.elapsed().as_secs_f64(),
        out.display()
    );
}

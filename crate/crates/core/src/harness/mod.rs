//! Configuration, checkpoints, the λ sweep, reports and the end-to-end pipeline.

mod checkpoint;
mod config;
mod pipeline;
mod report;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, CHECKPOINT_VERSION};
pub use config::{CorpusConfig, EvalConfig, PathsConfig, RunConfig, SweepConfig};
pub use pipeline::{build_corpus, evaluate, heldout_set, report_rows, run_pipeline, PipelineOutput};
pub use report::{allocation_strip_svg, budget_chart_svg, budget_label, emit_report, report_csv, ReportRow};
pub use sweep::{
    arch_lines, median, parse_sweep, run_sweep, sweep_csv, worker_threads, SweepInputs, SweepRecord, SWEEP_CSV_HEADER,
};

//! Architecture-only differentiable search over per-layer operator choices.

mod anneal;
mod discretize;
mod loss;
mod routing;
mod run;
#[cfg(test)]
mod tests;

pub use anneal::anneal_schedule;
pub use discretize::{
    argmax_cheapest, discretize, realized_budget, routing_diagnostics, LayerDiagnostics, RoutingDiagnostics,
    AMBIGUOUS_MARGIN,
};
pub use loss::{cost_loss, kl_distill_loss, kl_divergence, search_loss};
pub use routing::{routing_probs, routing_probs_node, ArchState, CandidateSpace};
pub use run::{
    check_frozen, project_to_budget, run_search, search_eval, search_for_budget, search_graph, search_log_csv,
    soft_mixers, SearchConfig, SearchEval, SearchGraph, SearchOutcome, SearchRecord, Searcher,
};

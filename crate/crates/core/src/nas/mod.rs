//! Two-objective NSGA-II architecture search: maximize F1, minimize the
//! parameter count.

mod evolve;
mod search;
mod sort;

pub use evolve::{crossover, default_mutation_rate, evolve, mutate, tournament};
pub use search::{
    evaluate_trial, pareto_csv, pareto_front, parse_ledger, rank_records, run_search, select_from_front,
    trial_seed, SearchConfig, SearchResult, SelectionPolicy, TrialRecord, TrialStatus, LEDGER_SCHEMA_VERSION,
    OBJECTIVES,
};
pub use sort::{crowded_cmp, crowding_distance, dominates, non_dominated_sort, rank_and_crowd, ranks, Direction};

//! Config-driven runs and sweeps with CSV output.

mod config;
mod output;
mod sweep;

pub use config::{parse_config, parse_sweep, AlgorithmSelector, ConfigError, SweepSpec};
pub use output::{
    emit_results, expulsion_path, read_expulsion, read_results, read_trace, trace_path, OutputError,
    EXPULSION_HEADER, RESULTS_HEADER, TRACE_HEADER,
};
pub use sweep::{
    execute, plan_runs, record_from, run_id, run_sweep, ResultRow, RunFailure, RunPlan, RunRecord, SweepError,
    SweepOutcome, TraceRow,
};

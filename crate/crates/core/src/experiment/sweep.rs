use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::detection::ExpulsionRow;
use crate::orchestrator::{build_dataset, run_baseline_on, run_proposed_on, Algorithm, ExperimentConfig, RunResult, Stage};

use super::config::{ConfigError, SweepSpec};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot build a pool of {threads} threads: {source}")]
    ThreadPool {
        threads: usize,
        source: rayon::ThreadPoolBuildError,
    },
}

/// One planned run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub config: ExperimentConfig,
}

/// Summary line of a completed run, as written to `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub clients: usize,
    pub clusters: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub rounds_per_cluster: usize,
    pub poison_percent: f64,
    pub expel_percent: f64,
    pub seed: u64,
    /// Rounded to 6 decimals, the precision written to disk.
    pub final_accuracy: f64,
    pub message_count: u64,
    pub parameter_volume: u64,
    pub survivors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    pub index: usize,
    pub cluster_id: usize,
    /// Rounded to 6 decimals.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub row: ResultRow,
    pub trace: Vec<TraceRow>,
    pub expulsion: Vec<ExpulsionRow>,
    pub poisoned: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutcome {
    /// Sorted by run id.
    pub records: Vec<RunRecord>,
    /// Sorted by run id.
    pub failures: Vec<RunFailure>,
}

pub(crate) fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn run_id(algorithm: Algorithm, config: &ExperimentConfig) -> String {
    match algorithm {
        Algorithm::Proposed => format!(
            "proposed_N{}_C{}_P{}_X{}_s{}",
            config.clients, config.clusters, config.poison_percent, config.expel_percent, config.seed
        ),
        Algorithm::Baseline => format!(
            "baseline_N{}_P{}_s{}",
            config.clients, config.poison_percent, config.seed
        ),
    }
}

/// Every run the sweep selects, sorted by run id.
pub fn plan_runs(spec: &SweepSpec) -> Vec<RunPlan> {
    let mut plans = Vec::new();
    for (algorithm, configs) in [
        (Algorithm::Proposed, spec.proposed_configs()),
        (Algorithm::Baseline, spec.baseline_configs()),
    ] {
        if spec.algorithms.includes(algorithm) {
            plans.extend(configs.into_iter().map(|config| RunPlan {
                run_id: run_id(algorithm, &config),
                algorithm,
                config,
            }));
        }
    }
    plans.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    plans.dedup_by(|a, b| a.run_id == b.run_id);
    plans
}

pub fn record_from(plan: &RunPlan, result: &RunResult) -> RunRecord {
    let c = &plan.config;
    RunRecord {
        row: ResultRow {
            run_id: plan.run_id.clone(),
            algorithm: plan.algorithm,
            clients: c.clients,
            clusters: c.clusters,
            rounds: c.rounds,
            epochs: c.epochs,
            batch_size: c.batch_size,
            rounds_per_cluster: c.rounds_per_cluster,
            poison_percent: c.poison_percent,
            expel_percent: c.expel_percent,
            seed: c.seed,
            final_accuracy: round6(result.final_accuracy),
            message_count: result.comm.message_count,
            parameter_volume: result.comm.parameter_volume,
            survivors: result.survivors.len(),
        },
        trace: result
            .trace
            .iter()
            .map(|t| TraceRow {
                stage: t.stage,
                index: t.index,
                cluster_id: t.cluster_id,
                accuracy: round6(t.accuracy),
            })
            .collect(),
        expulsion: result.expulsion.rows.clone(),
        poisoned: result.poisoned.clone(),
    }
}

/// Runs one plan. The dataset depends only on `N`, `P` and the seed, so
/// baseline and proposed runs of the same triple see the same data.
pub fn execute(plan: &RunPlan) -> Result<RunRecord, String> {
    let dataset = build_dataset(&plan.config).map_err(|e| e.to_string())?;
    let result = match plan.algorithm {
        Algorithm::Proposed => run_proposed_on(&plan.config, &dataset),
        Algorithm::Baseline => run_baseline_on(&plan.config, &dataset),
    }
    .map_err(|e| e.to_string())?;
    Ok(record_from(plan, &result))
}

/// Executes the sweep on `parallelism` worker threads. Results do not
/// depend on the thread count; a failing run is recorded and the rest
/// continue.
pub fn run_sweep(spec: &SweepSpec, parallelism: usize) -> Result<SweepOutcome, SweepError> {
    spec.validate()?;
    let threads = parallelism.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|source| SweepError::ThreadPool { threads, source })?;
    let plans = plan_runs(spec);
    let results: Vec<_> = pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                let outcome = execute(plan);
                match &outcome {
                    Ok(r) => log::info!("{}: accuracy {:.4}", plan.run_id, r.row.final_accuracy),
                    Err(e) => log::error!("{}: {e}", plan.run_id),
                }
                outcome
            })
            .collect()
    });
    let mut outcome = SweepOutcome::default();
    for (plan, result) in plans.iter().zip(results) {
        match result {
            Ok(record) => outcome.records.push(record),
            Err(message) => outcome.failures.push(RunFailure {
                run_id: plan.run_id.clone(),
                message,
            }),
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::{parse_sweep, AlgorithmSelector};

    #[test]
    fn product_counts() {
        let mut spec = parse_sweep("N = 20, 40\nC = 2, 4\nP = 0\nX = 0\nalgorithm = proposed").unwrap();
        assert_eq!(plan_runs(&spec).len(), 4);
        spec.algorithms = AlgorithmSelector::Both;
        assert_eq!(plan_runs(&spec).len(), 6);
        spec.algorithms = AlgorithmSelector::Baseline;
        assert_eq!(plan_runs(&spec).len(), 2);
    }

    #[test]
    fn plans_are_sorted_and_unique() {
        let spec = parse_sweep("N = 20, 40\nC = 2, 4\nP = 0, 40\nX = 0, 20\nseed = 2, 1").unwrap();
        let plans = plan_runs(&spec);
        assert_eq!(plans.len(), 32 + 8);
        assert!(plans.windows(2).all(|w| w[0].run_id < w[1].run_id));
    }

    #[test]
    fn rounding() {
        assert_eq!(round6(0.1234565001), 0.123457);
        assert_eq!(round6(1.0), 1.0);
    }
}

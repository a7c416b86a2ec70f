//! CSV files written for a sweep, and readers for them.
//!
//! `results.csv` has one line per run. `runs/<run_id>_trace.csv` and
//! `runs/<run_id>_expulsion.csv` hold the per-run accuracy trace and
//! expulsion confusion rows. Accuracies are written with 6 decimals.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detection::ExpulsionRow;
use crate::orchestrator::{Algorithm, Stage};

use super::sweep::{ResultRow, RunRecord, TraceRow};

pub const RESULTS_HEADER: [&str; 15] = [
    "run_id",
    "algorithm",
    "N",
    "C",
    "R",
    "E",
    "B",
    "R_c",
    "P",
    "X",
    "seed",
    "final_accuracy",
    "message_count",
    "parameter_volume",
    "survivors_M",
];
pub const TRACE_HEADER: [&str; 4] = ["stage", "iteration_or_round", "cluster_id", "accuracy"];
pub const EXPULSION_HEADER: [&str; 6] = ["iteration", "tp", "fp", "tn", "fn", "total_nodes"];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}, record {record}: {message}")]
    Malformed {
        path: PathBuf,
        record: usize,
        message: String,
    },
}

pub fn trace_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("runs").join(format!("{run_id}_trace.csv"))
}

pub fn expulsion_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("runs").join(format!("{run_id}_expulsion.csv"))
}

fn accuracy(x: f64) -> String {
    format!("{x:.6}")
}

fn write_csv<const W: usize>(path: &Path, header: [&str; W], rows: impl Iterator<Item = [String; W]>) -> Result<(), OutputError> {
    let csv_err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes every file for `records` into `out_dir`, replacing earlier
/// output of the same runs.
pub fn emit_results(records: &[RunRecord], out_dir: &Path) -> Result<(), OutputError> {
    let runs = out_dir.join("runs");
    fs::create_dir_all(&runs).map_err(|source| OutputError::Io { path: runs, source })?;
    write_csv(
        &out_dir.join("results.csv"),
        RESULTS_HEADER,
        records.iter().map(|r| {
            let r = &r.row;
            [
                r.run_id.clone(),
                r.algorithm.as_str().to_string(),
                r.clients.to_string(),
                r.clusters.to_string(),
                r.rounds.to_string(),
                r.epochs.to_string(),
                r.batch_size.to_string(),
                r.rounds_per_cluster.to_string(),
                r.poison_percent.to_string(),
                r.expel_percent.to_string(),
                r.seed.to_string(),
                accuracy(r.final_accuracy),
                r.message_count.to_string(),
                r.parameter_volume.to_string(),
                r.survivors.to_string(),
            ]
        }),
    )?;
    for record in records {
        let id = &record.row.run_id;
        write_csv(
            &trace_path(out_dir, id),
            TRACE_HEADER,
            record.trace.iter().map(|t| {
                [
                    t.stage.as_str().to_string(),
                    t.index.to_string(),
                    t.cluster_id.to_string(),
                    accuracy(t.accuracy),
                ]
            }),
        )?;
        write_csv(
            &expulsion_path(out_dir, id),
            EXPULSION_HEADER,
            record.expulsion.iter().map(|e| {
                [e.iteration, e.tp, e.fp, e.tn, e.fn_, e.total_nodes].map(|v| v.to_string())
            }),
        )?;
    }
    Ok(())
}

fn read_csv<T, const W: usize>(
    path: &Path,
    header: [&str; W],
    parse: impl Fn(&csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, OutputError> {
    let csv_err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let malformed = |record, message| OutputError::Malformed {
        path: path.to_path_buf(),
        record,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let found = reader.headers().map_err(csv_err)?;
    if found.iter().ne(header.iter().copied()) {
        return Err(malformed(0, format!("unexpected header {found:?}")));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        out.push(parse(&record).map_err(|m| malformed(i + 1, m))?);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, index: usize, name: &str) -> Result<T, String> {
    let raw = record.get(index).ok_or_else(|| format!("missing `{name}`"))?;
    raw.parse().map_err(|_| format!("cannot parse `{name}` from `{raw}`"))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, OutputError> {
    read_csv(path, RESULTS_HEADER, |r| {
        let algorithm = match r.get(1) {
            Some("proposed") => Algorithm::Proposed,
            Some("baseline") => Algorithm::Baseline,
            other => return Err(format!("unknown algorithm {other:?}")),
        };
        Ok(ResultRow {
            run_id: field(r, 0, "run_id")?,
            algorithm,
            clients: field(r, 2, "N")?,
            clusters: field(r, 3, "C")?,
            rounds: field(r, 4, "R")?,
            epochs: field(r, 5, "E")?,
            batch_size: field(r, 6, "B")?,
            rounds_per_cluster: field(r, 7, "R_c")?,
            poison_percent: field(r, 8, "P")?,
            expel_percent: field(r, 9, "X")?,
            seed: field(r, 10, "seed")?,
            final_accuracy: field(r, 11, "final_accuracy")?,
            message_count: field(r, 12, "message_count")?,
            parameter_volume: field(r, 13, "parameter_volume")?,
            survivors: field(r, 14, "survivors_M")?,
        })
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, OutputError> {
    read_csv(path, TRACE_HEADER, |r| {
        let stage = match r.get(0) {
            Some("explore") => Stage::Explore,
            Some("exploit") => Stage::Exploit,
            Some("baseline") => Stage::Baseline,
            other => return Err(format!("unknown stage {other:?}")),
        };
        Ok(TraceRow {
            stage,
            index: field(r, 1, "iteration_or_round")?,
            cluster_id: field(r, 2, "cluster_id")?,
            accuracy: field(r, 3, "accuracy")?,
        })
    })
}

pub fn read_expulsion(path: &Path) -> Result<Vec<ExpulsionRow>, OutputError> {
    read_csv(path, EXPULSION_HEADER, |r| {
        Ok(ExpulsionRow {
            iteration: field(r, 0, "iteration")?,
            tp: field(r, 1, "tp")?,
            fp: field(r, 2, "fp")?,
            tn: field(r, 3, "tn")?,
            fn_: field(r, 4, "fn")?,
            total_nodes: field(r, 5, "total_nodes")?,
        })
    })
}

//! Sweeps and their CSV output.

use std::fs;
use std::path::Path;

use fedexplore::experiment::{
    emit_results, expulsion_path, parse_sweep, read_expulsion, read_results, read_trace, run_sweep, trace_path,
    SweepSpec, EXPULSION_HEADER, RESULTS_HEADER,
};
use fedexplore::orchestrator::Algorithm;

const TINY: &str = "
R = 4
E = 1
B = 8
R_c = 1
samples_per_client = 8
image_side = 10
holdout_size = 20
test_size = 40
reference_epochs = 3
";

fn spec(extra: &str) -> SweepSpec {
    parse_sweep(&format!("{TINY}\n{extra}")).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("results.csv".to_string(), fs::read(dir.join("results.csv")).unwrap())];
    let mut runs: Vec<_> = fs::read_dir(dir.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    runs.sort();
    for p in runs {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn output_is_identical_at_any_parallelism() {
    let spec = spec("N = 6, 8\nC = 2, 3\nP = 0, 40\nX = 20\nseed = 3");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let serial = run_sweep(&spec, 1).unwrap();
    let parallel = run_sweep(&spec, 8).unwrap();
    assert!(serial.failures.is_empty(), "{:?}", serial.failures);
    assert_eq!(serial, parallel);
    emit_results(&serial.records, a.path()).unwrap();
    emit_results(&parallel.records, b.path()).unwrap();
    let tree = read_tree(a.path());
    assert_eq!(tree, read_tree(b.path()));
    assert_eq!(tree.len(), 1 + 2 * (8 + 4));

    emit_results(&serial.records, a.path()).unwrap();
    assert_eq!(read_tree(a.path()), tree);
}

#[test]
fn files_round_trip() {
    let spec = spec("N = 8\nC = 2\nP = 25\nX = 25\nseed = 1, 2");
    let outcome = run_sweep(&spec, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&outcome.records, dir.path()).unwrap();

    let rows = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows, outcome.records.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
    for record in &outcome.records {
        let id = &record.row.run_id;
        assert_eq!(read_trace(&trace_path(dir.path(), id)).unwrap(), record.trace);
        let expulsion = read_expulsion(&expulsion_path(dir.path(), id)).unwrap();
        assert_eq!(expulsion, record.expulsion);
        assert!(expulsion.iter().all(|e| e.tp + e.fp + e.tn + e.fn_ == e.total_nodes));
    }

    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), RESULTS_HEADER.join(","));
    for line in lines {
        let accuracy = line.split(',').nth(11).unwrap();
        assert_eq!(accuracy.split('.').nth(1).map(str::len), Some(6), "{line}");
    }
    let id = &outcome.records[0].row.run_id;
    let trace = fs::read_to_string(trace_path(dir.path(), id)).unwrap();
    assert!(trace.starts_with("stage,iteration_or_round,cluster_id,accuracy\n"));
    for line in trace.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap().split('.').nth(1).map(str::len), Some(6));
    }
}

#[test]
fn product_size_and_shared_dataset() {
    let s = spec("N = 6, 8\nC = 2, 3\nP = 0\nX = 0\nalgorithm = proposed");
    let outcome = run_sweep(&s, 4).unwrap();
    assert_eq!(outcome.records.len(), 4);
    assert!(outcome.records.windows(2).all(|w| w[0].row.run_id < w[1].row.run_id));

    let both = spec("N = 10\nC = 2\nP = 40\nX = 20\nseed = 4");
    let outcome = run_sweep(&both, 2).unwrap();
    assert_eq!(outcome.records.len(), 2);
    let (b, p) = (&outcome.records[0], &outcome.records[1]);
    assert_eq!(b.row.algorithm, Algorithm::Baseline);
    assert_eq!(p.row.algorithm, Algorithm::Proposed);
    assert_eq!(b.row.seed, p.row.seed);
    assert_eq!(b.poisoned, p.poisoned);
    assert_eq!(b.poisoned.len(), 4);
}

#[test]
fn seven_iteration_run_writes_seven_expulsion_rows() {
    let s = spec("N = 16\nC = 8\nP = 25\nX = 20\nalgorithm = proposed");
    let outcome = run_sweep(&s, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&outcome.records, dir.path()).unwrap();
    let text = fs::read_to_string(expulsion_path(dir.path(), &outcome.records[0].row.run_id)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), EXPULSION_HEADER.join(","));
    assert_eq!(lines.count(), 7);
}

#[test]
fn failing_runs_are_reported_not_fatal() {
    let s = spec("N = 8\nC = 2\nimage_side = 2\nalgorithm = proposed");
    let outcome = run_sweep(&s, 1).unwrap();
    assert!(outcome.records.is_empty());
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].run_id, "proposed_N8_C2_P0_X0_s1");
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(emit_results(&[], &blocker).is_err());
}

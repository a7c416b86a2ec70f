//! Prediction-agreement scoring, client expulsion and cluster ranking.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::data::UnlabeledSet;
use crate::nn::{CompiledModel, NnError, ParameterVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {expected} entries expected, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("ranking needs at least 2 clusters, got {0}")]
    RankUndefined(usize),
    #[error("no score for client {0}")]
    MissingScore(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One-hot predictions, `rows x classes`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub rows: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl PredictionMatrix {
    pub fn from_labels(labels: &[usize], classes: usize) -> Self {
        let mut values = vec![0.0; labels.len() * classes];
        for (r, &l) in labels.iter().enumerate() {
            assert!(l < classes, "label {l} out of range for {classes} classes");
            values[r * classes + l] = 1.0;
        }
        Self {
            rows: labels.len(),
            classes,
            values,
        }
    }

    /// Index of the 1 in each row.
    pub fn labels(&self) -> Vec<usize> {
        self.values
            .chunks(self.classes)
            .map(|row| row.iter().position(|&v| v == 1.0).expect("one-hot row"))
            .collect()
    }
}

pub fn prediction_matrix(
    model: &CompiledModel,
    params: &ParameterVector,
    unlabeled: &UnlabeledSet,
) -> Result<PredictionMatrix, DetectionError> {
    let labels = model.predict(params, &unlabeled.values)?;
    Ok(PredictionMatrix::from_labels(&labels, model.class_count()))
}

/// `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, DetectionError> {
    if a.len() != b.len() {
        return Err(DetectionError::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(DetectionError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Scores every client matrix against the cluster's global predictions.
pub fn score_clients(
    global: &PredictionMatrix,
    clients: &BTreeMap<usize, PredictionMatrix>,
) -> Result<BTreeMap<usize, f64>, DetectionError> {
    clients
        .iter()
        .map(|(&id, m)| Ok((id, cosine_similarity(&global.values, &m.values)?)))
        .collect()
}

/// Number of members removed at `x_percent`: `floor(n * X / 100)`, capped so
/// one member always stays.
pub fn expel_count(members: usize, x_percent: f64) -> usize {
    let raw = (members as f64 * x_percent.clamp(0.0, 100.0) / 100.0).floor() as usize;
    raw.min(members.saturating_sub(1))
}

/// Splits `members` into `(survivors, expelled)`, expelling the lowest
/// scores. Among equal scores the higher client id goes first. Both lists
/// come back sorted ascending.
pub fn expel_lowest(
    members: &[usize],
    scores: &BTreeMap<usize, f64>,
    x_percent: f64,
) -> Result<(Vec<usize>, Vec<usize>), DetectionError> {
    let mut ranked = members
        .iter()
        .map(|&id| scores.get(&id).map(|&s| (s, id)).ok_or(DetectionError::MissingScore(id)))
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let k = expel_count(members.len(), x_percent);
    let mut expelled: Vec<usize> = ranked[..k].iter().map(|&(_, id)| id).collect();
    let mut survivors: Vec<usize> = ranked[k..].iter().map(|&(_, id)| id).collect();
    expelled.sort_unstable();
    survivors.sort_unstable();
    Ok((survivors, expelled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRanking {
    pub best: usize,
    pub worst: usize,
    /// Similarity of each cluster to the entrywise mean matrix.
    pub scores: BTreeMap<usize, f64>,
}

/// Ranks clusters by similarity to the mean of all cluster predictions.
/// Ties go to the lowest id for best and the highest id for worst.
pub fn rank_clusters(clusters: &BTreeMap<usize, PredictionMatrix>) -> Result<ClusterRanking, DetectionError> {
    if clusters.len() < 2 {
        return Err(DetectionError::RankUndefined(clusters.len()));
    }
    let len = clusters.values().next().expect("non-empty").values.len();
    let mut mean = vec![0.0; len];
    for m in clusters.values() {
        if m.values.len() != len {
            return Err(DetectionError::Shape {
                expected: len,
                actual: m.values.len(),
            });
        }
        for (acc, &v) in mean.iter_mut().zip(&m.values) {
            *acc += v;
        }
    }
    let n = clusters.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);

    let scores = clusters
        .iter()
        .map(|(&id, m)| Ok((id, cosine_similarity(&m.values, &mean)?)))
        .collect::<Result<BTreeMap<_, _>, DetectionError>>()?;
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    let mut worst = (f64::INFINITY, 0);
    for (&id, &s) in &scores {
        if s > best.0 {
            best = (s, id);
        }
        if s <= worst.0 {
            worst = (s, id);
        }
    }
    Ok(ClusterRanking {
        best: best.1,
        worst: worst.1,
        scores,
    })
}

/// Confusion counts for one expulsion sweep. Positive means expelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpulsionRow {
    pub iteration: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub total_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpulsionLedger {
    pub rows: Vec<ExpulsionRow>,
}

impl ExpulsionLedger {
    pub fn total_true_positives(&self) -> usize {
        self.rows.iter().map(|r| r.tp).sum()
    }

    pub fn final_false_negatives(&self) -> Option<usize> {
        self.rows.last().map(|r| r.fn_)
    }
}

/// Appends the confusion row for one sweep. `expelled` must be a subset of
/// `alive_before`.
pub fn record_confusion(
    ledger: &mut ExpulsionLedger,
    iteration: usize,
    expelled: &BTreeSet<usize>,
    poisoned: &BTreeSet<usize>,
    alive_before: &BTreeSet<usize>,
) -> ExpulsionRow {
    debug_assert!(expelled.is_subset(alive_before));
    let tp = expelled.intersection(poisoned).count();
    let fp = expelled.len() - tp;
    let kept_poisoned = alive_before.difference(expelled).filter(|id| poisoned.contains(id)).count();
    let kept = alive_before.len() - expelled.len();
    let row = ExpulsionRow {
        iteration,
        tp,
        fp,
        tn: kept - kept_poisoned,
        fn_: kept_poisoned,
        total_nodes: alive_before.len(),
    };
    ledger.rows.push(row);
    row
}

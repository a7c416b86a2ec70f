//! The three-stage exploration/exploitation run and the single-model
//! baseline it is compared against.
//!
//! Stage 1 deals clients into `C` clusters, each with its own randomly drawn
//! architecture. Stage 2 runs `C - 1` iterations; in each, every alive
//! cluster trains for `R_c` rounds, expels its least-agreeing clients, and
//! the cluster that agrees least with the others is folded into the one that
//! agrees most. Stage 3 trains the survivor for `R / 2` rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{
    flatten_samples, load_idx, AttackKind, AttackSpec, DataError, DatasetSpec, FederatedDataset, ReferenceSpec,
};
use crate::detection::{
    expel_lowest, prediction_matrix, rank_clusters, record_confusion, score_clients, DetectionError,
    ExpulsionLedger,
};
use crate::nn::{init_parameters, CompiledModel, ModelDescriptor, NnError, ParameterVector, TensorShape};
use crate::pool::{sample_descriptor, PoolConfig, PoolError, Scale};
use crate::round::{
    run_round, AggregationMode, ClientUpdate, ClusterState, CommLedger, LocalTrainConfig, RoundConfig, RoundError,
};
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("epoch budget undefined for {0} clusters (needs at least 2)")]
    BudgetUndefined(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Proposed,
    Baseline,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Proposed => "proposed",
            Algorithm::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// N.
    pub clients: usize,
    /// C.
    pub clusters: usize,
    /// R, total communication rounds of the baseline.
    pub rounds: usize,
    /// E, local epochs per baseline and stage-3 round.
    pub epochs: usize,
    /// B.
    pub batch_size: usize,
    /// R_c, rounds per cluster per exploration iteration.
    pub rounds_per_cluster: usize,
    /// P, percentage of clients whose data is poisoned.
    pub poison_percent: f64,
    /// X, percentage of each cluster expelled per iteration.
    pub expel_percent: f64,
    pub aggregation: AggregationMode,
    pub learning_rate: f64,
    pub attack: AttackKind,
    pub reference: ReferenceSpec,
    /// Drives every random choice of the run: data, poisoning, architectures,
    /// assignment and local shuffles.
    pub seed: u64,
    /// Synthetic data shape; its `clients` and `seed` are taken from this
    /// config.
    pub dataset: DatasetSpec,
    pub scale: Scale,
    /// IDX image and label files to use instead of synthetic data.
    pub idx_files: Option<(PathBuf, PathBuf)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clients: 40,
            clusters: 4,
            rounds: 32,
            epochs: 8,
            batch_size: 32,
            rounds_per_cluster: 4,
            poison_percent: 0.0,
            expel_percent: 0.0,
            aggregation: AggregationMode::PlainMean,
            learning_rate: 0.2,
            attack: AttackKind::Fgsm { epsilon: 0.25 },
            reference: ReferenceSpec::default(),
            seed: 1,
            dataset: DatasetSpec::default(),
            scale: Scale::new(1, 8).expect("positive"),
            idx_files: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.clusters < 1 {
            return bad("C >= 1");
        }
        if self.clients < self.clusters {
            return bad("N >= C");
        }
        if self.rounds == 0 || !self.rounds.is_multiple_of(2) {
            return bad("R must be even and positive");
        }
        if self.epochs < 1 {
            return bad("E >= 1");
        }
        if self.batch_size < 1 {
            return bad("B >= 1");
        }
        if self.rounds_per_cluster < 1 {
            return bad("R_c >= 1");
        }
        if !(0.0..=100.0).contains(&self.poison_percent) {
            return bad("0 <= P <= 100");
        }
        if !(0.0..=100.0).contains(&self.expel_percent) {
            return bad("0 <= X <= 100");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("lr >= 0");
        }
        if let AttackKind::Fgsm { epsilon } = self.attack {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return bad("epsilon >= 0");
            }
        }
        self.dataset_spec().validate()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            clients: self.clients,
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack,
            poison_percent: self.poison_percent,
            reference: self.reference.clone(),
        }
    }

    pub fn pool_config(&self) -> Result<PoolConfig, OrchestratorError> {
        let side = self.dataset.image_side;
        Ok(PoolConfig::standard(
            TensorShape::image(side, side)?,
            self.dataset.class_count,
            self.scale,
        ))
    }

    fn round_config(&self, epochs: usize) -> RoundConfig {
        RoundConfig {
            local: LocalTrainConfig {
                epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
            },
            aggregation: self.aggregation,
        }
    }
}

/// `(E_stage2, E_c)` with `E_stage2 = (R/2) E` and
/// `E_c = max(1, floor(E_stage2 / ((C - 1) R_c)))`.
pub fn epoch_budget(rounds: usize, epochs: usize, clusters: usize, rounds_per_cluster: usize) -> Result<(usize, usize), OrchestratorError> {
    if clusters < 2 {
        return Err(OrchestratorError::BudgetUndefined(clusters));
    }
    if rounds_per_cluster < 1 {
        return Err(OrchestratorError::Config("R_c >= 1".into()));
    }
    let stage2 = rounds / 2 * epochs;
    let per_iteration = stage2 / ((clusters - 1) * rounds_per_cluster);
    if per_iteration == 0 {
        log::warn!(
            "epoch budget {stage2} cannot cover {} iterations of {rounds_per_cluster} rounds; using 1 epoch per round",
            clusters - 1
        );
    }
    Ok((stage2, per_iteration.max(1)))
}

/// Sizes of a balanced deal of `clients` over `clusters`: the first
/// `clients % clusters` clusters get one extra client.
pub fn cluster_sizes(clients: usize, clusters: usize) -> Vec<usize> {
    let base = clients / clusters;
    let extra = clients % clusters;
    (0..clusters).map(|c| base + usize::from(c < extra)).collect()
}

fn draw_model(config: &ExperimentConfig, pool: &PoolConfig, index: u64) -> Result<(ModelDescriptor, ParameterVector), OrchestratorError> {
    let descriptor = sample_descriptor(pool, &mut stream_rng(config.seed, Stream::ModelSample, index))?;
    let params = init_parameters(&descriptor, &mut stream_rng(config.seed, Stream::ModelInit, index))?;
    Ok((descriptor, params))
}

/// Shuffles the client ids, deals them into clusters and draws one model per
/// cluster.
pub fn init_clusters(config: &ExperimentConfig) -> Result<Vec<ClusterState>, OrchestratorError> {
    let pool = config.pool_config()?;
    let mut ids: Vec<usize> = (0..config.clients).collect();
    ids.shuffle(&mut stream_rng(config.seed, Stream::Assignment, 0));
    let mut rest = ids.as_slice();
    cluster_sizes(config.clients, config.clusters)
        .into_iter()
        .enumerate()
        .map(|(cluster_id, size)| {
            let (block, tail) = rest.split_at(size);
            rest = tail;
            let mut members = block.to_vec();
            members.sort_unstable();
            let (descriptor, global_params) = draw_model(config, &pool, cluster_id as u64)?;
            Ok(ClusterState {
                cluster_id,
                descriptor,
                global_params,
                members,
                alive: true,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Explore,
    Exploit,
    Baseline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Explore => "explore",
            Stage::Exploit => "exploit",
            Stage::Baseline => "baseline",
        }
    }
}

/// One accuracy measurement. Exploration entries are holdout accuracy per
/// cluster and iteration; exploitation and baseline entries are test
/// accuracy per round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub index: usize,
    pub cluster_id: usize,
    pub accuracy: f64,
}

/// Client membership after an iteration's expulsions and merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipSnapshot {
    pub iteration: usize,
    pub alive: BTreeSet<usize>,
    pub expelled: BTreeSet<usize>,
}

/// Scores computed in one exploration iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationScores {
    pub iteration: usize,
    pub clients: BTreeMap<usize, f64>,
    pub clusters: BTreeMap<usize, f64>,
    pub best: usize,
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub final_descriptor: ModelDescriptor,
    pub final_params: ParameterVector,
    pub final_accuracy: f64,
    pub scores: Vec<IterationScores>,
    pub trace: Vec<TraceEntry>,
    pub comm: CommLedger,
    pub expulsion: ExpulsionLedger,
    /// Clients training the final model, ascending.
    pub survivors: Vec<usize>,
    pub snapshots: Vec<MembershipSnapshot>,
    /// Local epochs each client ran over the whole run.
    pub client_epochs: BTreeMap<usize, usize>,
    /// Parameter volume of one final-stage round.
    pub final_round_volume: u64,
    pub poisoned: BTreeSet<usize>,
}

struct EvalSet {
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl EvalSet {
    fn test(dataset: &FederatedDataset) -> Self {
        let (inputs, labels) = flatten_samples(&dataset.test_set);
        Self { inputs, labels }
    }

    fn holdout(dataset: &FederatedDataset) -> Self {
        Self {
            inputs: dataset.server_unlabeled.values.clone(),
            labels: dataset.server_unlabeled_truth.labels_for_metrics().to_vec(),
        }
    }

    fn accuracy(&self, cluster: &ClusterState) -> Result<f64, OrchestratorError> {
        let model = CompiledModel::new(&cluster.descriptor)?;
        Ok(model.accuracy(&cluster.global_params, &self.inputs, &self.labels)?)
    }
}

fn check_dataset(config: &ExperimentConfig, dataset: &FederatedDataset) -> Result<(), OrchestratorError> {
    config.validate()?;
    if dataset.client_count() != config.clients {
        return Err(OrchestratorError::Config(format!(
            "dataset has {} clients, config N = {}",
            dataset.client_count(),
            config.clients
        )));
    }
    Ok(())
}

fn credit_epochs(epochs: &mut BTreeMap<usize, usize>, members: &[usize], count: usize) {
    for &m in members {
        *epochs.entry(m).or_default() += count;
    }
}

/// Trains the survivor for `rounds` rounds of `E` epochs, recording test
/// accuracy after each round. `first_round` continues the run's round
/// numbering so local shuffles never repeat.
#[allow(clippy::too_many_arguments)]
fn train_rounds(
    cluster: &mut ClusterState,
    dataset: &FederatedDataset,
    config: &ExperimentConfig,
    rounds: usize,
    first_round: u64,
    stage: Stage,
    comm: &mut CommLedger,
    trace: &mut Vec<TraceEntry>,
    client_epochs: &mut BTreeMap<usize, usize>,
) -> Result<f64, OrchestratorError> {
    if cluster.members.is_empty() {
        return Err(OrchestratorError::Config("no clients left for final training".into()));
    }
    let test = EvalSet::test(dataset);
    let round_config = config.round_config(config.epochs);
    let mut accuracy = 0.0;
    for r in 0..rounds {
        run_round(cluster, dataset, &round_config, comm, config.seed, first_round + r as u64)?;
        credit_epochs(client_epochs, &cluster.members, config.epochs);
        accuracy = test.accuracy(cluster)?;
        trace.push(TraceEntry {
            stage,
            index: r + 1,
            cluster_id: cluster.cluster_id,
            accuracy,
        });
    }
    Ok(accuracy)
}

struct Exploration {
    survivor: ClusterState,
    rounds_used: u64,
    scores: Vec<IterationScores>,
    expulsion: ExpulsionLedger,
    snapshots: Vec<MembershipSnapshot>,
}

/// Runs the `C - 1` explore/expel/merge iterations and returns the single
/// remaining cluster.
fn stage2_explore(
    mut clusters: Vec<ClusterState>,
    dataset: &FederatedDataset,
    config: &ExperimentConfig,
    comm: &mut CommLedger,
    trace: &mut Vec<TraceEntry>,
    client_epochs: &mut BTreeMap<usize, usize>,
) -> Result<Exploration, OrchestratorError> {
    let (_, per_round_epochs) = epoch_budget(config.rounds, config.epochs, config.clusters, config.rounds_per_cluster)?;
    let round_config = config.round_config(per_round_epochs);
    let holdout = EvalSet::holdout(dataset);
    let mut expulsion = ExpulsionLedger::default();
    let mut expelled_all = BTreeSet::new();
    let mut scores = Vec::new();
    let mut snapshots = Vec::new();
    let mut rounds_used = 0u64;

    for iteration in 1..config.clusters {
        let first_round = rounds_used;
        // Every alive cluster trains independently; results come back in
        // cluster order.
        let outcomes = clusters
            .par_iter_mut()
            .filter(|c| c.alive)
            .map(|cluster| -> Result<_, OrchestratorError> {
                let mut ledger = CommLedger::default();
                let mut last: Vec<ClientUpdate> = Vec::new();
                for r in 0..config.rounds_per_cluster {
                    last = run_round(cluster, dataset, &round_config, &mut ledger, config.seed, first_round + r as u64)?;
                }
                let model = CompiledModel::new(&cluster.descriptor)?;
                let global = prediction_matrix(&model, &cluster.global_params, &dataset.server_unlabeled)?;
                let client_preds = last
                    .iter()
                    .map(|u| Ok((u.client_id, prediction_matrix(&model, &u.updated_params, &dataset.server_unlabeled)?)))
                    .collect::<Result<BTreeMap<_, _>, OrchestratorError>>()?;
                let client_scores = score_clients(&global, &client_preds)?;
                let accuracy = holdout.accuracy(cluster)?;
                Ok((cluster.cluster_id, ledger, global, client_scores, accuracy))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rounds_used += config.rounds_per_cluster as u64;

        let alive_before: BTreeSet<usize> = clusters
            .iter()
            .filter(|c| c.alive)
            .flat_map(|c| c.members.iter().copied())
            .collect();
        let mut expelled_now = BTreeSet::new();
        let mut cluster_preds = BTreeMap::new();
        let mut all_client_scores = BTreeMap::new();
        for (cluster_id, ledger, global, client_scores, accuracy) in outcomes {
            comm.absorb(&ledger);
            let cluster = &mut clusters[cluster_id];
            credit_epochs(client_epochs, &cluster.members, per_round_epochs * config.rounds_per_cluster);
            trace.push(TraceEntry {
                stage: Stage::Explore,
                index: iteration,
                cluster_id,
                accuracy,
            });
            let (survivors, expelled) = expel_lowest(&cluster.members, &client_scores, config.expel_percent)?;
            cluster.members = survivors;
            expelled_now.extend(expelled);
            all_client_scores.extend(client_scores);
            cluster_preds.insert(cluster_id, global);
        }
        record_confusion(&mut expulsion, iteration, &expelled_now, &dataset.poisoned, &alive_before);
        expelled_all.extend(expelled_now);

        let ranking = rank_clusters(&cluster_preds)?;
        let moved = std::mem::take(&mut clusters[ranking.worst].members);
        clusters[ranking.worst].alive = false;
        let best = &mut clusters[ranking.best];
        best.members.extend(moved);
        best.members.sort_unstable();
        log::debug!(
            "iteration {iteration}: merged cluster {} into {}, {} clients expelled so far",
            ranking.worst,
            ranking.best,
            expelled_all.len()
        );

        snapshots.push(MembershipSnapshot {
            iteration,
            alive: clusters
                .iter()
                .filter(|c| c.alive)
                .flat_map(|c| c.members.iter().copied())
                .collect(),
            expelled: expelled_all.clone(),
        });
        scores.push(IterationScores {
            iteration,
            clients: all_client_scores,
            clusters: ranking.scores,
            best: ranking.best,
            worst: ranking.worst,
        });
    }

    let survivor = clusters
        .into_iter()
        .find(|c| c.alive)
        .expect("exactly one cluster survives exploration");
    Ok(Exploration {
        survivor,
        rounds_used,
        scores,
        expulsion,
        snapshots,
    })
}

/// Builds the dataset a config describes: synthetic unless IDX files are
/// given, in which case their image side must equal `image_side`.
pub fn build_dataset(config: &ExperimentConfig) -> Result<FederatedDataset, OrchestratorError> {
    config.validate()?;
    let spec = config.dataset_spec();
    match &config.idx_files {
        None => Ok(FederatedDataset::synthetic(&spec, &config.attack_spec())?),
        Some((images, labels)) => {
            let pool = load_idx(images, labels)?;
            if pool.height != spec.image_side || pool.width != spec.image_side {
                return Err(OrchestratorError::Config(format!(
                    "image_side = {} but IDX images are {}x{}",
                    spec.image_side, pool.height, pool.width
                )));
            }
            if pool.class_count != spec.class_count {
                return Err(OrchestratorError::Config(format!(
                    "K = {} but IDX labels span {} classes",
                    spec.class_count, pool.class_count
                )));
            }
            Ok(FederatedDataset::from_pool(pool, &spec, &config.attack_spec())?)
        }
    }
}

pub fn run_proposed(config: &ExperimentConfig) -> Result<RunResult, OrchestratorError> {
    run_proposed_on(config, &build_dataset(config)?)
}

pub fn run_proposed_on(config: &ExperimentConfig, dataset: &FederatedDataset) -> Result<RunResult, OrchestratorError> {
    check_dataset(config, dataset)?;
    let mut comm = CommLedger::default();
    let mut trace = Vec::new();
    let mut client_epochs = BTreeMap::new();
    let clusters = init_clusters(config)?;

    let exploration = if clusters.len() > 1 {
        stage2_explore(clusters, dataset, config, &mut comm, &mut trace, &mut client_epochs)?
    } else {
        Exploration {
            survivor: clusters.into_iter().next().expect("one cluster"),
            rounds_used: 0,
            scores: Vec::new(),
            expulsion: ExpulsionLedger::default(),
            snapshots: Vec::new(),
        }
    };
    let mut survivor = exploration.survivor;
    let before = comm.parameter_volume;
    let final_accuracy = train_rounds(
        &mut survivor,
        dataset,
        config,
        config.rounds / 2,
        exploration.rounds_used,
        Stage::Exploit,
        &mut comm,
        &mut trace,
        &mut client_epochs,
    )?;
    let final_round_volume = (comm.parameter_volume - before) / (config.rounds / 2) as u64;
    Ok(RunResult {
        algorithm: Algorithm::Proposed,
        final_descriptor: survivor.descriptor,
        final_params: survivor.global_params,
        final_accuracy,
        scores: exploration.scores,
        trace,
        comm,
        expulsion: exploration.expulsion,
        survivors: survivor.members,
        snapshots: exploration.snapshots,
        client_epochs,
        final_round_volume,
        poisoned: dataset.poisoned.clone(),
    })
}

pub fn run_baseline(config: &ExperimentConfig) -> Result<RunResult, OrchestratorError> {
    run_baseline_on(config, &build_dataset(config)?)
}

/// One random model trained by all clients for `R` rounds of `E` epochs.
/// The model is drawn from the same stream as the proposed run's first
/// cluster.
pub fn run_baseline_on(config: &ExperimentConfig, dataset: &FederatedDataset) -> Result<RunResult, OrchestratorError> {
    check_dataset(config, dataset)?;
    let (descriptor, global_params) = draw_model(config, &config.pool_config()?, 0)?;
    let mut cluster = ClusterState {
        cluster_id: 0,
        descriptor,
        global_params,
        members: (0..config.clients).collect(),
        alive: true,
    };
    let mut comm = CommLedger::default();
    let mut trace = Vec::new();
    let mut client_epochs = BTreeMap::new();
    let final_accuracy = train_rounds(
        &mut cluster,
        dataset,
        config,
        config.rounds,
        0,
        Stage::Baseline,
        &mut comm,
        &mut trace,
        &mut client_epochs,
    )?;
    Ok(RunResult {
        algorithm: Algorithm::Baseline,
        final_descriptor: cluster.descriptor,
        final_params: cluster.global_params,
        final_accuracy,
        scores: Vec::new(),
        trace,
        final_round_volume: comm.parameter_volume / config.rounds as u64,
        comm,
        expulsion: ExpulsionLedger::default(),
        survivors: cluster.members,
        snapshots: Vec::new(),
        client_epochs,
        poisoned: dataset.poisoned.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(epoch_budget(32, 8, 8, 4).unwrap(), (128, 4));
        assert_eq!(epoch_budget(32, 8, 4, 4).unwrap(), (128, 10));
        assert_eq!(epoch_budget(20, 1, 2, 1).unwrap(), (10, 10));
        assert_eq!(epoch_budget(32, 8, 32, 4).unwrap(), (128, 1));
        assert_eq!(epoch_budget(2, 1, 8, 4).unwrap(), (1, 1));
        assert!(matches!(epoch_budget(32, 8, 1, 4), Err(OrchestratorError::BudgetUndefined(1))));
    }

    #[test]
    fn deal_sizes() {
        assert_eq!(cluster_sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(cluster_sizes(9, 4), vec![3, 2, 2, 2]);
        for n in 1..60 {
            for c in 1..=n {
                let s = cluster_sizes(n, c);
                assert_eq!(s.iter().sum::<usize>(), n);
                assert!(s.iter().all(|&x| x >= 1));
            }
        }
    }

    #[test]
    fn config_validation_names_constraint() {
        let c = ExperimentConfig {
            clients: 4,
            clusters: 8,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("N >= C"), "{msg}");
        let odd = ExperimentConfig {
            rounds: 5,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn clusters_partition_clients() {
        let config = ExperimentConfig {
            clients: 9,
            clusters: 4,
            ..Default::default()
        };
        let clusters = init_clusters(&config).unwrap();
        let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2]);
        let all: BTreeSet<usize> = clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        assert_eq!(all, (0..9).collect());
    }
}

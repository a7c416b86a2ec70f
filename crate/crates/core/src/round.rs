//! One federated communication round: broadcast, local training,
//! aggregation, and communication accounting.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{flatten_samples, ClientShard, FederatedDataset};
use crate::nn::{minibatch_sgd, CompiledModel, ModelDescriptor, NnError, ParameterVector};
use crate::seed::{derive2, rng_from, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoundError {
    #[error("client {0} has no samples")]
    ClientEmpty(usize),
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("update from client {client} has {actual} parameters, expected {expected}")]
    Layout {
        client: usize,
        expected: usize,
        actual: usize,
    },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub updated_params: ParameterVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    #[default]
    PlainMean,
    SampleWeighted,
}

/// Model transfers in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommLedger {
    pub message_count: u64,
    /// Sum over transfers of the transferred model's parameter count.
    pub parameter_volume: u64,
}

impl CommLedger {
    /// One broadcast and one upload per participating client.
    pub fn record_round(&mut self, participants: usize, parameter_count: usize) {
        let transfers = 2 * participants as u64;
        self.message_count += transfers;
        self.parameter_volume += transfers * parameter_count as u64;
    }

    pub fn absorb(&mut self, other: &CommLedger) {
        self.message_count += other.message_count;
        self.parameter_volume += other.parameter_volume;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Trains a copy of `global` on the shard for `config.epochs` full passes,
/// shuffling with a stream derived from `seed`.
pub fn local_train(
    shard: &ClientShard,
    model: &CompiledModel,
    global: &ParameterVector,
    config: &LocalTrainConfig,
    seed: u64,
) -> Result<ClientUpdate, RoundError> {
    if shard.is_empty() {
        return Err(RoundError::ClientEmpty(shard.client_id));
    }
    let (x, y) = flatten_samples(&shard.samples);
    let mut params = global.clone();
    minibatch_sgd(
        model,
        &mut params,
        &x,
        &y,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        &mut rng_from(seed),
    )?;
    Ok(ClientUpdate {
        client_id: shard.client_id,
        updated_params: params,
        sample_count: shard.len(),
    })
}

/// Averages client parameters coordinate-wise.
///
/// Updates are ordered by client id and the mean is taken as
/// `first + sum_i w_i (theta_i - first) / sum_i w_i`, summed in id order, so
/// the result does not depend on completion order and a set of identical
/// vectors averages to that vector exactly. Weights are 1 for `PlainMean`
/// and the sample counts for `SampleWeighted`; equal sample counts fall back
/// to the plain mean.
pub fn aggregate(updates: &[ClientUpdate], mode: AggregationMode) -> Result<ParameterVector, RoundError> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = ordered.first().ok_or(RoundError::NoUpdates)?;
    let len = first.updated_params.len();
    if let Some(bad) = ordered.iter().find(|u| u.updated_params.len() != len) {
        return Err(RoundError::Layout {
            client: bad.client_id,
            expected: len,
            actual: bad.updated_params.len(),
        });
    }
    let equal_counts = ordered.iter().all(|u| u.sample_count == first.sample_count);
    let weighted = mode == AggregationMode::SampleWeighted && !equal_counts;
    let base = &first.updated_params.values;
    let mut acc = vec![0.0; len];
    let mut total_weight = 0.0;
    for u in &ordered {
        let w = if weighted { u.sample_count as f64 } else { 1.0 };
        total_weight += w;
        for ((a, &v), &b) in acc.iter_mut().zip(&u.updated_params.values).zip(base) {
            *a += w * (v - b);
        }
    }
    let values = acc.iter().zip(base).map(|(&a, &b)| b + a / total_weight).collect();
    Ok(ParameterVector {
        values,
        layout: first.updated_params.layout.clone(),
    })
}

/// Lifecycle state of one exploration cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub cluster_id: usize,
    pub descriptor: ModelDescriptor,
    pub global_params: ParameterVector,
    /// Sorted ascending.
    pub members: Vec<usize>,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub local: LocalTrainConfig,
    pub aggregation: AggregationMode,
}

/// Broadcasts the cluster model, trains every member (concurrently), and
/// replaces the global model with the aggregate. Returns the member updates
/// in client-id order. `round_index` must be unique per round within a run;
/// it keys the clients' shuffle streams.
pub fn run_round(
    cluster: &mut ClusterState,
    dataset: &FederatedDataset,
    config: &RoundConfig,
    ledger: &mut CommLedger,
    run_seed: u64,
    round_index: u64,
) -> Result<Vec<ClientUpdate>, RoundError> {
    if cluster.members.is_empty() {
        return Err(RoundError::EmptyCluster(cluster.cluster_id));
    }
    let model = CompiledModel::new(&cluster.descriptor)?;
    let global = &cluster.global_params;
    let updates = cluster
        .members
        .par_iter()
        .map(|&id| {
            let shard = dataset.shard(id);
            let seed = derive2(run_seed ^ shard.rng_stream, Stream::LocalTrain, round_index, id as u64);
            local_train(shard, &model, global, &config.local, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    cluster.global_params = aggregate(&updates, config.aggregation)?;
    ledger.record_round(cluster.members.len(), model.parameter_count());
    Ok(updates)
}

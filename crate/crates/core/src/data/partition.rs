use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};

use super::{ClientShard, DataError, LabeledSample};
use crate::seed::{derive, stream_rng, Stream};

/// Splits `pool` across `clients` so that each client holds samples of two
/// classes.
///
/// The pool is viewed as `2 * clients` class slots, filled round by round
/// from fresh shuffles of the classes present; client `i` owns slots `2i`
/// and `2i + 1`. Each class's samples are dealt out evenly over that class's
/// slots. A client ends up with a single class only if no conflict-free swap
/// exists or one of its slots ran out of samples.
pub fn partition_non_iid(
    pool: &[LabeledSample],
    clients: usize,
    seed: u64,
) -> Result<Vec<ClientShard>, DataError> {
    if clients == 0 {
        return Err(DataError::InvalidSpec("at least one client required".into()));
    }
    if pool.len() < clients {
        return Err(DataError::InsufficientData(format!(
            "{} samples for {clients} clients",
            pool.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, 0);

    let mut by_class: BTreeMap<usize, Vec<&LabeledSample>> = BTreeMap::new();
    for s in pool {
        by_class.entry(s.label).or_default().push(s);
    }
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();

    let slot_count = 2 * clients;
    let mut slot_class = Vec::with_capacity(slot_count);
    let mut round = classes.clone();
    while slot_class.len() < slot_count {
        round.shuffle(&mut rng);
        slot_class.extend(round.iter().copied().take(slot_count - slot_class.len()));
    }
    // With an odd class count a pair can straddle two rounds and repeat a class.
    for c in 0..clients {
        let (a, b) = (2 * c, 2 * c + 1);
        if slot_class[a] != slot_class[b] {
            continue;
        }
        let swap = (0..slot_count).find(|&j| {
            let partner = j ^ 1;
            j / 2 != c
                && slot_class[j] != slot_class[a]
                && slot_class[partner] != slot_class[b]
        });
        if let Some(j) = swap {
            slot_class.swap(b, j);
        }
    }

    let mut slot_samples: Vec<Vec<LabeledSample>> = vec![Vec::new(); slot_count];
    for (&class, members) in &by_class {
        let slots: Vec<usize> = (0..slot_count).filter(|&j| slot_class[j] == class).collect();
        if slots.is_empty() {
            continue;
        }
        let base = members.len() / slots.len();
        let extra = members.len() % slots.len();
        let mut cursor = 0;
        for (t, &slot) in slots.iter().enumerate() {
            let take = base + usize::from(t < extra);
            slot_samples[slot] = members[cursor..cursor + take].iter().map(|s| (*s).clone()).collect();
            cursor += take;
        }
    }

    let mut shards = Vec::with_capacity(clients);
    let mut slot_iter = slot_samples.into_iter();
    for client_id in 0..clients {
        let mut samples = slot_iter.next().expect("slot");
        samples.extend(slot_iter.next().expect("slot"));
        if samples.is_empty() {
            return Err(DataError::InsufficientData(format!(
                "client {client_id} received no samples"
            )));
        }
        samples.sort_by_key(|s| s.id);
        shards.push(ClientShard::new(
            client_id,
            samples,
            derive(seed, Stream::LocalTrain, client_id as u64),
        ));
    }
    Ok(shards)
}

/// Exactly `round(clients * percent / 100)` distinct client ids drawn
/// uniformly without replacement.
pub fn select_poisoned_clients(clients: usize, percent: f64, seed: u64) -> BTreeSet<usize> {
    let count = ((clients as f64 * percent.clamp(0.0, 100.0)) / 100.0).round() as usize;
    let mut rng = stream_rng(seed, Stream::Poison, 0);
    index::sample(&mut rng, clients, count.min(clients)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize, classes: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|id| LabeledSample {
                id,
                pixels: vec![0.0],
                label: id % classes,
            })
            .collect()
    }

    #[test]
    fn single_client_gets_two_classes() {
        let shards = partition_non_iid(&pool(100, 10), 1, 5).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].classes_present.len(), 2);
    }

    #[test]
    fn ten_clients_ten_classes_each_two() {
        let p = pool(1000, 10);
        let shards = partition_non_iid(&p, 10, 8).unwrap();
        let mut ids = BTreeSet::new();
        for s in &shards {
            assert_eq!(s.classes_present.len(), 2);
            for x in &s.samples {
                assert!(ids.insert(x.id), "sample {} assigned twice", x.id);
            }
        }
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn odd_class_count_still_pairs_distinct_classes() {
        for seed in 0..20 {
            let shards = partition_non_iid(&pool(700, 7), 30, seed).unwrap();
            assert!(shards.iter().all(|s| s.classes_present.len() == 2), "seed {seed}");
        }
    }

    #[test]
    fn too_small_pool_is_rejected() {
        assert!(matches!(
            partition_non_iid(&pool(5, 2), 6, 1),
            Err(DataError::InsufficientData(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let p = pool(300, 10);
        assert_eq!(partition_non_iid(&p, 12, 4).unwrap(), partition_non_iid(&p, 12, 4).unwrap());
    }

    #[test]
    fn poison_selection_sizes() {
        assert!(select_poisoned_clients(50, 0.0, 1).is_empty());
        assert_eq!(select_poisoned_clients(400, 40.0, 1).len(), 160);
        let ten = select_poisoned_clients(100, 10.0, 2);
        assert_eq!(ten.len(), 10);
        assert!(ten.iter().all(|&c| c < 100));
        assert_eq!(select_poisoned_clients(40, 40.0, 9), select_poisoned_clients(40, 40.0, 9));
    }
}

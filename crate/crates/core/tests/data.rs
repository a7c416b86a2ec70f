//! Dataset construction and the attacker's reference model.

use std::collections::BTreeSet;

use fedexplore::data::{
    build_reference_model, flatten_samples, generate_synthetic, poison_fgsm, AttackKind, AttackSpec, ClientShard,
    DatasetSpec, FederatedDataset, ReferenceSpec, SamplePool,
};
use fedexplore::nn::CompiledModel;

fn split_pool() -> (SamplePool, SamplePool) {
    let spec = DatasetSpec::default();
    let pool = generate_synthetic(&spec).unwrap();
    let (train, test) = pool.samples.split_at(pool.samples.len() / 2);
    let mk = |samples: &[_]| SamplePool {
        samples: samples.to_vec(),
        ..pool.clone()
    };
    (mk(train), mk(test))
}

#[test]
fn reference_model_fits_clean_data_and_fgsm_hurts_it() {
    let (train, test) = split_pool();
    let train = SamplePool {
        samples: train.samples[..120].to_vec(),
        ..train
    };
    let reference = build_reference_model(&train, &ReferenceSpec::default(), 7).unwrap();
    let model = CompiledModel::new(&reference.descriptor).unwrap();
    let held = &test.samples[..300];
    let (x, y) = flatten_samples(held);
    let clean = model.accuracy(&reference.params, &x, &y).unwrap();
    assert!(clean >= 0.8, "reference accuracy {clean}");

    let poisoned = poison_fgsm(ClientShard::new(0, held.to_vec(), 0), &reference, 0.25).unwrap();
    let (px, py) = flatten_samples(&poisoned.samples);
    assert_eq!(py, y);
    let attacked = model.accuracy(&reference.params, &px, &py).unwrap();
    assert!(attacked < clean, "fgsm accuracy {attacked} vs clean {clean}");
}

#[test]
fn dataset_shards_are_disjoint_two_class_and_reproducible() {
    let spec = DatasetSpec {
        clients: 20,
        ..DatasetSpec::default()
    };
    let attack = AttackSpec {
        kind: AttackKind::Fgsm { epsilon: 0.25 },
        poison_percent: 40.0,
        reference: ReferenceSpec::default(),
    };
    let a = FederatedDataset::synthetic(&spec, &attack).unwrap();
    let b = FederatedDataset::synthetic(&spec, &attack).unwrap();
    assert_eq!(a.poisoned, b.poisoned);
    assert_eq!(a.poisoned.len(), 8);
    assert_eq!(a.client_count(), 20);
    let mut seen = BTreeSet::new();
    for (sa, sb) in a.shards.iter().zip(&b.shards) {
        assert_eq!(sa.samples, sb.samples);
        assert_eq!(sa.is_poisoned(), a.poisoned.contains(&sa.client_id));
        let classes: BTreeSet<_> = sa.samples.iter().map(|s| s.label).collect();
        assert_eq!(classes.len(), 2, "client {}", sa.client_id);
        for s in &sa.samples {
            assert!(seen.insert(s.id), "sample {} in two shards", s.id);
        }
    }
    let held: BTreeSet<_> = a.test_set.iter().map(|s| s.id).chain(a.reference_ids.iter().copied()).collect();
    assert!(held.is_disjoint(&seen));
    assert_eq!(a.server_unlabeled.len(), spec.holdout_size);
}

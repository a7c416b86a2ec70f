//! Prediction matrices, cosine scoring and expulsion.

use std::collections::BTreeMap;

use fedexplore::data::UnlabeledSet;
use fedexplore::detection::{
    cosine_similarity, expel_count, expel_lowest, prediction_matrix, rank_clusters, PredictionMatrix,
};
use fedexplore::nn::{init_parameters, CompiledModel, LayerSpec, ModelDescriptor, TensorShape};
use fedexplore::seed::rng_from;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn one_hot_cosine_is_agreement_fraction() {
    let mut rng = rng_from(2024);
    for _ in 0..1000 {
        let rows = rng.random_range(1..60);
        let classes = rng.random_range(2..12);
        let a: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let b: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / rows as f64;
        let cos = cosine_similarity(
            &PredictionMatrix::from_labels(&a, classes).values,
            &PredictionMatrix::from_labels(&b, classes).values,
        )
        .unwrap();
        assert!((cos - agree).abs() <= 1e-12, "cos {cos} agreement {agree}");
    }
}

#[test]
fn prediction_matrix_marks_the_argmax() {
    let descriptor = ModelDescriptor::new(
        TensorShape::image(8, 8).unwrap(),
        vec![
            LayerSpec::Conv {
                filters: 3,
                kernel_h: 3,
                kernel_w: 3,
            },
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 6 },
            LayerSpec::Dense { width: 5 },
            LayerSpec::SoftmaxOutput,
        ],
        5,
    );
    let mut rng = rng_from(8);
    let params = init_parameters(&descriptor, &mut rng).unwrap();
    let model = CompiledModel::new(&descriptor).unwrap();
    let values: Vec<f64> = (0..100 * 64).map(|_| rng.random::<f64>()).collect();
    let set = UnlabeledSet {
        sample_len: 64,
        values: values.clone(),
    };
    let m = prediction_matrix(&model, &params, &set).unwrap();
    let probs = model.probabilities(&params, &values).unwrap();
    assert_eq!((m.rows, m.classes), (100, 5));
    assert_eq!(m.labels(), probs.argmax());
    for r in 0..100 {
        let row = &m.values[r * 5..(r + 1) * 5];
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn identical_predictions_score_one() {
    let m = PredictionMatrix::from_labels(&[0, 3, 3, 1], 4);
    assert_eq!(cosine_similarity(&m.values, &m.values).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn expulsion_partitions_members(
        scores in proptest::collection::vec(0.0f64..1.0, 1..40),
        x in 0.0f64..=100.0,
    ) {
        let members: Vec<usize> = (0..scores.len()).map(|i| 2 * i + 5).collect();
        let map: BTreeMap<usize, f64> = members.iter().copied().zip(scores.iter().copied()).collect();
        let (survivors, expelled) = expel_lowest(&members, &map, x).unwrap();
        prop_assert_eq!(expelled.len(), expel_count(members.len(), x));
        prop_assert!(!survivors.is_empty());
        let mut all: Vec<usize> = survivors.iter().chain(&expelled).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, members);
        if let (Some(worst_kept), Some(best_cut)) = (
            survivors.iter().map(|id| map[id]).reduce(f64::min),
            expelled.iter().map(|id| map[id]).reduce(f64::max),
        ) {
            prop_assert!(best_cut <= worst_kept);
        }
    }

    #[test]
    fn ranking_picks_distinct_best_and_worst(
        labels in proptest::collection::vec(proptest::collection::vec(0usize..4, 12), 2..6),
    ) {
        let clusters: BTreeMap<usize, PredictionMatrix> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i, PredictionMatrix::from_labels(l, 4)))
            .collect();
        let r = rank_clusters(&clusters).unwrap();
        prop_assert!(clusters.contains_key(&r.best) && clusters.contains_key(&r.worst));
        prop_assert!(r.scores[&r.best] >= r.scores[&r.worst]);
        prop_assert!(r.best != r.worst);
    }
}

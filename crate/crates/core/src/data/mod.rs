//! Federated dataset construction: synthetic images or IDX files, two-class
//! non-IID client shards, poisoned-client selection and attacks, and the
//! server's unlabeled holdout.

mod idx;
mod partition;
mod poison;
mod synthetic;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nn::NnError;
use crate::seed::{stream_rng, Stream};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition_non_iid, select_poisoned_clients};
pub use poison::{
    build_reference_model, poison_fgsm, poison_label_flip, ReferenceModel, ReferenceSpec,
};
pub use synthetic::{generate_synthetic, prototypes};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("IDX format error: {0}")]
    Format(String),
    #[error("IDX consistency error: {0}")]
    Consistency(String),
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Unique within the pool the sample came from.
    pub id: usize,
    /// Row-major pixels in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
}

/// Labeled images of one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub samples: Vec<LabeledSample>,
}

impl SamplePool {
    pub fn sample_len(&self) -> usize {
        self.height * self.width
    }
}

/// Flattens samples into one contiguous input buffer plus labels.
pub fn flatten_samples(samples: &[LabeledSample]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(samples.first().map_or(0, |s| s.pixels.len()) * samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        x.extend_from_slice(&s.pixels);
        y.push(s.label);
    }
    (x, y)
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<LabeledSample>,
    pub classes_present: BTreeSet<usize>,
    /// Seed of this client's training-order stream.
    pub rng_stream: u64,
    poisoned: bool,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<LabeledSample>, rng_stream: u64) -> Self {
        let classes_present = samples.iter().map(|s| s.label).collect();
        Self {
            client_id,
            samples,
            classes_present,
            rng_stream,
            poisoned: false,
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn into_poisoned(mut self) -> Self {
        self.classes_present = self.samples.iter().map(|s| s.label).collect();
        self.poisoned = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub image_side: usize,
    pub noise_sigma: f64,
    /// Pixel value of the prototype strokes, in `(0, 1]`.
    pub intensity: f64,
    pub holdout_size: usize,
    /// Labeled samples used only for reporting accuracy.
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            clients: 40,
            samples_per_client: 24,
            image_side: 14,
            noise_sigma: 0.1,
            intensity: 1.0,
            holdout_size: 100,
            test_size: 400,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("class_count", self.class_count),
            ("clients", self.clients),
            ("samples_per_client", self.samples_per_client),
            ("image_side", self.image_side),
            ("holdout_size", self.holdout_size),
            ("test_size", self.test_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::InvalidSpec(format!("{name} must be positive")));
        }
        if self.class_count < 2 {
            return Err(DataError::InvalidSpec("class_count must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidSpec("noise_sigma must be finite and non-negative".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(DataError::InvalidSpec("intensity must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn training_size(&self) -> usize {
        self.clients * self.samples_per_client
    }

    /// Clean split the attacker's reference model trains on: 10% of the
    /// client training volume.
    pub fn reference_size(&self) -> usize {
        self.training_size().div_ceil(10)
    }

    pub fn pool_size(&self) -> usize {
        self.holdout_size + self.test_size + self.training_size() + self.reference_size()
    }
}

/// Poisoning attack applied to every sample of a poisoned client's shard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    Fgsm { epsilon: f64 },
    LabelFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub poison_percent: f64,
    pub reference: ReferenceSpec,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Fgsm { epsilon: 0.25 },
            poison_percent: 0.0,
            reference: ReferenceSpec::default(),
        }
    }
}

/// Ground-truth labels of the server holdout. The training algorithm never
/// reads these; they exist for accuracy reporting only.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutTruth(Vec<usize>);

impl HoldoutTruth {
    pub fn labels_for_metrics(&self) -> &[usize] {
        &self.0
    }
}

/// Unlabeled inputs kept on the server, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub sample_len: usize,
    pub values: Vec<f64>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.values.len() / self.sample_len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.sample_len..(i + 1) * self.sample_len]
    }
}

#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub shards: Vec<ClientShard>,
    pub server_unlabeled: UnlabeledSet,
    pub server_unlabeled_truth: HoldoutTruth,
    pub test_set: Vec<LabeledSample>,
    pub poisoned: BTreeSet<usize>,
    /// Ids of the clean samples the attacker's reference model saw.
    pub reference_ids: Vec<usize>,
}

impl FederatedDataset {
    /// Synthetic pool, carved and partitioned according to `spec`.
    pub fn synthetic(spec: &DatasetSpec, attack: &AttackSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let pool = generate_synthetic(spec)?;
        Self::from_pool(pool, spec, attack)
    }

    /// Carves `pool` into server holdout, test set, reference split and
    /// client training data, then partitions and poisons the client data.
    /// Uses `clients`, `holdout_size`, `test_size` and `seed` from `spec`.
    pub fn from_pool(pool: SamplePool, spec: &DatasetSpec, attack: &AttackSpec) -> Result<Self, DataError> {
        let SamplePool {
            height,
            width,
            class_count,
            samples,
        } = pool;
        let reserved = spec.holdout_size + spec.test_size;
        if samples.len() <= reserved {
            return Err(DataError::InsufficientData(format!(
                "pool of {} samples cannot cover holdout {} and test {}",
                samples.len(),
                spec.holdout_size,
                spec.test_size
            )));
        }
        let remainder = samples.len() - reserved;
        let reference_count = remainder.div_ceil(11);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(spec.seed, Stream::Carve, 0));
        let mut slots: Vec<Option<LabeledSample>> = samples.into_iter().map(Some).collect();
        let mut take = |ids: &[usize]| -> Vec<LabeledSample> {
            ids.iter().map(|&i| slots[i].take().expect("sample carved twice")).collect()
        };
        let (holdout_ids, rest) = order.split_at(spec.holdout_size);
        let (test_ids, rest) = rest.split_at(spec.test_size);
        let (reference_ids, training_ids) = rest.split_at(reference_count);
        let holdout = take(holdout_ids);
        let test_set = take(test_ids);
        let reference_split = take(reference_ids);
        let mut training = take(training_ids);
        training.sort_by_key(|s| s.id);

        let sample_len = height * width;
        let server_unlabeled = UnlabeledSet {
            sample_len,
            values: holdout.iter().flat_map(|s| s.pixels.iter().copied()).collect(),
        };
        let server_unlabeled_truth = HoldoutTruth(holdout.iter().map(|s| s.label).collect());

        let shards = partition_non_iid(&training, spec.clients, spec.seed)?;
        let poisoned = select_poisoned_clients(spec.clients, attack.poison_percent, spec.seed);
        let shards = if poisoned.is_empty() {
            shards
        } else {
            let reference_pool = SamplePool {
                height,
                width,
                class_count,
                samples: reference_split.clone(),
            };
            let reference = match attack.kind {
                AttackKind::Fgsm { .. } => Some(build_reference_model(&reference_pool, &attack.reference, spec.seed)?),
                AttackKind::LabelFlip => None,
            };
            shards
                .into_iter()
                .map(|shard| {
                    if !poisoned.contains(&shard.client_id) {
                        return Ok(shard);
                    }
                    match (attack.kind, &reference) {
                        (AttackKind::Fgsm { epsilon }, Some(r)) => poison_fgsm(shard, r, epsilon),
                        _ => Ok(poison_label_flip(shard, class_count)),
                    }
                })
                .collect::<Result<Vec<_>, DataError>>()?
        };

        Ok(Self {
            height,
            width,
            class_count,
            shards,
            server_unlabeled,
            server_unlabeled_truth,
            test_set,
            poisoned,
            reference_ids: reference_split.iter().map(|s| s.id).collect(),
        })
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width
    }

    pub fn client_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client_id: usize) -> &ClientShard {
        &self.shards[client_id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            clients: 10,
            samples_per_client: 12,
            image_side: 10,
            holdout_size: 30,
            test_size: 40,
            seed: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn carving_is_disjoint() {
        let spec = small_spec();
        let ds = FederatedDataset::synthetic(&spec, &AttackSpec::default()).unwrap();
        let mut seen = BTreeSet::new();
        for shard in &ds.shards {
            for s in &shard.samples {
                assert!(seen.insert(s.id));
            }
        }
        assert_eq!(seen.len(), spec.training_size());
        for s in &ds.test_set {
            assert!(seen.insert(s.id));
        }
        for &id in &ds.reference_ids {
            assert!(seen.insert(id));
        }
        assert_eq!(ds.server_unlabeled.len(), spec.holdout_size);
        assert_eq!(seen.len() + spec.holdout_size, spec.pool_size());
        assert!(ds.poisoned.is_empty());
    }

    #[test]
    fn poisoned_clients_are_flagged() {
        let spec = small_spec();
        let attack = AttackSpec {
            kind: AttackKind::LabelFlip,
            poison_percent: 30.0,
            ..AttackSpec::default()
        };
        let ds = FederatedDataset::synthetic(&spec, &attack).unwrap();
        assert_eq!(ds.poisoned.len(), 3);
        for shard in &ds.shards {
            assert_eq!(shard.is_poisoned(), ds.poisoned.contains(&shard.client_id));
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec();
        spec.class_count = 1;
        assert!(spec.validate().is_err());
        spec.class_count = 10;
        spec.noise_sigma = -1.0;
        assert!(spec.validate().is_err());
    }
}

use super::{flatten_samples, ClientShard, DataError, SamplePool};
use crate::nn::{
    init_parameters, minibatch_sgd, CompiledModel, LayerSpec, ModelDescriptor, ParameterVector,
    TensorShape,
};
use crate::seed::{stream_rng, Stream};

/// Model whose input gradients drive the FGSM attack.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub descriptor: ModelDescriptor,
    pub params: ParameterVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub filters: usize,
    pub hidden: usize,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            filters: 8,
            hidden: 32,
        }
    }
}

impl ReferenceSpec {
    /// Conv(3x3) > MaxPool > Flatten > Dense(hidden) > Dense(K) > Softmax.
    pub fn descriptor(&self, height: usize, width: usize, class_count: usize) -> Result<ModelDescriptor, DataError> {
        let d = ModelDescriptor::new(
            TensorShape::image(height, width)?,
            vec![
                LayerSpec::Conv {
                    filters: self.filters,
                    kernel_h: 3,
                    kernel_w: 3,
                },
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { width: self.hidden },
                LayerSpec::Dense { width: class_count },
                LayerSpec::SoftmaxOutput,
            ],
            class_count,
        );
        d.validate()?;
        Ok(d)
    }
}

/// Trains the attacker's reference model on `pool` (the clean split carved
/// for it, disjoint from the server holdout).
pub fn build_reference_model(pool: &SamplePool, spec: &ReferenceSpec, seed: u64) -> Result<ReferenceModel, DataError> {
    if pool.samples.is_empty() {
        return Err(DataError::InsufficientData("reference split is empty".into()));
    }
    let descriptor = spec.descriptor(pool.height, pool.width, pool.class_count)?;
    let model = CompiledModel::new(&descriptor)?;
    let mut params = init_parameters(&descriptor, &mut stream_rng(seed, Stream::Reference, 0))?;
    let (x, y) = flatten_samples(&pool.samples);
    minibatch_sgd(
        &model,
        &mut params,
        &x,
        &y,
        spec.epochs,
        spec.batch_size,
        spec.learning_rate,
        &mut stream_rng(seed, Stream::Reference, 1),
    )?;
    Ok(ReferenceModel { descriptor, params })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Replaces every pixel with `clamp(x + epsilon * sign(dLoss/dx), 0, 1)`
/// using the reference model's gradient for the sample's true label.
/// Labels are kept.
pub fn poison_fgsm(shard: ClientShard, reference: &ReferenceModel, epsilon: f64) -> Result<ClientShard, DataError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(DataError::InvalidSpec(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let mut shard = shard;
    if !shard.samples.is_empty() {
        let model = CompiledModel::new(&reference.descriptor)?;
        let (x, y) = flatten_samples(&shard.samples);
        let grads = model.input_gradients(&reference.params, &x, &y)?;
        let len = model.input_len();
        for (i, sample) in shard.samples.iter_mut().enumerate() {
            for (p, g) in sample.pixels.iter_mut().zip(&grads[i * len..(i + 1) * len]) {
                *p = (*p + epsilon * sign(*g)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(shard.into_poisoned())
}

/// Shifts every label `l` to `(l + 1) mod class_count`.
pub fn poison_label_flip(shard: ClientShard, class_count: usize) -> ClientShard {
    let mut shard = shard;
    for s in &mut shard.samples {
        s.label = (s.label + 1) % class_count;
    }
    shard.into_poisoned()
}

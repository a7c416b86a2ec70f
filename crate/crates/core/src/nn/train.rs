use rand::seq::SliceRandom;
use rand::Rng;

use super::{CompiledModel, NnError, ParameterVector};

/// Minibatch SGD over a flat dataset. Each epoch visits every sample once in
/// a fresh shuffle drawn from `rng`; the last batch may be short.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_sgd<R: Rng + ?Sized>(
    model: &CompiledModel,
    params: &mut ParameterVector,
    inputs: &[f64],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<(), NnError> {
    let len = model.input_len();
    if inputs.len() != labels.len() * len {
        return Err(NnError::InputShape {
            expected: len,
            actual: inputs.len(),
        });
    }
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut bx = Vec::with_capacity(batch_size * len);
    let mut by = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            bx.clear();
            by.clear();
            for &i in batch {
                bx.extend_from_slice(&inputs[i * len..(i + 1) * len]);
                by.push(labels[i]);
            }
            let (_, grads) = model.loss_and_gradients(params, &bx, &by)?;
            params.apply_gradient(&grads, learning_rate)?;
        }
    }
    Ok(())
}

use rand::Rng;

use super::{LayerSpec, ModelDescriptor, NnError, TensorShape};

/// Slice of the flat vector owned by one trainable layer: weights first,
/// then biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerView {
    pub layer_index: usize,
    pub offset: usize,
    pub len: usize,
    pub weight_len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerView {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len
    }

    pub fn bias_len(&self) -> usize {
        self.len - self.weight_len
    }
}

pub(crate) fn layout_of(descriptor: &ModelDescriptor) -> Result<Vec<LayerView>, NnError> {
    let shapes = descriptor.layer_shapes()?;
    let mut views = Vec::new();
    let mut offset = 0;
    let mut input: &TensorShape = &descriptor.input_shape;
    for (i, layer) in descriptor.layers.iter().enumerate() {
        let view = match *layer {
            LayerSpec::Conv {
                filters,
                kernel_h,
                kernel_w,
            } => {
                let receptive = input.dims()[0] * kernel_h * kernel_w;
                Some(LayerView {
                    layer_index: i,
                    offset,
                    len: filters * receptive + filters,
                    weight_len: filters * receptive,
                    fan_in: receptive,
                    fan_out: filters * kernel_h * kernel_w,
                })
            }
            LayerSpec::Dense { width } => {
                let fan_in = input.element_count();
                Some(LayerView {
                    layer_index: i,
                    offset,
                    len: fan_in * width + width,
                    weight_len: fan_in * width,
                    fan_in,
                    fan_out: width,
                })
            }
            _ => None,
        };
        if let Some(v) = view {
            offset += v.len;
            views.push(v);
        }
        input = &shapes[i];
    }
    Ok(views)
}

/// All trainable weights of a model as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerView>,
}

/// Gradient with the same layout as the [`ParameterVector`] it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerView>,
}

impl ParameterVector {
    /// Zero-filled parameters for `descriptor`.
    pub fn zeros(descriptor: &ModelDescriptor) -> Result<Self, NnError> {
        let layout = layout_of(descriptor)?;
        let total = layout.last().map_or(0, |v| v.offset + v.len);
        Ok(Self {
            values: vec![0.0; total],
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn view(&self, view: &LayerView) -> &[f64] {
        &self.values[view.offset..view.offset + view.len]
    }

    /// In-place `self -= learning_rate * grads`.
    pub fn apply_gradient(&mut self, grads: &GradientVector, learning_rate: f64) -> Result<(), NnError> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(NnError::LearningRate(learning_rate));
        }
        if grads.values.len() != self.values.len() {
            return Err(NnError::Layout {
                expected: self.values.len(),
                actual: grads.values.len(),
            });
        }
        for (p, g) in self.values.iter_mut().zip(&grads.values) {
            *p -= learning_rate * g;
        }
        Ok(())
    }
}

impl GradientVector {
    pub fn zeros_like(params: &ParameterVector) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
            layout: params.layout.clone(),
        }
    }
}

/// Glorot-uniform weights, `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`
/// per layer; biases start at exactly zero.
pub fn init_parameters<R: Rng + ?Sized>(
    descriptor: &ModelDescriptor,
    rng: &mut R,
) -> Result<ParameterVector, NnError> {
    let mut params = ParameterVector::zeros(descriptor)?;
    for view in params.layout.clone() {
        let bound = (6.0 / (view.fan_in + view.fan_out) as f64).sqrt();
        for w in &mut params.values[view.offset..view.offset + view.weight_len] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Returns `params - learning_rate * grads`.
pub fn sgd_step(
    params: &ParameterVector,
    grads: &GradientVector,
    learning_rate: f64,
) -> Result<ParameterVector, NnError> {
    let mut next = params.clone();
    next.apply_gradient(grads, learning_rate)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn dense_model(inputs: usize, hidden: usize, classes: usize) -> ModelDescriptor {
        ModelDescriptor::new(
            TensorShape::new(vec![inputs]).unwrap(),
            vec![
                LayerSpec::Dense { width: hidden },
                LayerSpec::Dense { width: classes },
                LayerSpec::SoftmaxOutput,
            ],
            classes,
        )
    }

    fn vector(values: Vec<f64>) -> ParameterVector {
        let layout = vec![LayerView {
            layer_index: 0,
            offset: 0,
            len: values.len(),
            weight_len: values.len(),
            fan_in: 1,
            fan_out: 1,
        }];
        ParameterVector { values, layout }
    }

    fn grads(values: Vec<f64>) -> GradientVector {
        let p = vector(values);
        GradientVector {
            values: p.values,
            layout: p.layout,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let d = dense_model(20, 8, 3);
        let a = init_parameters(&d, &mut rng_from(11)).unwrap();
        let b = init_parameters(&d, &mut rng_from(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), d.parameter_count().unwrap());
        for v in &a.layout {
            assert!(a.values[v.bias_offset()..v.offset + v.len].iter().all(|&x| x == 0.0));
            let bound = (6.0 / (v.fan_in + v.fan_out) as f64).sqrt();
            assert!(a.values[v.offset..v.bias_offset()].iter().all(|x| x.abs() < bound));
        }
    }

    #[test]
    fn init_weight_mean_is_centered() {
        // One 100x100 layer: 10,000 weights from U(-s, s), stderr = s / sqrt(3 * 10,000).
        let d = ModelDescriptor::new(
            TensorShape::new(vec![100]).unwrap(),
            vec![LayerSpec::Dense { width: 100 }],
            100,
        );
        let p = init_parameters(&d, &mut rng_from(5)).unwrap();
        let v = p.layout[0];
        let w = &p.values[v.offset..v.bias_offset()];
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let s = (6.0f64 / 200.0).sqrt();
        let stderr = s / (3.0f64 * 10_000.0).sqrt();
        assert!(mean.abs() <= 3.0 * stderr, "mean {mean} vs 3*stderr {}", 3.0 * stderr);
    }

    #[test]
    fn sgd_arithmetic() {
        let next = sgd_step(&vector(vec![1.0, 2.0]), &grads(vec![1.0, -1.0]), 1.0).unwrap();
        assert_eq!(next.values, vec![0.0, 3.0]);

        let same = sgd_step(&vector(vec![1.5, -2.0]), &grads(vec![0.0, 0.0]), 0.3).unwrap();
        assert_eq!(same.values, vec![1.5, -2.0]);

        let g = grads(vec![0.25, -0.75]);
        let two = sgd_step(&sgd_step(&vector(vec![3.0, 4.0]), &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let one = sgd_step(&vector(vec![3.0, 4.0]), &g, 1.0).unwrap();
        assert_eq!(two.values, one.values);
    }

    #[test]
    fn sgd_rejects_mismatch_and_bad_rate() {
        let p = vector(vec![1.0, 2.0]);
        assert!(matches!(sgd_step(&p, &grads(vec![1.0]), 0.1), Err(NnError::Layout { .. })));
        assert!(matches!(
            sgd_step(&p, &grads(vec![1.0, 1.0]), -0.1),
            Err(NnError::LearningRate(_))
        ));
    }
}

//! Minimal convolutional network engine.
//!
//! Forward pass, exact backpropagation for parameters and inputs, and plain
//! SGD over a flat parameter vector. Supported layers: valid convolution
//! (stride 1) with ReLU, 2x2/stride-2 max pooling, flatten, dense layers
//! (ReLU unless directly followed by the softmax output) and a softmax
//! output. All arithmetic is `f64`.

mod gemm;
mod model;
mod params;
mod train;

use std::fmt;

use thiserror::Error;

pub use model::{
    forward, input_gradient, loss_and_param_gradients, predict_labels, CompiledModel,
    Probabilities,
};
pub use params::{init_parameters, sgd_step, GradientVector, LayerView, ParameterVector};
pub use train::minibatch_sgd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid descriptor: {0}")]
    DescriptorInvalid(String),
    #[error("input shape mismatch: expected a multiple of {expected} values, got {actual}")]
    InputShape { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("parameter layout mismatch: expected {expected} values, got {actual}")]
    Layout { expected: usize, actual: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
    #[error("batch has {inputs} samples but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
}

/// Dimensions of a tensor, e.g. `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorShape {
    dims: Vec<usize>,
}

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self, NnError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(NnError::DescriptorInvalid(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    /// Single-channel image shape `[1, height, width]`.
    pub fn image(height: usize, width: usize) -> Result<Self, NnError> {
        Self::new(vec![1, height, width])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Valid convolution, stride 1, followed by ReLU.
    Conv {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    /// 2x2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    Flatten,
    Dense {
        width: usize,
    },
    SoftmaxOutput,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                kernel_h,
                kernel_w,
            } => write!(f, "Conv{filters}/{kernel_h}x{kernel_w}"),
            LayerSpec::MaxPool => write!(f, "MaxPool"),
            LayerSpec::Flatten => write!(f, "Flatten"),
            LayerSpec::Dense { width } => write!(f, "Dense{width}"),
            LayerSpec::SoftmaxOutput => write!(f, "Softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelDescriptor {
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl fmt::Display for ModelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        write!(f, "[{}] {}", self.input_shape, parts.join(" > "))
    }
}

impl ModelDescriptor {
    pub fn new(input_shape: TensorShape, layers: Vec<LayerSpec>, class_count: usize) -> Self {
        Self {
            input_shape,
            layers,
            class_count,
        }
    }

    /// Output shape of every layer, checking only that consecutive layers
    /// chain. Partial descriptors (no softmax head) are accepted here.
    pub fn layer_shapes(&self) -> Result<Vec<TensorShape>, NnError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer_output_shape(i, layer, &current)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    /// Full structural validation for a trainable classifier: shapes chain,
    /// every Conv is followed by MaxPool, and the network ends with
    /// `Dense(class_count)` then `SoftmaxOutput`.
    pub fn validate(&self) -> Result<(), NnError> {
        self.layer_shapes()?;
        if self.class_count == 0 {
            return Err(NnError::DescriptorInvalid("class_count must be positive".into()));
        }
        let n = self.layers.len();
        if n < 2
            || self.layers[n - 1] != LayerSpec::SoftmaxOutput
            || self.layers[n - 2]
                != (LayerSpec::Dense {
                    width: self.class_count,
                })
        {
            return Err(NnError::DescriptorInvalid(format!(
                "network must end with Dense({}) and SoftmaxOutput",
                self.class_count
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { .. } if self.layers.get(i + 1) != Some(&LayerSpec::MaxPool) => {
                    return Err(NnError::DescriptorInvalid(format!(
                        "layer {i}: convolution must be followed by max pooling"
                    )));
                }
                LayerSpec::SoftmaxOutput if i != n - 1 => {
                    return Err(NnError::DescriptorInvalid(format!(
                        "layer {i}: softmax output must be the last layer"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of trainable values (weights plus biases).
    pub fn parameter_count(&self) -> Result<usize, NnError> {
        let mut current = self.input_shape.clone();
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            total += layer_parameter_count(layer, &current);
            current = layer_output_shape(i, layer, &current)?;
        }
        Ok(total)
    }
}

/// Free-function form of [`ModelDescriptor::parameter_count`].
pub fn parameter_count(descriptor: &ModelDescriptor) -> Result<usize, NnError> {
    descriptor.parameter_count()
}

fn layer_parameter_count(layer: &LayerSpec, input: &TensorShape) -> usize {
    match *layer {
        LayerSpec::Conv {
            filters,
            kernel_h,
            kernel_w,
        } => {
            let in_channels = input.dims()[0];
            filters * in_channels * kernel_h * kernel_w + filters
        }
        LayerSpec::Dense { width } => input.element_count() * width + width,
        _ => 0,
    }
}

fn layer_output_shape(
    index: usize,
    layer: &LayerSpec,
    input: &TensorShape,
) -> Result<TensorShape, NnError> {
    let bad = |msg: String| NnError::DescriptorInvalid(format!("layer {index} ({layer}): {msg}"));
    match *layer {
        LayerSpec::Conv {
            filters,
            kernel_h,
            kernel_w,
        } => {
            let &[_, h, w] = input.dims() else {
                return Err(bad(format!("expects [c, h, w] input, got {input}")));
            };
            if filters == 0 || kernel_h == 0 || kernel_w == 0 {
                return Err(bad("filters and kernel dims must be positive".into()));
            }
            if kernel_h > h || kernel_w > w {
                return Err(bad(format!("kernel larger than input {input}")));
            }
            TensorShape::new(vec![filters, h - kernel_h + 1, w - kernel_w + 1])
        }
        LayerSpec::MaxPool => {
            let &[c, h, w] = input.dims() else {
                return Err(bad(format!("expects [c, h, w] input, got {input}")));
            };
            if h < 2 || w < 2 {
                return Err(bad(format!("input {input} too small to pool")));
            }
            TensorShape::new(vec![c, h / 2, w / 2])
        }
        LayerSpec::Flatten => TensorShape::new(vec![input.element_count()]),
        LayerSpec::Dense { width } => {
            if input.dims().len() != 1 {
                return Err(bad(format!("expects flat input, got {input}")));
            }
            if width == 0 {
                return Err(bad("width must be positive".into()));
            }
            TensorShape::new(vec![width])
        }
        LayerSpec::SoftmaxOutput => {
            if input.dims().len() != 1 {
                return Err(bad(format!("expects flat input, got {input}")));
            }
            Ok(input.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(filters: usize, kh: usize, kw: usize) -> LayerSpec {
        LayerSpec::Conv {
            filters,
            kernel_h: kh,
            kernel_w: kw,
        }
    }

    #[test]
    fn parameter_count_flatten_only_is_zero() {
        let d = ModelDescriptor::new(TensorShape::image(4, 4).unwrap(), vec![LayerSpec::Flatten], 2);
        assert_eq!(parameter_count(&d).unwrap(), 0);
    }

    #[test]
    fn parameter_count_single_conv() {
        let d = ModelDescriptor::new(TensorShape::image(28, 28).unwrap(), vec![conv(64, 3, 3)], 10);
        assert_eq!(parameter_count(&d).unwrap(), 64 * 9 + 64);
        assert_eq!(parameter_count(&d).unwrap(), 640);
    }

    #[test]
    fn parameter_count_single_dense() {
        let d = ModelDescriptor::new(
            TensorShape::new(vec![10]).unwrap(),
            vec![LayerSpec::Dense { width: 5 }],
            5,
        );
        assert_eq!(parameter_count(&d).unwrap(), 55);
    }

    #[test]
    fn shape_chain_and_validation() {
        let d = ModelDescriptor::new(
            TensorShape::image(14, 14).unwrap(),
            vec![
                conv(8, 3, 5),
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 16 },
                LayerSpec::Dense { width: 10 },
                LayerSpec::SoftmaxOutput,
            ],
            10,
        );
        let shapes = d.layer_shapes().unwrap();
        assert_eq!(shapes[0].dims(), &[8, 12, 10]);
        assert_eq!(shapes[1].dims(), &[8, 6, 5]);
        assert_eq!(shapes[2].dims(), &[240]);
        d.validate().unwrap();
    }

    #[test]
    fn odd_dims_truncate_when_pooling() {
        let d = ModelDescriptor::new(TensorShape::image(7, 9).unwrap(), vec![LayerSpec::MaxPool], 2);
        assert_eq!(d.layer_shapes().unwrap()[0].dims(), &[1, 3, 4]);
    }

    #[test]
    fn rejects_bad_structures() {
        let img = TensorShape::image(6, 6).unwrap();
        let kernel_too_big = ModelDescriptor::new(img.clone(), vec![conv(2, 7, 3)], 2);
        assert!(matches!(kernel_too_big.parameter_count(), Err(NnError::DescriptorInvalid(_))));

        let dense_on_image = ModelDescriptor::new(img.clone(), vec![LayerSpec::Dense { width: 2 }], 2);
        assert!(dense_on_image.layer_shapes().is_err());

        let no_pool = ModelDescriptor::new(
            img.clone(),
            vec![
                conv(2, 3, 3),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 2 },
                LayerSpec::SoftmaxOutput,
            ],
            2,
        );
        assert!(no_pool.validate().is_err());

        let wrong_head = ModelDescriptor::new(
            img,
            vec![LayerSpec::Flatten, LayerSpec::Dense { width: 3 }, LayerSpec::SoftmaxOutput],
            2,
        );
        assert!(wrong_head.validate().is_err());
        assert!(TensorShape::new(vec![3, 0]).is_err());
    }
}

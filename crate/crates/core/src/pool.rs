//! Random architectures for the exploration clusters.
//!
//! Each draw picks the number of conv layers, then a filter count and kernel
//! size per conv layer, all uniformly and independently. Every conv is
//! followed by max pooling; the head is Flatten, a hidden Dense layer and
//! the Dense(K) softmax output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::nn::{LayerSpec, ModelDescriptor, TensorShape};

const MAX_ATTEMPTS: usize = 100;
const BASE_HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("invalid pool configuration: {0}")]
    Invalid(String),
    #[error("no valid architecture for input {input} after {MAX_ATTEMPTS} draws")]
    Exhausted { input: TensorShape },
}

/// Positive rational used to shrink filter counts and the hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    num: u64,
    den: u64,
}

impl Scale {
    pub fn new(num: u64, den: u64) -> Result<Self, PoolError> {
        if num == 0 || den == 0 {
            return Err(PoolError::Invalid(format!("scale {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub const ONE: Scale = Scale { num: 1, den: 1 };

    /// `ceil(value * num / den)`, at least 1.
    pub fn apply(&self, value: usize) -> usize {
        ((value as u64 * self.num).div_ceil(self.den) as usize).max(1)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = PoolError;

    /// Accepts `a/b` or a plain integer.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PoolError::Invalid(format!("cannot parse scale {s:?}"));
        match s.split_once('/') {
            Some((a, b)) => Scale::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => Scale::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub conv_layer_choices: Vec<usize>,
    pub filter_choices: Vec<usize>,
    pub kernel_choices: Vec<(usize, usize)>,
    pub scale: Scale,
    pub input_shape: TensorShape,
    pub class_count: usize,
}

impl PoolConfig {
    /// The full-size pool: 1 or 2 conv layers, 64/128/196/256 filters and
    /// 3x3, 3x5, 5x3 or 5x5 kernels.
    pub fn standard(input_shape: TensorShape, class_count: usize, scale: Scale) -> Self {
        Self {
            conv_layer_choices: vec![1, 2],
            filter_choices: vec![64, 128, 196, 256],
            kernel_choices: vec![(3, 3), (3, 5), (5, 3), (5, 5)],
            scale,
            input_shape,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if self.conv_layer_choices.is_empty() || self.filter_choices.is_empty() || self.kernel_choices.is_empty() {
            return Err(PoolError::Invalid("every choice list must be non-empty".into()));
        }
        if self.filter_choices.contains(&0) || self.kernel_choices.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(PoolError::Invalid("filters and kernel dims must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(PoolError::Invalid("class_count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn scaled_filters(&self) -> Vec<usize> {
        self.filter_choices.iter().map(|&f| self.scale.apply(f)).collect()
    }

    pub fn hidden_width(&self) -> usize {
        self.scale.apply(BASE_HIDDEN_WIDTH)
    }
}

/// Draws one architecture. Draws whose kernels do not fit the input after
/// pooling are discarded and redrawn, up to 100 times.
pub fn sample_descriptor<R: Rng + ?Sized>(pool: &PoolConfig, rng: &mut R) -> Result<ModelDescriptor, PoolError> {
    pool.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let convs = pool.conv_layer_choices[rng.random_range(0..pool.conv_layer_choices.len())];
        let mut layers = Vec::with_capacity(2 * convs + 4);
        for _ in 0..convs {
            let filters = pool.scale.apply(pool.filter_choices[rng.random_range(0..pool.filter_choices.len())]);
            let (kernel_h, kernel_w) = pool.kernel_choices[rng.random_range(0..pool.kernel_choices.len())];
            layers.push(LayerSpec::Conv {
                filters,
                kernel_h,
                kernel_w,
            });
            layers.push(LayerSpec::MaxPool);
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                width: pool.hidden_width(),
            },
            LayerSpec::Dense {
                width: pool.class_count,
            },
            LayerSpec::SoftmaxOutput,
        ]);
        let descriptor = ModelDescriptor::new(pool.input_shape.clone(), layers, pool.class_count);
        if descriptor.validate().is_ok() {
            return Ok(descriptor);
        }
    }
    Err(PoolError::Exhausted {
        input: pool.input_shape.clone(),
    })
}

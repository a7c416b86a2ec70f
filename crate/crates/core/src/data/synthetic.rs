use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DatasetSpec, LabeledSample, SamplePool};
use crate::seed::{derive2, rng_from, stream_rng, Stream};

const MAX_PROTOTYPE_ATTEMPTS: u64 = 1000;

/// One prototype image per class: two bars and a square blob at intensity 1
/// on a zero background, redrawn until it differs from every earlier
/// prototype by an L2 distance of at least `side / 3`.
pub fn prototypes(class_count: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
    let min_distance = side as f64 / 3.0;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    for k in 0..class_count {
        let mut candidate = Vec::new();
        for attempt in 0..MAX_PROTOTYPE_ATTEMPTS {
            let mut rng = rng_from(derive2(seed, Stream::Prototype, k as u64, attempt));
            candidate = draw_pattern(side, &mut rng);
            let distinct = protos.iter().all(|p| l2(p, &candidate) >= min_distance);
            if distinct {
                break;
            }
        }
        protos.push(candidate);
    }
    protos
}

fn draw_pattern<R: Rng>(side: usize, rng: &mut R) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let thickness = (side / 7).max(1);
    for _ in 0..2 {
        let horizontal = rng.random_bool(0.5);
        let across = rng.random_range(0..=side - thickness);
        let length = rng.random_range(side / 2..=side);
        let start = rng.random_range(0..=side - length);
        for t in 0..thickness {
            for a in start..start + length {
                let (y, x) = if horizontal { (across + t, a) } else { (a, across + t) };
                img[y * side + x] = 1.0;
            }
        }
    }
    let blob = (side / 4).max(1);
    let by = rng.random_range(0..=side - blob);
    let bx = rng.random_range(0..=side - blob);
    for y in by..by + blob {
        for x in bx..bx + blob {
            img[y * side + x] = 1.0;
        }
    }
    img
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pool of `spec.pool_size()` samples. Sample `i` has class `i mod K`, so
/// classes are balanced to within one sample; pixels are the class
/// prototype scaled by `spec.intensity` plus Gaussian noise, clamped to
/// `[0, 1]`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<SamplePool, DataError> {
    spec.validate()?;
    let side = spec.image_side;
    let protos = prototypes(spec.class_count, side, spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| DataError::InvalidSpec(format!("noise_sigma: {e}")))?;
    let mut rng = stream_rng(spec.seed, Stream::Noise, 0);
    let samples = (0..spec.pool_size())
        .map(|id| {
            let label = id % spec.class_count;
            let pixels = protos[label]
                .iter()
                .map(|&p| {
                    let p = p * spec.intensity;
                    if spec.noise_sigma == 0.0 {
                        p
                    } else {
                        (p + noise.sample(&mut rng)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            LabeledSample { id, pixels, label }
        })
        .collect();
    Ok(SamplePool {
        height: side,
        width: side,
        class_count: spec.class_count,
        samples,
    })
}

use super::gemm::{gemm, Strides};
use super::params::{layout_of, GradientVector, LayerView, ParameterVector};
use super::{LayerSpec, ModelDescriptor, NnError};

/// Inference runs in chunks of this many samples to bound im2col buffers.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone)]
enum Stage {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        out_h: usize,
        out_w: usize,
        view: LayerView,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Dense {
        input: usize,
        output: usize,
        relu: bool,
        view: LayerView,
    },
    Softmax,
}

/// Row-major `rows x classes` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub rows: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl Probabilities {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.classes..(r + 1) * self.classes]
    }

    /// Argmax of every row; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|r| argmax(self.row(r))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// `acts[i]` is the output of stage `i`; the last entry holds logits.
    acts: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    pool_index: Vec<Vec<u32>>,
}

/// A validated descriptor with precomputed layer geometry and parameter
/// offsets. Cheap to build; build once per training loop.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    descriptor: ModelDescriptor,
    stages: Vec<Stage>,
    layout: Vec<LayerView>,
    input_len: usize,
    param_len: usize,
}

impl CompiledModel {
    pub fn new(descriptor: &ModelDescriptor) -> Result<Self, NnError> {
        descriptor.validate()?;
        let shapes = descriptor.layer_shapes()?;
        let layout = layout_of(descriptor)?;
        let mut views = layout.iter().copied();
        let mut stages = Vec::with_capacity(descriptor.layers.len());
        let mut input = descriptor.input_shape.clone();
        for (i, layer) in descriptor.layers.iter().enumerate() {
            let out = &shapes[i];
            let stage = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel_h,
                    kernel_w,
                } => Stage::Conv {
                    in_c: input.dims()[0],
                    in_h: input.dims()[1],
                    in_w: input.dims()[2],
                    filters,
                    kh: kernel_h,
                    kw: kernel_w,
                    out_h: out.dims()[1],
                    out_w: out.dims()[2],
                    view: views.next().expect("conv view"),
                },
                LayerSpec::MaxPool => Stage::Pool {
                    c: input.dims()[0],
                    h: input.dims()[1],
                    w: input.dims()[2],
                    out_h: out.dims()[1],
                    out_w: out.dims()[2],
                },
                LayerSpec::Flatten => Stage::Flatten,
                LayerSpec::Dense { width } => Stage::Dense {
                    input: input.element_count(),
                    output: width,
                    relu: descriptor.layers.get(i + 1) != Some(&LayerSpec::SoftmaxOutput),
                    view: views.next().expect("dense view"),
                },
                LayerSpec::SoftmaxOutput => Stage::Softmax,
            };
            stages.push(stage);
            input = out.clone();
        }
        let param_len = layout.last().map_or(0, |v| v.offset + v.len);
        Ok(Self {
            descriptor: descriptor.clone(),
            stages,
            layout,
            input_len: descriptor.input_shape.element_count(),
            param_len,
        })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn class_count(&self) -> usize {
        self.descriptor.class_count
    }

    pub fn parameter_count(&self) -> usize {
        self.param_len
    }

    pub fn layout(&self) -> &[LayerView] {
        &self.layout
    }

    fn check_params(&self, params: &ParameterVector) -> Result<(), NnError> {
        if params.values.len() != self.param_len {
            return Err(NnError::Layout {
                expected: self.param_len,
                actual: params.values.len(),
            });
        }
        Ok(())
    }

    fn batch_len(&self, inputs: &[f64]) -> Result<usize, NnError> {
        if inputs.is_empty() || !inputs.len().is_multiple_of(self.input_len) {
            return Err(NnError::InputShape {
                expected: self.input_len,
                actual: inputs.len(),
            });
        }
        Ok(inputs.len() / self.input_len)
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<(), NnError> {
        if labels.len() != n {
            return Err(NnError::LabelCount {
                inputs: n,
                labels: labels.len(),
            });
        }
        let classes = self.class_count();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelRange { label, classes });
        }
        Ok(())
    }

    /// Class probabilities for a flat batch of `n * input_len` values.
    pub fn probabilities(&self, params: &ParameterVector, inputs: &[f64]) -> Result<Probabilities, NnError> {
        self.check_params(params)?;
        let n = self.batch_len(inputs)?;
        let k = self.class_count();
        let mut values = Vec::with_capacity(n * k);
        for chunk in inputs.chunks(INFERENCE_CHUNK * self.input_len) {
            let rows = chunk.len() / self.input_len;
            let trace = self.run_forward(params, chunk, rows, false);
            let logits = trace.acts.last().expect("logits");
            for r in 0..rows {
                values.extend(softmax(&logits[r * k..(r + 1) * k]));
            }
        }
        Ok(Probabilities {
            rows: n,
            classes: k,
            values,
        })
    }

    /// Argmax class per sample, ties toward the lowest index.
    pub fn predict(&self, params: &ParameterVector, inputs: &[f64]) -> Result<Vec<usize>, NnError> {
        Ok(self.probabilities(params, inputs)?.argmax())
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn accuracy(&self, params: &ParameterVector, inputs: &[f64], labels: &[usize]) -> Result<f64, NnError> {
        let predicted = self.predict(params, inputs)?;
        self.check_labels(predicted.len(), labels)?;
        let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, params: &ParameterVector, inputs: &[f64], labels: &[usize]) -> Result<f64, NnError> {
        self.check_params(params)?;
        let n = self.batch_len(inputs)?;
        self.check_labels(n, labels)?;
        let k = self.class_count();
        let mut total = 0.0;
        for (c, chunk) in inputs.chunks(INFERENCE_CHUNK * self.input_len).enumerate() {
            let rows = chunk.len() / self.input_len;
            let trace = self.run_forward(params, chunk, rows, false);
            let logits = trace.acts.last().expect("logits");
            for r in 0..rows {
                let label = labels[c * INFERENCE_CHUNK + r];
                total += cross_entropy(&logits[r * k..(r + 1) * k], label);
            }
        }
        Ok(total / n as f64)
    }

    /// Mean cross-entropy and its exact gradient with respect to every
    /// parameter.
    pub fn loss_and_gradients(
        &self,
        params: &ParameterVector,
        inputs: &[f64],
        labels: &[usize],
    ) -> Result<(f64, GradientVector), NnError> {
        self.check_params(params)?;
        let n = self.batch_len(inputs)?;
        self.check_labels(n, labels)?;
        let trace = self.run_forward(params, inputs, n, true);
        let (loss, dlogits) = self.output_delta(&trace, labels, 1.0 / n as f64);
        let mut grads = GradientVector::zeros_like(params);
        self.backward(params, inputs, n, &trace, dlogits, Some(&mut grads.values), false);
        Ok((loss, grads))
    }

    /// Gradient of each sample's own cross-entropy with respect to its input
    /// values; returns `n * input_len` values laid out like `inputs`.
    pub fn input_gradients(
        &self,
        params: &ParameterVector,
        inputs: &[f64],
        labels: &[usize],
    ) -> Result<Vec<f64>, NnError> {
        self.check_params(params)?;
        let n = self.batch_len(inputs)?;
        self.check_labels(n, labels)?;
        let trace = self.run_forward(params, inputs, n, true);
        let (_, dlogits) = self.output_delta(&trace, labels, 1.0);
        Ok(self
            .backward(params, inputs, n, &trace, dlogits, None, true)
            .expect("input gradient requested"))
    }

    fn output_delta(&self, trace: &Trace, labels: &[usize], scale: f64) -> (f64, Vec<f64>) {
        let k = self.class_count();
        let logits = trace.acts.last().expect("logits");
        let mut delta = Vec::with_capacity(logits.len());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits[r * k..(r + 1) * k];
            loss += cross_entropy(row, label);
            for (c, p) in softmax(row).into_iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                delta.push((p - target) * scale);
            }
        }
        (loss / labels.len() as f64, delta)
    }

    /// Runs every stage except the softmax, which is folded into the loss.
    fn run_forward(&self, params: &ParameterVector, inputs: &[f64], n: usize, cache: bool) -> Trace {
        let p = &params.values;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.stages.len());
        let mut cols = Vec::with_capacity(self.stages.len());
        let mut pool_index = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input: &[f64] = acts.last().map_or(inputs, |a| a.as_slice());
            let (out, col, idx) = match *stage {
                Stage::Conv {
                    in_c,
                    in_h,
                    in_w,
                    filters,
                    kh,
                    kw,
                    out_h,
                    out_w,
                    view,
                } => {
                    let positions = out_h * out_w;
                    let q = in_c * kh * kw;
                    let np = n * positions;
                    let col = im2col(input, n, in_c, in_h, in_w, kh, kw, out_h, out_w);
                    let weights = &p[view.offset..view.bias_offset()];
                    let bias = &p[view.bias_offset()..view.offset + view.len];
                    let mut prod = vec![0.0; filters * np];
                    gemm(filters, q, np, weights, Strides::rows(q), &col, Strides::rows(np), 0.0, &mut prod, Strides::rows(np));
                    let mut out = vec![0.0; n * filters * positions];
                    for s in 0..n {
                        for f in 0..filters {
                            let src = &prod[f * np + s * positions..f * np + (s + 1) * positions];
                            let dst = &mut out[(s * filters + f) * positions..(s * filters + f + 1) * positions];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = (v + bias[f]).max(0.0);
                            }
                        }
                    }
                    (out, if cache { col } else { Vec::new() }, Vec::new())
                }
                Stage::Pool { c, h, w, out_h, out_w } => {
                    let (out, idx) = max_pool(input, n, c, h, w, out_h, out_w);
                    (out, Vec::new(), if cache { idx } else { Vec::new() })
                }
                Stage::Flatten => (input.to_vec(), Vec::new(), Vec::new()),
                Stage::Dense {
                    input: width_in,
                    output,
                    relu,
                    view,
                } => {
                    let weights = &p[view.offset..view.bias_offset()];
                    let bias = &p[view.bias_offset()..view.offset + view.len];
                    let mut out = Vec::with_capacity(n * output);
                    for _ in 0..n {
                        out.extend_from_slice(bias);
                    }
                    gemm(n, width_in, output, input, Strides::rows(width_in), weights, Strides::transposed(width_in), 1.0, &mut out, Strides::rows(output));
                    if relu {
                        for v in &mut out {
                            *v = v.max(0.0);
                        }
                    }
                    (out, Vec::new(), Vec::new())
                }
                Stage::Softmax => break,
            };
            if !cache {
                acts.clear();
            }
            acts.push(out);
            cols.push(col);
            pool_index.push(idx);
        }
        Trace {
            acts,
            cols,
            pool_index,
        }
    }

    /// Backpropagates `dlogits` through the stages preceding the softmax.
    /// Accumulates parameter gradients into `param_grads` when given and
    /// returns the input gradient when `want_input` is set.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &ParameterVector,
        inputs: &[f64],
        n: usize,
        trace: &Trace,
        dlogits: Vec<f64>,
        mut param_grads: Option<&mut Vec<f64>>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let p = &params.values;
        let last = self.stages.len() - 1; // softmax
        let mut delta = dlogits;
        for i in (0..last).rev() {
            let input: &[f64] = if i == 0 { inputs } else { &trace.acts[i - 1] };
            let output = &trace.acts[i];
            let need_input = i > 0 || want_input;
            delta = match self.stages[i] {
                Stage::Conv {
                    in_c,
                    in_h,
                    in_w,
                    filters,
                    kh,
                    kw,
                    out_h,
                    out_w,
                    view,
                } => {
                    let positions = out_h * out_w;
                    let q = in_c * kh * kw;
                    let np = n * positions;
                    let mut dz = vec![0.0; filters * np];
                    for s in 0..n {
                        for f in 0..filters {
                            let base = (s * filters + f) * positions;
                            for pos in 0..positions {
                                if output[base + pos] > 0.0 {
                                    dz[f * np + s * positions + pos] = delta[base + pos];
                                }
                            }
                        }
                    }
                    let col = &trace.cols[i];
                    if let Some(g) = param_grads.as_deref_mut() {
                        let gw = &mut g[view.offset..view.bias_offset()];
                        gemm(filters, np, q, &dz, Strides::rows(np), col, Strides::transposed(np), 1.0, gw, Strides::rows(q));
                        let gb = &mut g[view.bias_offset()..view.offset + view.len];
                        for f in 0..filters {
                            gb[f] += dz[f * np..(f + 1) * np].iter().sum::<f64>();
                        }
                    }
                    if need_input {
                        let weights = &p[view.offset..view.bias_offset()];
                        let mut dcol = vec![0.0; q * np];
                        gemm(q, filters, np, weights, Strides::transposed(q), &dz, Strides::rows(np), 0.0, &mut dcol, Strides::rows(np));
                        col2im(&dcol, n, in_c, in_h, in_w, kh, kw, out_h, out_w)
                    } else {
                        Vec::new()
                    }
                }
                Stage::Pool { c, h, w, out_h, out_w } => {
                    let mut din = vec![0.0; n * c * h * w];
                    let idx = &trace.pool_index[i];
                    let per_out = c * out_h * out_w;
                    for s in 0..n {
                        for o in 0..per_out {
                            din[s * c * h * w + idx[s * per_out + o] as usize] += delta[s * per_out + o];
                        }
                    }
                    din
                }
                Stage::Flatten => delta,
                Stage::Dense {
                    input: width_in,
                    output: width_out,
                    relu,
                    view,
                } => {
                    if relu {
                        for (d, &o) in delta.iter_mut().zip(output) {
                            if o <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    if let Some(g) = param_grads.as_deref_mut() {
                        let gw = &mut g[view.offset..view.bias_offset()];
                        gemm(width_out, n, width_in, &delta, Strides::transposed(width_out), input, Strides::rows(width_in), 1.0, gw, Strides::rows(width_in));
                        let gb = &mut g[view.bias_offset()..view.offset + view.len];
                        for s in 0..n {
                            for (b, d) in gb.iter_mut().zip(&delta[s * width_out..(s + 1) * width_out]) {
                                *b += d;
                            }
                        }
                    }
                    if need_input {
                        let weights = &p[view.offset..view.bias_offset()];
                        let mut din = vec![0.0; n * width_in];
                        gemm(n, width_out, width_in, &delta, Strides::rows(width_out), weights, Strides::rows(width_in), 0.0, &mut din, Strides::rows(width_in));
                        din
                    } else {
                        Vec::new()
                    }
                }
                Stage::Softmax => unreachable!("softmax is always the last stage"),
            };
        }
        want_input.then_some(delta)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    -(logits[label] - max - log_sum)
}

/// `col[q][s * P + p]` with `q = (c, i, j)` and `p = (y, x)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let positions = out_h * out_w;
    let np = n * positions;
    let mut col = vec![0.0; c * kh * kw * np];
    for s in 0..n {
        let img = &input[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let q = (ch * kh + i) * kw + j;
                    let row = &mut col[q * np + s * positions..q * np + (s + 1) * positions];
                    for y in 0..out_h {
                        let src = &img[ch * h * w + (y + i) * w + j..][..out_w];
                        row[y * out_w..(y + 1) * out_w].copy_from_slice(src);
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let positions = out_h * out_w;
    let np = n * positions;
    let mut out = vec![0.0; n * c * h * w];
    for s in 0..n {
        let img = &mut out[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let q = (ch * kh + i) * kw + j;
                    let row = &dcol[q * np + s * positions..q * np + (s + 1) * positions];
                    for y in 0..out_h {
                        let dst = &mut img[ch * h * w + (y + i) * w + j..][..out_w];
                        for (d, v) in dst.iter_mut().zip(&row[y * out_w..(y + 1) * out_w]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 pooling. The recorded index is the flat position of the
/// maximum inside the sample; the first maximum in scan order wins ties.
fn max_pool(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Vec<u32>) {
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut idx = Vec::with_capacity(out.capacity());
    for s in 0..n {
        let img = &input[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for y in 0..out_h {
                for x in 0..out_w {
                    let mut best = ch * h * w + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if img[at] > img[best] {
                            best = at;
                        }
                    }
                    out.push(img[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (out, idx)
}

/// Class probabilities for every sample in a flat batch.
pub fn forward(
    descriptor: &ModelDescriptor,
    params: &ParameterVector,
    inputs: &[f64],
) -> Result<Probabilities, NnError> {
    CompiledModel::new(descriptor)?.probabilities(params, inputs)
}

/// Mean cross-entropy over the batch and its gradient for all parameters.
pub fn loss_and_param_gradients(
    descriptor: &ModelDescriptor,
    params: &ParameterVector,
    inputs: &[f64],
    labels: &[usize],
) -> Result<(f64, GradientVector), NnError> {
    CompiledModel::new(descriptor)?.loss_and_gradients(params, inputs, labels)
}

/// Gradient of one sample's cross-entropy with respect to its pixels.
pub fn input_gradient(
    descriptor: &ModelDescriptor,
    params: &ParameterVector,
    sample: &[f64],
    label: usize,
) -> Result<Vec<f64>, NnError> {
    let model = CompiledModel::new(descriptor)?;
    if sample.len() != model.input_len() {
        return Err(NnError::InputShape {
            expected: model.input_len(),
            actual: sample.len(),
        });
    }
    model.input_gradients(params, sample, &[label])
}

pub fn predict_labels(
    descriptor: &ModelDescriptor,
    params: &ParameterVector,
    inputs: &[f64],
) -> Result<Vec<usize>, NnError> {
    CompiledModel::new(descriptor)?.predict(params, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_parameters, TensorShape};
    use crate::seed::rng_from;
    use rand::Rng;

    fn dense_only(inputs: usize, classes: usize) -> ModelDescriptor {
        ModelDescriptor::new(
            TensorShape::new(vec![inputs]).unwrap(),
            vec![LayerSpec::Dense { width: classes }, LayerSpec::SoftmaxOutput],
            classes,
        )
    }

    fn tiny_conv() -> ModelDescriptor {
        ModelDescriptor::new(
            TensorShape::image(6, 7).unwrap(),
            vec![
                LayerSpec::Conv {
                    filters: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                },
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 4 },
                LayerSpec::Dense { width: 3 },
                LayerSpec::SoftmaxOutput,
            ],
            3,
        )
    }

    fn random_inputs(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn rows_sum_to_one() {
        let d = tiny_conv();
        let p = init_parameters(&d, &mut rng_from(3)).unwrap();
        let probs = forward(&d, &p, &random_inputs(42 * 5, 9)).unwrap();
        assert_eq!(probs.rows, 5);
        for r in 0..probs.rows {
            let sum: f64 = probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(probs.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let d = dense_only(5, 4);
        let p = ParameterVector::zeros(&d).unwrap();
        let probs = forward(&d, &p, &random_inputs(10, 1)).unwrap();
        assert!(probs.values.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_two_class_softmax() {
        // W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2], x = [0.5, -1]
        // z = [0.5 - 2 + 0.1, -0.5 - 0.5 - 0.2] = [-1.4, -1.2]
        // p0 = 1 / (1 + e^{0.2})
        let d = dense_only(2, 2);
        let mut p = ParameterVector::zeros(&d).unwrap();
        p.values.copy_from_slice(&[1.0, 2.0, -1.0, 0.5, 0.1, -0.2]);
        let probs = forward(&d, &p, &[0.5, -1.0]).unwrap();
        let p0 = 1.0 / (1.0 + 0.2f64.exp());
        assert!((probs.values[0] - p0).abs() < 1e-12);
        assert!((probs.values[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_loss_is_ln_k() {
        let d = dense_only(3, 10);
        let p = ParameterVector::zeros(&d).unwrap();
        let (loss, _) = loss_and_param_gradients(&d, &p, &[0.2, 0.4, 0.6], &[7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_near_zero_loss() {
        let d = dense_only(1, 2);
        let mut p = ParameterVector::zeros(&d).unwrap();
        p.values.copy_from_slice(&[50.0, -50.0, 0.0, 0.0]);
        let (loss, _) = loss_and_param_gradients(&d, &p, &[1.0], &[0]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let d = dense_only(2, 3);
        let p = ParameterVector::zeros(&d).unwrap();
        assert_eq!(
            loss_and_param_gradients(&d, &p, &[0.0, 1.0], &[3]).unwrap_err(),
            NnError::LabelRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn input_shape_is_checked() {
        let d = tiny_conv();
        let p = init_parameters(&d, &mut rng_from(1)).unwrap();
        assert!(matches!(forward(&d, &p, &[0.0; 41]), Err(NnError::InputShape { .. })));
        assert!(matches!(input_gradient(&d, &p, &[0.0; 84], 0), Err(NnError::InputShape { .. })));
        let short = ParameterVector {
            values: vec![0.0; 3],
            layout: p.layout.clone(),
        };
        assert!(matches!(forward(&d, &short, &[0.0; 42]), Err(NnError::Layout { .. })));
    }

    #[test]
    fn zero_model_has_zero_input_gradient() {
        let d = tiny_conv();
        let p = ParameterVector::zeros(&d).unwrap();
        let g = input_gradient(&d, &p, &random_inputs(42, 2), 1).unwrap();
        assert_eq!(g.len(), 42);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        let probs = Probabilities {
            rows: 2,
            classes: 3,
            values: vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.0],
        };
        assert_eq!(probs.argmax(), vec![1, 0]);
    }

    #[test]
    fn predict_agrees_with_forward_argmax() {
        let d = tiny_conv();
        let p = init_parameters(&d, &mut rng_from(8)).unwrap();
        let x = random_inputs(42 * 100, 4);
        let probs = forward(&d, &p, &x).unwrap();
        let labels = predict_labels(&d, &p, &x).unwrap();
        for (r, &l) in labels.iter().enumerate() {
            let row = probs.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[l], max);
            assert!(row[..l].iter().all(|&v| v < max));
        }
    }

    #[test]
    fn pooling_ties_take_first_position() {
        let (out, idx) = max_pool(&[1.0, 1.0, 1.0, 1.0], 1, 1, 2, 2, 1, 1);
        assert_eq!(out, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }
}

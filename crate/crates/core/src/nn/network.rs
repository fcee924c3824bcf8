use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, LayerSpec};
use super::loss::{self, CLAMP_EPS};
use super::NnError;
use crate::par::Exec;
use crate::tensor::{ShapeError, Tensor};

/// A feed-forward stack of layers with its parameters.
///
/// Parameters are kept as a flat list `[w0, b0, w1, b1, ...]` in layer
/// order, which is also the order of [`Gradients`] and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    param_index: Vec<Option<usize>>,
    params: Vec<Tensor>,
}

/// One gradient tensor per parameter tensor, same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

impl Network {
    /// Build a network, checking shape compatibility and initializing
    /// parametric layers with fan-in scaled uniform weights and zero bias.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(input_shape, layers, |shape, fan_in| {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let n = shape.iter().product();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        })
    }

    /// Build with explicit parameter tensors (e.g. from an artifact).
    pub fn with_params(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Tensor>) -> Result<Self, NnError> {
        let mut net = Self::build(input_shape, layers, |shape, _| vec![0.0; shape.iter().product()])?;
        if params.len() != net.params.len() {
            return Err(NnError::Architecture(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (slot, p) in net.params.iter_mut().zip(params) {
            p.expect_shape(slot.shape())?;
            *slot = p;
        }
        Ok(net)
    }

    fn build(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        mut init: impl FnMut(&[usize], usize) -> Vec<f64>,
    ) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Architecture("network has no layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut param_index = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        for (i, spec) in layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty");
            let out = spec.output_shape(cur).ok_or_else(|| {
                NnError::Architecture(format!("layer {i} ({}) cannot accept shape {cur:?}", spec.name()))
            })?;
            if let Some((ws, bs)) = spec.param_shapes(cur) {
                param_index.push(Some(params.len()));
                let fan_in = spec.fan_in(cur);
                let w = init(&ws, fan_in);
                params.push(Tensor::new(ws, w)?);
                params.push(Tensor::zeros(bs));
            } else {
                param_index.push(None);
            }
            shapes.push(out);
        }
        Ok(Self { input_shape, layers, shapes, param_index, params })
    }

    /// The reference classifier for 128x128 grayscale inputs: three
    /// conv/relu/pool stages (16, 32, 64 filters), a 64-unit hidden layer
    /// and a two-way softmax.
    pub fn reference(seed: u64) -> Self {
        Self::new(vec![128, 128, 1], reference_layers(), seed).expect("reference architecture is consistent")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn layer_params(&self, i: usize) -> Option<(&[f64], &[f64])> {
        self.param_index[i].map(|p| (self.params[p].data(), self.params[p + 1].data()))
    }

    fn check_sample(&self, sample: &Tensor) -> Result<(), ShapeError> {
        sample.expect_shape(&self.input_shape)
    }

    /// Class probabilities for a single sample shaped like the input.
    pub fn predict_one(&self, sample: &Tensor) -> Result<Vec<f64>, NnError> {
        self.check_sample(sample)?;
        let mut act = sample.data().to_vec();
        for (i, spec) in self.layers.iter().enumerate() {
            let (out, _) =
                layers::forward(spec, &self.shapes[i], &self.shapes[i + 1], self.layer_params(i), &act, false);
            act = out;
        }
        Ok(act)
    }

    /// Batch forward pass; `batch` is shaped `(n, ...input_shape)` and the
    /// result `(n, classes)`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.forward_with(batch, Exec::default())
    }

    pub fn forward_with(&self, batch: &Tensor, exec: Exec) -> Result<Tensor, NnError> {
        let samples = self.split_batch(batch)?;
        let rows = exec.map(&samples, |s| self.predict_one(s));
        let mut data = Vec::with_capacity(samples.len() * self.output_len());
        for r in rows {
            data.extend(r?);
        }
        Ok(Tensor::new(vec![samples.len(), self.output_len()], data)?)
    }

    fn split_batch(&self, batch: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(ShapeError::Mismatch { expected, found: shape.to_vec() }.into());
        }
        Ok(batch.unstack())
    }

    /// Loss and parameter gradients for one sample, plus the gradient with
    /// respect to the input. `scale` multiplies the loss gradient (used for
    /// mean reduction over a batch).
    pub(crate) fn sample_gradients(
        &self,
        sample: &Tensor,
        target: &[f64],
        scale: f64,
    ) -> Result<(f64, Vec<Tensor>, Vec<f64>), NnError> {
        self.check_sample(sample)?;
        if target.len() != self.output_len() {
            return Err(ShapeError::Mismatch { expected: vec![self.output_len()], found: vec![target.len()] }.into());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(NnError::Architecture("training requires a final softmax layer".into()));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(sample.data().to_vec());
        for (i, spec) in self.layers.iter().enumerate() {
            let (out, cache) = layers::forward(
                spec,
                &self.shapes[i],
                &self.shapes[i + 1],
                self.layer_params(i),
                acts.last().expect("non-empty"),
                true,
            );
            acts.push(out);
            caches.push(cache);
        }
        let probs = acts.last().expect("non-empty");
        let loss = loss::sample_crossentropy(probs, target);
        let mut delta: Vec<f64> = probs
            .iter()
            .zip(target)
            .map(|(&p, &y)| if p > CLAMP_EPS && p < 1.0 - CLAMP_EPS { -scale * y / p } else { 0.0 })
            .collect();

        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        for i in (0..self.layers.len()).rev() {
            let g = self.param_index[i].map(|p| {
                let (a, b) = grads.split_at_mut(p + 1);
                (a[p].data_mut(), b[0].data_mut())
            });
            delta = layers::backward(
                &self.layers[i],
                &self.shapes[i],
                &self.shapes[i + 1],
                self.layer_params(i),
                &acts[i],
                &caches[i],
                &delta,
                g,
            );
        }
        Ok((loss, grads, delta))
    }

    /// Cross-entropy of one sample against `label` and its gradient with
    /// respect to the input.
    pub fn input_gradient(&self, sample: &Tensor, label: usize) -> Result<(f64, Tensor), NnError> {
        let mut target = vec![0.0; self.output_len()];
        *target.get_mut(label).ok_or_else(|| NnError::Config(format!("label {label} out of range")))? = 1.0;
        let (loss, _, dinput) = self.sample_gradients(sample, &target, 1.0)?;
        Ok((loss, Tensor::new(self.input_shape.clone(), dinput)?))
    }

    /// Mean categorical cross-entropy over the batch and its gradient.
    ///
    /// Per-sample gradients may be computed concurrently; they are summed in
    /// sample order so the result does not depend on `exec`.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor,
        onehot: &Tensor,
        exec: Exec,
    ) -> Result<(f64, Gradients), NnError> {
        let samples = self.split_batch(batch)?;
        let n = samples.len();
        onehot.expect_shape(&[n, self.output_len()])?;
        if n == 0 {
            return Err(NnError::EmptyInput);
        }
        let targets = onehot.unstack();
        let scale = 1.0 / n as f64;
        let per_sample = exec.map_range(n, |i| self.sample_gradients(&samples[i], targets[i].data(), scale));
        let mut total_loss = 0.0;
        let mut acc: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        for r in per_sample {
            let (l, g, _) = r?;
            total_loss += l;
            for (a, gi) in acc.iter_mut().zip(&g) {
                a.add_assign(gi);
            }
        }
        Ok((total_loss / n as f64, Gradients(acc)))
    }

    /// Round all parameters to `f32` precision, matching the on-disk format.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub fn reference_layers() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv2d { filters: 16, kernel: 3, stride: 1 },
        Relu,
        MaxPool2d { size: 2 },
        Conv2d { filters: 32, kernel: 3, stride: 1 },
        Relu,
        MaxPool2d { size: 2 },
        Conv2d { filters: 64, kernel: 3, stride: 1 },
        Relu,
        MaxPool2d { size: 2 },
        Flatten,
        Dense { units: 64 },
        Relu,
        Dense { units: 2 },
        Softmax,
    ]
}

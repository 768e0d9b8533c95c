//! Reverse-mode differentiation over stacks of dense layers.
//!
//! The engine is deliberately layer-granular: a forward pass records a [`Tape`]
//! holding each layer's input and pre-activation, and [`LayeredModel::backward`]
//! replays it in reverse, accumulating into every non-frozen [`Parameter`].
//! Gradients are zeroed by [`sgd_step`], never by `backward`.
//!
//! All reductions run in a fixed index order so reruns are bit-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    value: Tensor,
    grad: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `delta` into the gradient unless the parameter is frozen.
    pub fn accumulate(&mut self, delta: &[f64]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns an ordered collection of parameters.
///
/// The order returned by both accessors must agree; checkpoints, aggregation
/// and gradient checks all rely on it.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.parameters_mut()
            .into_iter()
            .for_each(|p| p.set_frozen(frozen));
    }

    fn is_fully_frozen(&self) -> bool {
        self.parameters().iter().all(|p| p.is_frozen())
    }

    fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Flat copy of every parameter value, in parameter order.
    fn flat_values(&self) -> Vec<f64> {
        self.parameters()
            .iter()
            .flat_map(|p| p.value().data().iter().copied())
            .collect()
    }

    /// Overwrites every parameter value from a flat vector produced by
    /// [`Parameterized::flat_values`] on an identically shaped object.
    fn load_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                op: "load_flat_values",
                expected: vec![total],
                actual: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.numel();
            p.value_mut()
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // Always +0.0 for the clamped branch; mixing relies on this for
            // bitwise reductions.
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `y = activation(x Wᵀ + b)` with `W` stored as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Parameter,
    bias: Parameter,
    activation: Activation,
}

/// Intermediates of one layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Tensor,
    pre_activation: Tensor,
    dims: (usize, usize),
}

impl LayerCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn pre_activation(&self) -> &Tensor {
        &self.pre_activation
    }
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::invalid("layer weights must be a matrix"));
        }
        let out_dim = weights.shape()[0];
        bias.ensure_shape("DenseLayer::new", &[out_dim])?;
        weights.ensure_finite("layer weights")?;
        bias.ensure_finite("layer bias")?;
        Ok(Self {
            weights: Parameter::new(weights),
            bias: Parameter::new(bias),
            activation,
        })
    }

    /// Uniform initialization in `±1/sqrt(in_dim)` for both weights and bias.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid(format!(
                "layer dims must be positive, got {in_dim}→{out_dim}"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(
            Tensor::new(vec![out_dim, in_dim], weights)?,
            Tensor::new(vec![out_dim], bias)?,
            activation,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weights.value().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.value().shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Parameter {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Parameter {
        &mut self.weights
    }

    pub fn bias(&self) -> &Parameter {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Parameter {
        &mut self.bias
    }

    /// Forward FLOPs for one sample (multiply-adds counted as two).
    pub fn forward_flops(&self) -> u64 {
        2 * (self.in_dim() * self.out_dim()) as u64
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        if input.shape().len() != 2 || input.cols() != in_dim {
            return Err(Error::ShapeMismatch {
                op: "DenseLayer::forward",
                expected: vec![input.rows(), in_dim],
                actual: input.shape().to_vec(),
            });
        }
        input.ensure_finite("layer input")?;
        let batch = input.rows();
        let w = self.weights.value().data();
        let b = self.bias.value().data();
        let x = input.data();
        let mut pre = vec![0.0; batch * out_dim];
        for r in 0..batch {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wo = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for i in 0..in_dim {
                    acc += wo[i] * xr[i];
                }
                pre[r * out_dim + o] = acc;
            }
        }
        let out: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let out = Tensor::new(vec![batch, out_dim], out)?;
        out.ensure_finite("layer output")?;
        let cache = LayerCache {
            input: input.clone(),
            pre_activation: Tensor::new(vec![batch, out_dim], pre)?,
            dims: (in_dim, out_dim),
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients (unless frozen) and returns the
    /// gradient with respect to the layer input.
    pub fn backward(&mut self, cache: &LayerCache, grad_output: &Tensor) -> Result<Tensor> {
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        if cache.dims != (in_dim, out_dim) {
            return Err(Error::TapeMismatch);
        }
        let batch = cache.input.rows();
        grad_output.ensure_shape("DenseLayer::backward", &[batch, out_dim])?;
        grad_output.ensure_finite("upstream gradient")?;

        let dz: Vec<f64> = grad_output
            .data()
            .iter()
            .zip(cache.pre_activation.data())
            .map(|(g, &z)| g * self.activation.derivative(z))
            .collect();
        let x = cache.input.data();

        if !self.weights.is_frozen() {
            let mut dw = vec![0.0; out_dim * in_dim];
            for r in 0..batch {
                let xr = &x[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let g = dz[r * out_dim + o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        row[i] += g * xr[i];
                    }
                }
            }
            self.weights.accumulate(&dw);
        }
        if !self.bias.is_frozen() {
            let mut db = vec![0.0; out_dim];
            for r in 0..batch {
                for o in 0..out_dim {
                    db[o] += dz[r * out_dim + o];
                }
            }
            self.bias.accumulate(&db);
        }

        let w = self.weights.value().data();
        let mut dx = vec![0.0; batch * in_dim];
        for r in 0..batch {
            let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let g = dz[r * out_dim + o];
                if g == 0.0 {
                    continue;
                }
                let wo = &w[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    dxr[i] += g * wo[i];
                }
            }
        }
        Tensor::new(vec![batch, in_dim], dx)
    }
}

impl Parameterized for DenseLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weights, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Cached intermediates of a [`LayeredModel::forward`] call.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<LayerCache>,
}

impl Tape {
    pub fn layers(&self) -> &[LayerCache] {
        &self.caches
    }

    /// Smallest `|z|` over every relu pre-activation on the tape. Finite
    /// differences are only trustworthy when this margin exceeds the
    /// perturbation's effect.
    pub fn relu_margin(&self, stack: &LayeredModel) -> f64 {
        self.caches
            .iter()
            .zip(stack.layers())
            .filter(|(_, l)| l.activation() == Activation::Relu)
            .flat_map(|(c, _)| c.pre_activation.data().iter().map(|z| z.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayeredModel {
    layers: Vec<DenseLayer>,
}

impl LayeredModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "LayeredModel::new",
                    expected: vec![pair[0].out_dim()],
                    actual: vec![pair[1].in_dim()],
                });
            }
        }
        Ok(Self { layers })
    }

    /// Builds `dims[0] → dims[1] → … → dims[n]` with the same activation on
    /// every layer.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], activation, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(DenseLayer::out_dim)
    }

    pub fn forward_flops(&self) -> u64 {
        self.layers.iter().map(DenseLayer::forward_flops).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        if let Some(in_dim) = self.in_dim() {
            if input.shape().len() != 2 || input.cols() != in_dim {
                return Err(Error::ShapeMismatch {
                    op: "LayeredModel::forward",
                    expected: vec![input.rows(), in_dim],
                    actual: input.shape().to_vec(),
                });
            }
        }
        input.ensure_finite("model input")?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&current)?;
            caches.push(cache);
            current = out;
        }
        Ok((current, Tape { caches }))
    }

    /// Inference-only forward pass.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Replays `tape` in reverse. Returns the gradient with respect to the
    /// stack input.
    pub fn backward(&mut self, tape: &Tape, grad_output: &Tensor) -> Result<Tensor> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::TapeMismatch);
        }
        let mut grad = grad_output.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches).rev() {
            grad = layer.backward(cache, &grad)?;
        }
        Ok(grad)
    }
}

impl Parameterized for LayeredModel {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.parameters_mut())
            .collect()
    }
}

/// Mean softmax cross-entropy over a batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::invalid("logits must be a [batch × classes] matrix"));
    }
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![batch],
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    logits.ensure_finite("logits")?;

    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * classes];
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max);
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            g[c] = (p - if c == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![batch, classes], grad)?))
}

/// Plain SGD: `value ← value − lr · grad` on every non-frozen parameter, then
/// zeroes all gradients. Nothing is modified if any gradient is non-finite.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be ≥ 0, got {lr}")));
    }
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    if params.iter().any(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    for p in params.iter_mut() {
        if !p.frozen && lr != 0.0 {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
            p.value.ensure_finite("parameter after SGD step")?;
        }
        p.zero_grad();
    }
    Ok(())
}

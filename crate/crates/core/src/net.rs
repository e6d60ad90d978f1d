//! Fully-connected decoders with hand-written backpropagation, the
//! Smooth-L1 loss and an Adam optimizer.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to this network")]
    MissingCache,
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
}

/// ReLU hidden layers and a sigmoid output layer over a flat parameter
/// vector. Per layer the weights come first (row-major, `out × in`), then
/// the biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Input followed by the post-activation output of every layer.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        let mut offsets = Vec::with_capacity(widths.len());
        let mut off = 0;
        offsets.push(0);
        for w in widths.windows(2) {
            off += w[0] * w[1] + w[1];
            offsets.push(off);
        }
        Ok(Self { widths: widths.to_vec(), offsets, params: vec![0.0; off] })
    }

    /// He-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut mlp = Self::zeros(widths)?;
        for layer in 0..mlp.num_layers() {
            let (fan_in, fan_out) = (mlp.widths[layer], mlp.widths[layer + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let start = mlp.offsets[layer];
            for w in &mut mlp.params[start..start + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self, NetError> {
        let mut mlp = Self::zeros(widths)?;
        if params.len() != mlp.params.len() {
            return Err(NetError::DimensionMismatch {
                expected: mlp.params.len(),
                got: params.len(),
            });
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let s = self.offsets[l];
        (&self.params[s..s + i * o], &self.params[s + i * o..s + i * o + o])
    }

    pub fn forward(&self, input: &[f64], cache: &mut MlpCache) -> Result<(), NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let n = self.num_layers();
        cache.acts.resize_with(n + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        for l in 0..n {
            let (w, b) = self.layer(l);
            let fan_in = self.widths[l];
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut rest[0];
            y.clear();
            for (o, &bias) in b.iter().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = row.iter().zip(x.iter()).fold(bias, |acc, (a, v)| acc + a * v);
                y.push(if l + 1 == n { sigmoid(z) } else { z.max(0.0) });
            }
        }
        Ok(())
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut cache = MlpCache::default();
        self.forward(input, &mut cache)?;
        Ok(cache.acts.pop().unwrap_or_default())
    }

    /// Reverse pass for loss gradient `upstream` w.r.t. the output.
    /// Parameter gradients are added into `grad_params`; the input gradient
    /// overwrites `grad_input`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grad_params: &mut [f64],
        grad_input: &mut [f64],
    ) -> Result<(), NetError> {
        let n = self.num_layers();
        if cache.acts.len() != n + 1
            || cache.acts.iter().zip(&self.widths).any(|(a, &w)| a.len() != w)
        {
            return Err(NetError::MissingCache);
        }
        for (got, expected) in [
            (upstream.len(), self.output_dim()),
            (grad_params.len(), self.params.len()),
            (grad_input.len(), self.input_dim()),
        ] {
            if got != expected {
                return Err(NetError::DimensionMismatch { expected, got });
            }
        }

        let out = &cache.acts[n];
        let mut delta: Vec<f64> =
            upstream.iter().zip(out).map(|(u, s)| u * s * (1.0 - s)).collect();
        let mut next = Vec::new();
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let s = self.offsets[l];
            let x = &cache.acts[l];
            {
                let g = &mut grad_params[s..s + fan_in * fan_out + fan_out];
                let (gw, gb) = g.split_at_mut(fan_in * fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (gw, &xv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *gw += d * xv;
                    }
                }
            }
            let (w, _) = self.layer(l);
            next.clear();
            next.resize(fan_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (acc, &wv) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *acc += d * wv;
                }
            }
            if l > 0 {
                // ReLU derivative, evaluated on the post-activation value.
                for (v, &a) in next.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        grad_input.copy_from_slice(&delta);
        Ok(())
    }
}

#[inline]
fn smooth_l1_elem(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        0.5 * r * r / beta
    } else {
        r.abs() - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_elem_grad(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

/// Element-wise Smooth-L1 sum (no reduction); callers divide by the element
/// count of the whole batch.
pub fn smooth_l1_sum(pred: &[f64], target: &[f64], beta: f64) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1_elem(p - t, beta)).sum()
}

/// Mean element-wise Smooth-L1 loss.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64, NetError> {
    if pred.len() != target.len() {
        return Err(NetError::DimensionMismatch { expected: pred.len(), got: target.len() });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(smooth_l1_sum(pred, target, beta) / pred.len() as f64)
}

/// Gradient of [`smooth_l1`] w.r.t. `pred`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64], beta: f64) -> Result<Vec<f64>, NetError> {
    if pred.len() != target.len() {
        return Err(NetError::DimensionMismatch { expected: pred.len(), got: target.len() });
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_elem_grad(p - t, beta) / n)
        .collect())
}

/// Writes `scale · d/dr smooth_l1(pred - target)` into `out`.
pub(crate) fn smooth_l1_grad_into(pred: &[f64], target: &[f64], beta: f64, scale: f64, out: &mut [f64]) {
    for ((o, p), t) in out.iter_mut().zip(pred).zip(target) {
        *o = scale * smooth_l1_elem_grad(p - t, beta);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-15, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NetError> {
    for got in [grads.len(), state.m.len()] {
        if got != params.len() {
            return Err(NetError::DimensionMismatch { expected: params.len(), got });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

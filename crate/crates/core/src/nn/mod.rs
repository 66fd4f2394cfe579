//! A small dense-network engine with hand-derived gradients.
//!
//! Parameters and arithmetic are 64-bit; feature vectors are widened on entry.
//! Layer weights are stored `in_dim x out_dim` row-major, so
//! `y[j] = act(b[j] + sum_i x[i] * w[i * out_dim + j])`.

mod adam;
mod serialize;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use serialize::{load_model, read_model, save_model, write_model, MODEL_MAGIC};

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    #[inline]
    fn pre_activation(&self, input: &[f64], out: &mut Vec<f64>) {
        let n = self.spec.out_dim;
        out.clear();
        out.extend_from_slice(&self.biases);
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * n..(i + 1) * n];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }
}

/// A feed-forward network of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidShape("model needs at least one layer".into()));
    }
    for s in specs {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidShape(format!(
                "layer {}x{} has a zero dimension",
                s.in_dim, s.out_dim
            )));
        }
    }
    for pair in specs.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::DimensionMismatch {
                what: "layer chain",
                expected: pair[0].out_dim,
                found: pair[1].in_dim,
            });
        }
    }
    Ok(())
}

/// Xavier-uniform weights in `[-sqrt(6 / (in + out)), sqrt(6 / (in + out))]`,
/// zero biases.
pub fn init_model(specs: &[LayerSpec], seed: u64) -> Result<MlpModel> {
    check_chain(specs)?;
    let mut rng = seeded(seed, streams::INIT);
    let layers = specs
        .iter()
        .map(|&spec| {
            let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Layer {
                spec,
                weights: (0..spec.in_dim * spec.out_dim)
                    .map(|_| dist.sample(&mut rng))
                    .collect(),
                biases: vec![0.0; spec.out_dim],
            }
        })
        .collect();
    Ok(MlpModel { layers })
}

impl MlpModel {
    /// Builds a model from explicit parameters.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        check_chain(&specs)?;
        for l in &layers {
            if l.weights.len() != l.spec.in_dim * l.spec.out_dim {
                return Err(Error::DimensionMismatch {
                    what: "weight count",
                    expected: l.spec.in_dim * l.spec.out_dim,
                    found: l.weights.len(),
                });
            }
            if l.biases.len() != l.spec.out_dim {
                return Err(Error::DimensionMismatch {
                    what: "bias count",
                    expected: l.spec.out_dim,
                    found: l.biases.len(),
                });
            }
        }
        let model = MlpModel { layers };
        if let Some(index) = model.parameters().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters in serialization order: per layer, weights then biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        if let Some(index) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Output of the final layer without recording intermediates.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.predict_unchecked(input))
    }

    pub(crate) fn predict_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&current, &mut next);
            for v in next.iter_mut() {
                *v = layer.spec.activation.apply(*v);
            }
            std::mem::swap(&mut current, &mut next);
        }
        current
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// Input to each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    /// Final layer output.
    pub output: Vec<f64>,
}

pub fn forward(model: &MlpModel, input: &[f64]) -> Result<Activations> {
    model.check_input(input)?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut current = input.to_vec();
    for layer in &model.layers {
        let mut z = Vec::with_capacity(layer.spec.out_dim);
        layer.pre_activation(&current, &mut z);
        let out = z.iter().map(|&v| layer.spec.activation.apply(v)).collect();
        inputs.push(current);
        pre.push(z);
        current = out;
    }
    Ok(Activations {
        inputs,
        pre,
        output: current,
    })
}

/// Per-parameter gradients, plus the gradient with respect to the model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
            input: vec![0.0; model.input_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let pairs = self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(other.weights.iter().chain(other.biases.iter()));
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += y;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= factor);
        }
        self.input.iter_mut().for_each(|x| *x *= factor);
    }

    /// Parameter gradients in the same order as `MlpModel::parameters`.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }
}

/// Exact gradients of a scalar loss given `grad_output`, its gradient with
/// respect to the final layer output.
pub fn backward(model: &MlpModel, acts: &Activations, grad_output: &[f64]) -> Result<Gradients> {
    if acts.inputs.len() != model.layers.len() || acts.pre.len() != model.layers.len() {
        return Err(Error::DimensionMismatch {
            what: "recorded layer count",
            expected: model.layers.len(),
            found: acts.inputs.len(),
        });
    }
    if grad_output.len() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "output gradient",
            expected: model.output_dim(),
            found: grad_output.len(),
        });
    }
    let mut grads = Gradients::zeros(model);
    let mut upstream = grad_output.to_vec();
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let n = layer.spec.out_dim;
        let x = &acts.inputs[idx];
        let z = &acts.pre[idx];
        if x.len() != layer.spec.in_dim || z.len() != n {
            return Err(Error::DimensionMismatch {
                what: "recorded activation",
                expected: layer.spec.in_dim,
                found: x.len(),
            });
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(z)
            .map(|(&g, &pre)| g * layer.spec.activation.derivative(pre))
            .collect();
        let gw = &mut grads.weights[idx];
        let mut down = vec![0.0; layer.spec.in_dim];
        for (i, &xi) in x.iter().enumerate() {
            let row = &layer.weights[i * n..(i + 1) * n];
            let grow = &mut gw[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                grow[j] = xi * delta[j];
                acc += row[j] * delta[j];
            }
            down[i] = acc;
        }
        grads.biases[idx] = delta;
        upstream = down;
    }
    grads.input = upstream;
    Ok(grads)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Returns `-ln p[target]` (log floored at `1e-12`) and the gradient with
/// respect to the logits that produced `probabilities`, `p - onehot(target)`.
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= probabilities.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            probabilities.len()
        )));
    }
    let loss = -probabilities[target].max(LOG_FLOOR).ln();
    let mut grad = probabilities.to_vec();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

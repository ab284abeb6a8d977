//! Small differentiable predictors with closed-form loss and gradient.
//!
//! Parameter layout for softmax regression and MLPs: for each layer, the
//! weight matrix (`out × in`, row-major) followed by the bias vector (`out`).
//! Linear regression stores its weights then a single bias; the scalar
//! quadratic model has one parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// One parameter `w`, loss `mean_j (w − y_j)² = (w − ȳ)² + var(y)`.
    ScalarQuadratic,
    LinearRegression {
        input_dim: usize,
    },
    SoftmaxRegression {
        input_dim: usize,
        classes: usize,
    },
    /// Fully connected ReLU network with a softmax output layer.
    /// `layer_sizes = [input, hidden.., classes]`.
    Mlp {
        layer_sizes: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::ScalarQuadratic => Ok(()),
            ModelSpec::LinearRegression { input_dim } => {
                if *input_dim == 0 {
                    return Err(Error::config_key("model.input_dim", "must be positive"));
                }
                Ok(())
            }
            ModelSpec::SoftmaxRegression { input_dim, classes } => {
                if *input_dim == 0 || *classes < 2 {
                    return Err(Error::config_key(
                        "model",
                        "softmax regression needs input_dim >= 1 and classes >= 2",
                    ));
                }
                Ok(())
            }
            ModelSpec::Mlp { layer_sizes } => {
                if layer_sizes.len() < 2 {
                    return Err(Error::config_key(
                        "model.layer_sizes",
                        "needs at least input and output sizes",
                    ));
                }
                if layer_sizes.contains(&0) {
                    return Err(Error::config_key(
                        "model.layer_sizes",
                        "layer sizes must be positive",
                    ));
                }
                if *layer_sizes.last().unwrap() < 2 {
                    return Err(Error::config_key(
                        "model.layer_sizes",
                        "output layer needs at least 2 classes",
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(
            self,
            ModelSpec::SoftmaxRegression { .. } | ModelSpec::Mlp { .. }
        )
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::ScalarQuadratic => 0,
            ModelSpec::LinearRegression { input_dim } => *input_dim,
            ModelSpec::SoftmaxRegression { input_dim, .. } => *input_dim,
            ModelSpec::Mlp { layer_sizes } => layer_sizes[0],
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            ModelSpec::SoftmaxRegression { classes, .. } => Some(*classes),
            ModelSpec::Mlp { layer_sizes } => layer_sizes.last().copied(),
            _ => None,
        }
    }

    /// Layer sizes of the equivalent network for classifiers.
    fn layers(&self) -> Option<Vec<usize>> {
        match self {
            ModelSpec::SoftmaxRegression { input_dim, classes } => {
                Some(vec![*input_dim, *classes])
            }
            ModelSpec::Mlp { layer_sizes } => Some(layer_sizes.clone()),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::ScalarQuadratic => 1,
            ModelSpec::LinearRegression { input_dim } => input_dim + 1,
            _ => self
                .layers()
                .unwrap()
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major block of samples with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if inputs.len() != dim * targets.len() {
            return Err(Error::config(format!(
                "batch has {} input values, expected {} rows of dim {}",
                inputs.len(),
                targets.len(),
                dim
            )));
        }
        Ok(Batch {
            inputs,
            dim,
            targets,
        })
    }

    /// Scalar targets with no input features.
    pub fn scalar(values: Vec<f64>) -> Self {
        Batch {
            inputs: Vec::new(),
            dim: 0,
            targets: Targets::Values(values),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows (repeats allowed) into a new batch.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        Batch {
            inputs,
            dim: self.dim,
            targets,
        }
    }

    /// Concatenates batches with matching layout.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("cannot concatenate zero batches"))?;
        let mut inputs = Vec::new();
        let mut targets = match first.targets {
            Targets::Labels(_) => Targets::Labels(Vec::new()),
            Targets::Values(_) => Targets::Values(Vec::new()),
        };
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::config("batch dimension mismatch in concat"));
            }
            inputs.extend_from_slice(&p.inputs);
            match (&mut targets, &p.targets) {
                (Targets::Labels(a), Targets::Labels(b)) => a.extend_from_slice(b),
                (Targets::Values(a), Targets::Values(b)) => a.extend_from_slice(b),
                _ => return Err(Error::config("target kind mismatch in concat")),
            }
        }
        Ok(Batch {
            inputs,
            dim: first.dim,
            targets,
        })
    }
}

/// Glorot-uniform weights and zero biases for MLPs; zeros for every other kind.
pub fn init_params(spec: &ModelSpec, stream: RngStream) -> ModelParams {
    let mut params = ModelParams::zeros(spec.param_count());
    if let ModelSpec::Mlp { layer_sizes } = spec {
        let mut rng = stream.rng();
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params.0[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-a..a);
            }
            offset += fan_in * fan_out + fan_out;
        }
    }
    params
}

fn check(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if params.dim() != spec.param_count() {
        return Err(Error::config(format!(
            "parameter dimension {} does not match model ({})",
            params.dim(),
            spec.param_count()
        )));
    }
    if batch.dim != spec.input_dim() {
        return Err(Error::config(format!(
            "batch input dimension {} does not match model ({})",
            batch.dim,
            spec.input_dim()
        )));
    }
    match (&batch.targets, spec.classes()) {
        (Targets::Labels(labels), Some(c)) => {
            if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::config(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
        }
        (Targets::Values(_), None) => {}
        _ => return Err(Error::config("target kind does not match model kind")),
    }
    Ok(())
}

/// Working buffers for one forward/backward pass through a network.
struct Net<'a> {
    sizes: &'a [usize],
    params: &'a [f64],
    /// Pre-activations per layer (index 0 unused).
    z: Vec<Vec<f64>>,
    /// Activations per layer; `a[0]` is the input.
    a: Vec<Vec<f64>>,
}

impl<'a> Net<'a> {
    fn new(sizes: &'a [usize], params: &'a [f64]) -> Self {
        Net {
            sizes,
            params,
            z: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            a: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn forward(&mut self, x: &[f64]) -> &[f64] {
        self.a[0].copy_from_slice(x);
        let last = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 1..=last {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (prev, rest) = self.a.split_at_mut(l);
            let input = &prev[l - 1];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let s: f64 = row.iter().zip(input).map(|(p, v)| p * v).sum::<f64>() + b[o];
                self.z[l][o] = s;
                rest[0][o] = if l == last { s } else { s.max(0.0) };
            }
            offset += n_in * n_out + n_out;
        }
        &self.z[last]
    }

    /// Accumulates `scale * d(loss)/d(params)` given the output-layer delta.
    fn backward(&mut self, mut delta: Vec<f64>, scale: f64, grad: &mut [f64]) {
        let last = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(last);
        let mut off = 0;
        for l in 1..=last {
            offsets.push(off);
            off += self.sizes[l - 1] * self.sizes[l] + self.sizes[l];
        }
        for l in (1..=last).rev() {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let o0 = offsets[l - 1];
            let input = &self.a[l - 1];
            for o in 0..n_out {
                let d = delta[o] * scale;
                if d != 0.0 {
                    let g = &mut grad[o0 + o * n_in..o0 + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                grad[o0 + n_in * n_out + o] += d;
            }
            if l > 1 {
                let w = &self.params[o0..o0 + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wi;
                        }
                    }
                }
                for (p, z) in prev.iter_mut().zip(&self.z[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn eval(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
    want_grad: bool,
) -> Result<(f64, Option<ModelParams>)> {
    check(spec, params, batch)?;
    let n = batch.len() as f64;
    let p = params.as_slice();
    let mut grad = want_grad.then(|| ModelParams::zeros(params.dim()));
    let loss = match spec {
        ModelSpec::ScalarQuadratic => {
            let Targets::Values(ys) = &batch.targets else {
                unreachable!()
            };
            let mut loss = 0.0;
            let mut g = 0.0;
            for y in ys {
                let r = p[0] - y;
                loss += r * r;
                g += 2.0 * r;
            }
            if let Some(gr) = grad.as_mut() {
                gr.0[0] = g / n;
            }
            loss / n
        }
        ModelSpec::LinearRegression { input_dim } => {
            let Targets::Values(ys) = &batch.targets else {
                unreachable!()
            };
            let d = *input_dim;
            let mut loss = 0.0;
            for (i, y) in ys.iter().enumerate() {
                let x = batch.row(i);
                let pred: f64 = p[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[d];
                let r = pred - y;
                loss += r * r;
                if let Some(gr) = grad.as_mut() {
                    let c = 2.0 * r / n;
                    for (gj, xj) in gr.0[..d].iter_mut().zip(x) {
                        *gj += c * xj;
                    }
                    gr.0[d] += c;
                }
            }
            loss / n
        }
        _ => {
            let sizes = spec.layers().unwrap();
            let Targets::Labels(labels) = &batch.targets else {
                unreachable!()
            };
            let mut net = Net::new(&sizes, p);
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let z = net.forward(batch.row(i));
                let lse = log_sum_exp(z);
                loss += lse - z[y];
                if let Some(gr) = grad.as_mut() {
                    let mut delta: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
                    delta[y] -= 1.0;
                    net.backward(delta, 1.0 / n, &mut gr.0);
                }
            }
            loss / n
        }
    };
    Ok((loss, grad))
}

/// Mean cross-entropy (classifiers) or mean squared error (regression).
pub fn loss(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<f64> {
    eval(spec, params, batch, false).map(|(l, _)| l)
}

/// Exact gradient of [`loss`] by manual backpropagation.
pub fn grad(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<ModelParams> {
    eval(spec, params, batch, true).map(|(_, g)| g.unwrap())
}

pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f64, ModelParams)> {
    eval(spec, params, batch, true).map(|(l, g)| (l, g.unwrap()))
}

/// Output-layer logits for each row of `batch`.
pub fn logits(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    check(spec, params, batch)?;
    let sizes = spec
        .layers()
        .ok_or_else(|| Error::config("logits requested from a regression model"))?;
    let mut net = Net::new(&sizes, params.as_slice());
    Ok((0..batch.len())
        .map(|i| net.forward(batch.row(i)).to_vec())
        .collect())
}

/// Fraction of rows whose argmax logit (ties to the lowest class) is correct.
pub fn accuracy(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<f64> {
    if !spec.is_classifier() {
        return Err(Error::config("accuracy is only defined for classifiers"));
    }
    let z = logits(spec, params, batch)?;
    let Targets::Labels(labels) = &batch.targets else {
        unreachable!()
    };
    let correct = z
        .iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Largest coordinate-wise discrepancy between [`grad`] and a central
/// difference with step `h`, relative to `max(1, |analytic|)`.
pub fn fd_check(spec: &ModelSpec, params: &ModelParams, batch: &Batch, h: f64) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::config_key("h", "step must lie in (0, 1e-2]"));
    }
    let analytic = grad(spec, params, batch)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = loss(spec, &probe, batch)?;
        probe.0[i] = orig - h;
        let down = loss(spec, &probe, batch)?;
        probe.0[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.0[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

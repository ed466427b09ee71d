//! Minimal dense network with exact backpropagation.
//!
//! Everything the learners need and nothing else: fully connected layers with
//! relu / linear / softmax activations, three loss modes, plain SGD, soft
//! target updates, finite-difference gradient checking, and a plain-text
//! checkpoint format. No external ML dependency; determinism comes from the
//! caller's seeded RNG.
//!
//! Loss conventions:
//! * `Mse` is the mean over batch rows AND output components of the squared
//!   difference.
//! * `CrossEntropy` is `-(1/B) * sum t*log(a)` with a softmax final layer.
//! * `WeightedLogProb` is the same expression with unnormalized target rows:
//!   a row `weight * one_hot(action)` yields the policy-gradient step
//!   `weight * (softmax - one_hot)`, so negative weights push mass away.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {got} does not match network input {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("target width {got} does not match network output {want}")]
    TargetMismatch { got: usize, want: usize },
    #[error("batch rows disagree: {0}")]
    RaggedBatch(String),
    #[error("bad architecture: {0}")]
    BadSpec(String),
    #[error("architectures differ: {0}")]
    ArchMismatch(String),
    #[error("loss is not finite ({loss}): {detail}")]
    NonFiniteLoss { loss: f64, detail: String },
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
    WeightedLogProb,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    input: usize,
    output: usize,
    activation: Activation,
    /// Row-major (output x input).
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.output {
            let row = &self.weights[o * self.input..(o + 1) * self.input];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o];
            out.push(z);
        }
        match self.activation {
            Activation::Linear => {}
            Activation::Relu => {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Softmax => softmax_in_place(out),
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// A batch of inputs with matching targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, NnError> {
        if inputs.len() != targets.len() {
            return Err(NnError::RaggedBatch(format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.is_empty() {
            return Err(NnError::RaggedBatch("empty batch".into()));
        }
        let iw = inputs[0].len();
        let tw = targets[0].len();
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != iw {
                return Err(NnError::RaggedBatch(format!("input row {i} width differs")));
            }
        }
        for (i, row) in targets.iter().enumerate() {
            if row.len() != tw {
                return Err(NnError::RaggedBatch(format!("target row {i} width differs")));
            }
        }
        Ok(Self { inputs, targets })
    }
}

/// A fully connected network with SGD state (its learning rate).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    learning_rate: f64,
}

impl DenseNet {
    /// Builds a network with uniform `+-sqrt(6 / (fan_in + fan_out))` weight
    /// init and zero biases, drawn from the caller's RNG.
    pub fn new<R: Rng>(specs: &[LayerSpec], learning_rate: f64, rng: &mut R) -> Result<Self, NnError> {
        if specs.is_empty() {
            return Err(NnError::BadSpec("no layers".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(NnError::BadSpec(format!(
                    "layer sizes do not chain: {} -> {}",
                    pair[0].output, pair[1].input
                )));
            }
            if pair[0].activation == Activation::Softmax {
                return Err(NnError::BadSpec("softmax is only allowed as the final layer".into()));
            }
        }
        if !(learning_rate >= 0.0) {
            return Err(NnError::BadSpec(format!(
                "learning rate {learning_rate} must be non-negative (0 freezes the net)"
            )));
        }
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.input + s.output) as f64).sqrt();
                let weights = (0..s.input * s.output)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Layer {
                    input: s.input,
                    output: s.output,
                    activation: s.activation,
                    weights,
                    biases: vec![0.0; s.output],
                }
            })
            .collect();
        Ok(Self {
            layers,
            learning_rate,
        })
    }

    /// Standard shape used throughout: two relu layers of `hidden` units and
    /// a final layer of the requested activation.
    pub fn two_hidden<R: Rng>(
        input: usize,
        hidden: usize,
        output: usize,
        final_act: Activation,
        learning_rate: f64,
        rng: &mut R,
    ) -> Self {
        Self::new(
            &[
                LayerSpec::new(input, hidden, Activation::Relu),
                LayerSpec::new(hidden, hidden, Activation::Relu),
                LayerSpec::new(hidden, output, final_act),
            ],
            learning_rate,
            rng,
        )
        .expect("valid standard architecture")
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::new(l.input, l.output, l.activation))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Deterministic single-row evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_size() {
            return Err(NnError::WidthMismatch {
                got: input.len(),
                want: self.input_size(),
            });
        }
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass over a batch of rows.
    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NnError> {
        inputs.iter().map(|row| self.forward(row)).collect()
    }

    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        // activations[0] = input, activations[i] = output of layer i-1
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::new();
            layer.forward_into(acts.last().unwrap(), &mut out);
            acts.push(out);
        }
        acts
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NnError> {
        if batch.inputs[0].len() != self.input_size() {
            return Err(NnError::WidthMismatch {
                got: batch.inputs[0].len(),
                want: self.input_size(),
            });
        }
        if batch.targets[0].len() != self.output_size() {
            return Err(NnError::TargetMismatch {
                got: batch.targets[0].len(),
                want: self.output_size(),
            });
        }
        Ok(())
    }

    /// Loss of the batch under the given mode, without touching weights.
    pub fn loss(&self, batch: &Batch, loss: Loss) -> Result<f64, NnError> {
        self.check_batch(batch)?;
        let b = batch.inputs.len() as f64;
        let d = self.output_size() as f64;
        let mut total = 0.0;
        for (input, target) in batch.inputs.iter().zip(&batch.targets) {
            let out = self.forward(input)?;
            match loss {
                Loss::Mse => {
                    total += out
                        .iter()
                        .zip(target)
                        .map(|(o, t)| (o - t) * (o - t))
                        .sum::<f64>()
                        / d;
                }
                Loss::CrossEntropy | Loss::WeightedLogProb => {
                    total -= out
                        .iter()
                        .zip(target)
                        .filter(|(_, t)| **t != 0.0)
                        .map(|(o, t)| t * o.ln())
                        .sum::<f64>();
                }
            }
        }
        let value = total / b;
        if !value.is_finite() {
            return Err(NnError::NonFiniteLoss {
                loss: value,
                detail: format!("{loss:?} over batch of {}", batch.inputs.len()),
            });
        }
        Ok(value)
    }

    /// Exact gradients of the batch loss, flattened in parameter order
    /// (per layer: weights row-major, then biases). Returns (loss, grads).
    pub fn gradients(&self, batch: &Batch, loss: Loss) -> Result<(f64, Vec<f64>), NnError> {
        self.check_batch(batch)?;
        if matches!(loss, Loss::CrossEntropy | Loss::WeightedLogProb)
            && self.layers.last().unwrap().activation != Activation::Softmax
        {
            return Err(NnError::BadSpec(
                "log-likelihood losses need a softmax final layer".into(),
            ));
        }
        let b = batch.inputs.len() as f64;
        let d = self.output_size() as f64;
        let mut grads = vec![0.0; self.parameter_count()];
        let mut total_loss = 0.0;

        for (input, target) in batch.inputs.iter().zip(&batch.targets) {
            let acts = self.forward_cached(input);
            let out = acts.last().unwrap();

            // delta at the final layer's pre-activation
            let mut delta: Vec<f64> = match loss {
                Loss::Mse => {
                    total_loss += out
                        .iter()
                        .zip(target)
                        .map(|(o, t)| (o - t) * (o - t))
                        .sum::<f64>()
                        / (b * d);
                    let dl_da: Vec<f64> = out
                        .iter()
                        .zip(target)
                        .map(|(o, t)| 2.0 * (o - t) / (b * d))
                        .collect();
                    match self.layers.last().unwrap().activation {
                        Activation::Linear => dl_da,
                        Activation::Relu => dl_da
                            .iter()
                            .zip(out)
                            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Activation::Softmax => {
                            // Jacobian-vector product: a .* (g - <g, a>)
                            let dot: f64 = dl_da.iter().zip(out).map(|(g, a)| g * a).sum();
                            dl_da
                                .iter()
                                .zip(out)
                                .map(|(g, a)| a * (g - dot))
                                .collect()
                        }
                    }
                }
                Loss::CrossEntropy | Loss::WeightedLogProb => {
                    let mut sample_loss = 0.0;
                    for (o, t) in out.iter().zip(target) {
                        if *t != 0.0 {
                            sample_loss -= t * o.ln();
                        }
                    }
                    total_loss += sample_loss / b;
                    // fused softmax + log-likelihood gradient
                    let t_sum: f64 = target.iter().sum();
                    out.iter()
                        .zip(target)
                        .map(|(a, t)| (a * t_sum - t) / b)
                        .collect()
                }
            };

            // walk layers backwards accumulating parameter gradients
            let mut offset = self.parameter_count();
            for (li, layer) in self.layers.iter().enumerate().rev() {
                offset -= layer.weights.len() + layer.biases.len();
                let x = &acts[li];
                let w_grad = &mut grads[offset..offset + layer.weights.len()];
                for o in 0..layer.output {
                    let dz = delta[o];
                    if dz != 0.0 {
                        for (i, xi) in x.iter().enumerate() {
                            w_grad[o * layer.input + i] += dz * xi;
                        }
                    }
                }
                let b_grad = &mut grads[offset + layer.weights.len()..][..layer.biases.len()];
                for (o, dz) in delta.iter().enumerate() {
                    b_grad[o] += dz;
                }
                if li > 0 {
                    // propagate to previous layer's activation, then through
                    // its relu/linear derivative (hidden layers only)
                    let mut dx = vec![0.0; layer.input];
                    for o in 0..layer.output {
                        let dz = delta[o];
                        if dz != 0.0 {
                            let row = &layer.weights[o * layer.input..(o + 1) * layer.input];
                            for (i, w) in row.iter().enumerate() {
                                dx[i] += w * dz;
                            }
                        }
                    }
                    let prev = &self.layers[li - 1];
                    delta = match prev.activation {
                        Activation::Linear => dx,
                        Activation::Relu => dx
                            .iter()
                            .zip(&acts[li])
                            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Activation::Softmax => unreachable!("softmax only final"),
                    };
                }
            }
        }
        if !total_loss.is_finite() {
            return Err(NnError::NonFiniteLoss {
                loss: total_loss,
                detail: format!("{loss:?} over batch of {}", batch.inputs.len()),
            });
        }
        Ok((total_loss, grads))
    }

    /// One SGD step on the batch. Returns the pre-step loss.
    pub fn train_step(&mut self, batch: &Batch, loss: Loss) -> Result<f64, NnError> {
        let (value, grads) = self.gradients(batch, loss)?;
        let lr = self.learning_rate;
        for (p, g) in self.params_mut().zip(&grads) {
            *p -= lr * g;
        }
        Ok(value)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    /// Writes the checkpoint format: a versioned architecture line, then two
    /// lines per layer (weights row-major, biases).
    pub fn save<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let arch: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}x{}:{}", l.input, l.output, l.activation.tag()))
            .collect();
        writeln!(w, "densenet v1 lr {:?} layers {}", self.learning_rate, arch.join(" "))?;
        for layer in &self.layers {
            let mut line = String::new();
            for v in &layer.weights {
                line.push_str(&format!("{v:?} "));
            }
            writeln!(w, "{}", line.trim_end())?;
            let mut line = String::new();
            for v in &layer.biases {
                line.push_str(&format!("{v:?} "));
            }
            writeln!(w, "{}", line.trim_end())?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(NnError::Checkpoint("empty file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 5 || parts[0] != "densenet" || parts[1] != "v1" || parts[2] != "lr" || parts[4] != "layers" {
            return Err(NnError::Checkpoint("bad header".into()));
        }
        let learning_rate: f64 = parts[3]
            .parse()
            .map_err(|_| NnError::Checkpoint("bad learning rate".into()))?;
        let mut layers = Vec::new();
        for spec in &parts[5..] {
            let (dims, act) = spec
                .split_once(':')
                .ok_or(NnError::Checkpoint(format!("bad layer spec {spec}")))?;
            let (i, o) = dims
                .split_once('x')
                .ok_or(NnError::Checkpoint(format!("bad layer dims {dims}")))?;
            let input: usize = i.parse().map_err(|_| NnError::Checkpoint("bad input dim".into()))?;
            let output: usize = o.parse().map_err(|_| NnError::Checkpoint("bad output dim".into()))?;
            let activation = Activation::from_tag(act)
                .ok_or(NnError::Checkpoint(format!("unknown activation {act}")))?;
            let parse_line = |line: Option<&str>, n: usize, what: &str| -> Result<Vec<f64>, NnError> {
                let line = line.ok_or(NnError::Checkpoint(format!("missing {what} line")))?;
                let vals: Result<Vec<f64>, _> =
                    line.split_whitespace().map(|p| p.parse::<f64>()).collect();
                let vals = vals.map_err(|_| NnError::Checkpoint(format!("bad number in {what}")))?;
                if vals.len() != n {
                    return Err(NnError::Checkpoint(format!(
                        "{what} needs {n} values, got {}",
                        vals.len()
                    )));
                }
                Ok(vals)
            };
            let weights = parse_line(lines.next(), input * output, "weights")?;
            let biases = parse_line(lines.next(), output, "biases")?;
            layers.push(Layer {
                input,
                output,
                activation,
                weights,
                biases,
            });
        }
        if layers.is_empty() {
            return Err(NnError::Checkpoint("no layers".into()));
        }
        Ok(Self {
            layers,
            learning_rate,
        })
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::load(&text)
    }
}

/// Blends `target <- tau * online + (1 - tau) * target` elementwise.
pub fn soft_update(target: &mut DenseNet, online: &DenseNet, tau: f64) -> Result<(), NnError> {
    if target.specs() != online.specs() {
        return Err(NnError::ArchMismatch(format!(
            "{:?} vs {:?}",
            target.specs(),
            online.specs()
        )));
    }
    assert!((0.0..=1.0).contains(&tau) && tau > 0.0, "tau must be in (0, 1]");
    for (t, o) in target.params_mut().zip(online.params()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

/// Compares analytic gradients against central finite differences with step
/// 1e-5 and returns the max relative error
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` over all parameters.
pub fn gradient_check(net: &mut DenseNet, batch: &Batch, loss: Loss) -> Result<f64, NnError> {
    const STEP: f64 = 1e-5;
    let (_, analytic) = net.gradients(batch, loss)?;
    let n = net.parameter_count();
    let mut worst = 0.0f64;
    for idx in 0..n {
        let original = *net.params_mut().nth(idx).unwrap();
        *net.params_mut().nth(idx).unwrap() = original + STEP;
        let plus = net.loss(batch, loss)?;
        *net.params_mut().nth(idx).unwrap() = original - STEP;
        let minus = net.loss(batch, loss)?;
        *net.params_mut().nth(idx).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let g = analytic[idx];
        let err = (g - numeric).abs() / (g.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Target row for [`Loss::WeightedLogProb`]: `weight * one_hot(action)`.
pub fn weighted_one_hot(action: usize, weight: f64, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    row[action] = weight;
    row
}

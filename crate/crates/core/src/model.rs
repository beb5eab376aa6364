//! Dense feed-forward classifier with minibatch SGD and an optional proximal
//! penalty toward the broadcast global model.
//!
//! Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs. Its flat vector
//! holds the weight matrix in row-major `[out][in]` order followed by the
//! `out` biases. Hidden layers use ReLU; the output layer is softmax with
//! cross-entropy loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::rng::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("cannot train or evaluate on an empty dataset")]
    EmptyData,
    #[error("invalid train settings: {0}")]
    Settings(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    sizes: Vec<usize>,
    layers: Vec<Vec<f64>>,
}

fn layer_len(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

fn check_sizes(sizes: &[usize]) -> Result<(), ModelError> {
    if sizes.len() < 2 {
        return Err(ModelError::Architecture("need at least input and output sizes".into()));
    }
    if sizes.contains(&0) {
        return Err(ModelError::Architecture("layer sizes must be positive".into()));
    }
    if *sizes.last().unwrap() < 2 {
        return Err(ModelError::Architecture("softmax output needs at least 2 units".into()));
    }
    Ok(())
}

impl ModelParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self, ModelError> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| vec![0.0; layer_len(w[0], w[1])])
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn from_layers(sizes: &[usize], layers: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let shell = Self::zeros(sizes)?;
        if layers.len() != shell.layers.len() {
            return Err(ModelError::Shape(format!(
                "expected {} layers, got {}",
                shell.layers.len(),
                layers.len()
            )));
        }
        for (i, (a, b)) in shell.layers.iter().zip(&layers).enumerate() {
            if a.len() != b.len() {
                return Err(ModelError::Shape(format!(
                    "layer {i}: expected {} values, got {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.sizes == other.sizes
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    /// Returns a copy with the same shape and every value replaced by `f(i)`,
    /// where `i` indexes the flattened vector.
    pub fn map_flat(&self, mut f: impl FnMut(usize) -> f64) -> ModelParams {
        let mut out = self.clone();
        let mut i = 0;
        for layer in &mut out.layers {
            for v in layer.iter_mut() {
                *v = f(i);
                i += 1;
            }
        }
        out
    }

    fn weights(&self, l: usize) -> (&[f64], &[f64]) {
        let fan_in = self.sizes[l];
        let fan_out = self.sizes[l + 1];
        self.layers[l].split_at(fan_in * fan_out)
    }

    /// Class probabilities for one input row.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let acts = self.forward(x);
        acts.into_iter().last().unwrap()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// All layer activations, input first, softmax output last.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let (w, b) = self.weights(l);
            let input = &acts[l];
            let fan_in = input.len();
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 == n_layers {
                softmax_in_place(&mut z);
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Adds this sample's cross-entropy gradient into `grad` and returns its loss.
    fn accumulate_gradient(&self, x: &[f64], label: usize, grad: &mut ModelParams) -> f64 {
        let acts = self.forward(x);
        let probs = acts.last().unwrap();
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        // dL/dz for softmax + cross-entropy
        let mut delta: Vec<f64> = probs.clone();
        delta[label] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let input = &acts[l];
            let fan_in = input.len();
            let fan_out = delta.len();
            let g = &mut grad.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &mut g[o * fan_in..(o + 1) * fan_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
                g[fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let (w, _) = self.weights(l);
                delta = (0..fan_in)
                    .map(|i| {
                        let back: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                        if input[i] > 0.0 { back } else { 0.0 }
                    })
                    .collect();
            }
        }
        loss
    }

    /// Serialises as a text checkpoint: a `sizes` line, then one
    /// `layer <len>` header and one value line per layer.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("# fedsel model checkpoint v1\n");
        out.push_str("sizes");
        for s in &self.sizes {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
        for layer in &self.layers {
            out.push_str(&format!("layer {}\n", layer.len()));
            let values: Vec<String> = layer.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let sizes: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("sizes"))
            .ok_or_else(|| bad("missing sizes line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad layer size")))
            .collect::<Result<_, _>>()?;
        let mut layers = Vec::new();
        while let Some(header) = lines.next() {
            let len: usize = header
                .strip_prefix("layer ")
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad("bad layer header"))?;
            let values: Vec<f64> = lines
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_, _>>()?;
            if values.len() != len {
                return Err(bad("layer length does not match header"));
            }
            layers.push(values);
        }
        Self::from_layers(&sizes, layers)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(sizes: &[usize], seed: u64) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(sizes)?;
    let mut rng = rng_for(seed, "init_model", &[]);
    for l in 0..params.layers.len() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut params.layers[l][..fan_in * fan_out] {
            *w = rng.random_range(-limit..limit);
        }
    }
    Ok(params)
}

/// Layer sizes for a dataset: input width, the hidden widths, class count.
pub fn architecture_for(data: &Dataset, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(data.n_features());
    sizes.extend_from_slice(hidden);
    sizes.push(data.n_classes());
    sizes
}

pub const DEFAULT_HIDDEN: [usize; 1] = [32];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Zero means plain SGD.
    #[serde(default)]
    pub proximal_mu: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            learning_rate: 0.005,
            batch_size: 16,
            proximal_mu: 0.0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Settings(
                "local_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Settings(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.proximal_mu >= 0.0 && self.proximal_mu.is_finite()) {
            return Err(ModelError::Settings(format!(
                "proximal_mu {} must be finite and non-negative",
                self.proximal_mu
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_examples: usize,
    pub train_loss: f64,
}

fn check_data(params: &ModelParams, data: &Dataset) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if params.sizes[0] != data.n_features() {
        return Err(ModelError::Shape(format!(
            "model expects {} features, data has {}",
            params.sizes[0],
            data.n_features()
        )));
    }
    if *params.sizes.last().unwrap() < data.n_classes() {
        return Err(ModelError::Shape(format!(
            "model has {} outputs, data has {} classes",
            params.sizes.last().unwrap(),
            data.n_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `rows` plus `mu/2 * ||w - anchor||^2`, and its
/// gradient.
pub fn objective(
    params: &ModelParams,
    data: &Dataset,
    rows: &[usize],
    anchor: Option<(&ModelParams, f64)>,
) -> (f64, ModelParams) {
    let mut grad = ModelParams {
        sizes: params.sizes.clone(),
        layers: params.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
    };
    let mut loss = 0.0;
    for &i in rows {
        loss += params.accumulate_gradient(data.row(i), data.labels()[i], &mut grad);
    }
    let scale = 1.0 / rows.len() as f64;
    loss *= scale;
    grad.layers.iter_mut().flatten().for_each(|g| *g *= scale);
    if let Some((anchor, mu)) = anchor {
        if mu > 0.0 {
            for ((g, w), a) in grad
                .layers
                .iter_mut()
                .flatten()
                .zip(params.layers.iter().flatten())
                .zip(anchor.layers.iter().flatten())
            {
                let diff = w - a;
                *g += mu * diff;
                loss += 0.5 * mu * diff * diff;
            }
        }
    }
    (loss, grad)
}

/// Runs `local_epochs` of shuffled minibatch SGD starting from `global`.
pub fn local_train(
    global: &ModelParams,
    data: &Dataset,
    settings: &TrainSettings,
    client_id: usize,
    seed: u64,
) -> Result<ClientUpdate, ModelError> {
    settings.validate()?;
    check_data(global, data)?;
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_for(seed, "local_train", &[]);
    let anchor = Some((global, settings.proximal_mu));
    let mut epoch_loss = 0.0;
    for epoch in 0..settings.local_epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        for (step, batch) in order.chunks(settings.batch_size).enumerate() {
            let (loss, grad) = objective(&params, data, batch, anchor);
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, step });
            }
            epoch_loss += loss * batch.len() as f64;
            for (w, g) in params
                .layers
                .iter_mut()
                .flatten()
                .zip(grad.layers.iter().flatten())
            {
                *w -= settings.learning_rate * g;
            }
        }
        if !params.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                step: data.len().div_ceil(settings.batch_size),
            });
        }
    }
    Ok(ClientUpdate {
        client_id,
        params,
        num_examples: data.len(),
        train_loss: epoch_loss / data.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<Evaluation, ModelError> {
    check_data(params, data)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &label) in data.rows().zip(data.labels()) {
        let probs = params.predict_proba(row);
        if argmax(&probs) == label {
            correct += 1;
        }
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    fn small_data() -> Dataset {
        Dataset::new(
            vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8, -1.2, -0.7],
            2,
            vec![0, 1, 1, 0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_model(&[3, 5, 2], 4).unwrap();
        assert_eq!(a, init_model(&[3, 5, 2], 4).unwrap());
        assert_ne!(a, init_model(&[3, 5, 2], 5).unwrap());
        for (l, layer) in a.layers().iter().enumerate() {
            let n_w = a.sizes()[l] * a.sizes()[l + 1];
            assert!(layer[n_w..].iter().all(|b| *b == 0.0));
            assert_eq!(layer.len(), layer_len(a.sizes()[l], a.sizes()[l + 1]));
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(&[4, 3, 3]).unwrap();
        let probs = p.predict_proba(&[0.0; 4]);
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_architecture() {
        assert!(init_model(&[3], 0).is_err());
        assert!(init_model(&[3, 0, 2], 0).is_err());
        assert!(init_model(&[3, 1], 0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_global() {
        let data = small_data();
        let global = init_model(&[2, 4, 2], 1).unwrap();
        let settings = TrainSettings {
            learning_rate: 0.0,
            ..TrainSettings::default()
        };
        let up = local_train(&global, &data, &settings, 3, 9).unwrap();
        assert_eq!(up.params, global);
        assert_eq!(up.client_id, 3);
        assert_eq!(up.num_examples, 4);
    }

    #[test]
    fn huge_mu_pins_params_to_global() {
        let data = generate_synthetic(64, 2, 2, 1).unwrap();
        let global = init_model(&[2, 4, 2], 1).unwrap();
        let settings = TrainSettings {
            local_epochs: 3,
            learning_rate: 1e-7,
            batch_size: 8,
            proximal_mu: 1e6,
        };
        let up = local_train(&global, &data, &settings, 0, 2).unwrap();
        for (a, b) in up.params.flatten().iter().zip(global.flatten()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = small_data();
        let params = init_model(&[2, 3, 2], 11).unwrap();
        let anchor = init_model(&[2, 3, 2], 12).unwrap();
        let rows: Vec<usize> = (0..4).collect();
        let mu = 0.3;
        let (_, grad) = objective(&params, &data, &rows, Some((&anchor, mu)));
        let flat = params.flatten();
        let h = 1e-6;
        let mut max_diff: f64 = 0.0;
        for (i, g) in grad.flatten().iter().enumerate() {
            let plus = params.map_flat(|j| if j == i { flat[j] + h } else { flat[j] });
            let minus = params.map_flat(|j| if j == i { flat[j] - h } else { flat[j] });
            let lp = objective(&plus, &data, &rows, Some((&anchor, mu))).0;
            let lm = objective(&minus, &data, &rows, Some((&anchor, mu))).0;
            max_diff = max_diff.max(((lp - lm) / (2.0 * h) - g).abs());
        }
        assert!(max_diff < 1e-4, "max diff {max_diff}");
    }

    #[test]
    fn proximal_step_adds_pull_toward_global() {
        let data = small_data();
        let global = init_model(&[2, 3, 2], 5).unwrap();
        // start away from the anchor so the proximal term is non-zero
        let start = global.map_flat(|i| global.flatten()[i] + 0.05 * (i as f64).sin());
        let lr = 0.1;
        let mu = 0.7;
        let settings = |mu| TrainSettings {
            local_epochs: 1,
            learning_rate: lr,
            batch_size: 4,
            proximal_mu: mu,
        };
        // One full batch step from `start`, anchored at `global`.
        let step = |mu: f64| {
            let (_, g) = objective(&start, &data, &[0, 1, 2, 3], Some((&global, mu)));
            start.map_flat(|i| start.flatten()[i] - lr * g.flatten()[i])
        };
        let plain = step(0.0);
        let prox = step(mu);
        for i in 0..start.n_params() {
            let expected = plain.flatten()[i] - lr * mu * (start.flatten()[i] - global.flatten()[i]);
            assert!((prox.flatten()[i] - expected).abs() < 1e-8);
        }
        // local_train with a single full batch agrees with the manual step
        let up = local_train(&start, &data, &settings(0.0), 0, 1).unwrap();
        for (a, b) in up.params.flatten().iter().zip(plain.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = generate_synthetic(64, 2, 2, 1).unwrap();
        let global = init_model(&[2, 8, 2], 1).unwrap();
        let settings = TrainSettings {
            local_epochs: 50,
            learning_rate: 1e308,
            batch_size: 4,
            proximal_mu: 0.0,
        };
        assert!(matches!(
            local_train(&global, &data, &settings, 0, 0),
            Err(ModelError::Diverged { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_shape_preserving() {
        let data = generate_synthetic(100, 3, 2, 2).unwrap();
        let global = init_model(&[3, 6, 2], 1).unwrap();
        let s = TrainSettings::default();
        let a = local_train(&global, &data, &s, 0, 42).unwrap();
        let b = local_train(&global, &data, &s, 0, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.params.same_shape(&global));
    }

    #[test]
    fn evaluate_constant_predictor() {
        // bias favours class 0
        let mut p = ModelParams::zeros(&[2, 2]).unwrap();
        p.layers_mut()[0][4] = 1.0;
        let zeros = Dataset::new(vec![0.3; 6], 2, vec![0, 0, 0], 2).unwrap();
        let ones = Dataset::new(vec![0.3; 6], 2, vec![1, 1, 1], 2).unwrap();
        assert_eq!(evaluate(&p, &zeros).unwrap().accuracy, 1.0);
        assert_eq!(evaluate(&p, &ones).unwrap().accuracy, 0.0);
        let empty = Dataset::new(vec![], 2, vec![], 2).unwrap();
        assert_eq!(evaluate(&p, &empty), Err(ModelError::EmptyData));
    }

    #[test]
    fn random_init_is_near_chance() {
        let data = generate_synthetic(10_000, 10, 2, 3).unwrap();
        let mut mean = 0.0;
        for seed in 0..10 {
            let p = init_model(&[10, 32, 2], seed).unwrap();
            let acc = evaluate(&p, &data).unwrap().accuracy;
            mean += acc / 10.0;
        }
        assert!((0.45..=0.55).contains(&mean), "mean accuracy {mean}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_model(&[3, 4, 2], 8).unwrap();
        let back = ModelParams::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, back);
        assert!(ModelParams::from_checkpoint("sizes 3 2\nlayer 2\n1 2\n").is_err());
    }
}

//! Instance classifier: a linear layer or a one-hidden-layer ReLU MLP with a
//! two-way softmax head, trained by plain SGD on soft-target cross-entropy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, softmax2, Matrix, Rng};

/// Predictions are clamped to this before `ln` in the loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Mlp { hidden: 128 }
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±1/√fan_in` for weights and bias.
    fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Dense::zeros(inputs, outputs);
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
        for b in &mut layer.bias {
            *b = rng.uniform_range(-bound, bound);
        }
        layer
    }

    fn inputs(&self) -> usize {
        self.weights.cols()
    }

    fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .row_iter()
                .zip(&self.bias)
                .map(|(w, b)| dot(w, x) + b),
        );
    }

    /// Accumulates `∂/∂W += g xᵀ`, `∂/∂b += g` into `grad`, and returns
    /// `Wᵀ g` when `want_input` is set.
    fn backprop(&self, x: &[f64], g: &[f64], grad: &mut Dense, want_input: bool) -> Vec<f64> {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            for (gw, xi) in grad.weights.row_mut(o).iter_mut().zip(x) {
                *gw += go * xi;
            }
        }
        if !want_input {
            return Vec::new();
        }
        let mut dx = vec![0.0; self.inputs()];
        for (o, &go) in g.iter().enumerate() {
            for (d, w) in dx.iter_mut().zip(self.weights.row(o)) {
                *d += go * w;
            }
        }
        dx
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.len() == other.bias.len()
    }
}

/// Parameters of the instance classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub arch: Arch,
    pub feature_dim: usize,
    pub layers: Vec<Dense>,
}

/// Gradient buffers, shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened in the same order as [`ClassifierParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Activations kept from a forward pass for backprop.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl ClassifierParams {
    pub fn init(arch: Arch, feature_dim: usize, rng: &mut Rng) -> Self {
        let layers = match arch {
            Arch::Linear => vec![Dense::init(feature_dim, 2, rng)],
            Arch::Mlp { hidden } => vec![
                Dense::init(feature_dim, hidden, rng),
                Dense::init(hidden, 2, rng),
            ],
        };
        ClassifierParams {
            arch,
            feature_dim,
            layers,
        }
    }

    pub fn zeros(arch: Arch, feature_dim: usize) -> Self {
        let layers = match arch {
            Arch::Linear => vec![Dense::zeros(feature_dim, 2)],
            Arch::Mlp { hidden } => {
                vec![Dense::zeros(feature_dim, hidden), Dense::zeros(hidden, 2)]
            }
        };
        ClassifierParams {
            arch,
            feature_dim,
            layers,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "input has {} features, classifier expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], cache: &mut ForwardCache) -> [f64; 2] {
        match self.layers.as_slice() {
            [out] => out.apply(x, &mut cache.logits),
            [hidden, out] => {
                hidden.apply(x, &mut cache.hidden);
                cache.hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                out.apply(&cache.hidden, &mut cache.logits);
            }
            _ => unreachable!("classifier has one or two layers"),
        }
        [cache.logits[0], cache.logits[1]]
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_dim(x)?;
        Ok(self.run(x, &mut ForwardCache::default()))
    }

    /// `[P(positive), P(negative)]`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2]> {
        Ok(softmax2(self.logits(x)?))
    }

    /// Positive-class probability; skips the dimension check.
    pub fn positive_prob(&self, x: &[f64], cache: &mut ForwardCache) -> f64 {
        softmax2(self.run(x, cache))[0]
    }

    /// Forward pass plus backprop of `dlogits` for one example. Returns the
    /// probabilities and, if requested, the gradient with respect to `x`.
    pub fn backprop_example(
        &self,
        x: &[f64],
        dlogits_of: impl FnOnce([f64; 2]) -> [f64; 2],
        grads: &mut Gradients,
        cache: &mut ForwardCache,
        want_input: bool,
    ) -> ([f64; 2], Vec<f64>) {
        let probs = softmax2(self.run(x, cache));
        let dlogits = dlogits_of(probs);
        let dx = match self.layers.as_slice() {
            [out] => out.backprop(x, &dlogits, &mut grads.layers[0], want_input),
            [hidden, out] => {
                let mut dh = out.backprop(&cache.hidden, &dlogits, &mut grads.layers[1], true);
                for (d, h) in dh.iter_mut().zip(&cache.hidden) {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                }
                hidden.backprop(x, &dh, &mut grads.layers[0], want_input)
            }
            _ => unreachable!("classifier has one or two layers"),
        };
        (probs, dx)
    }

    /// Mean soft cross-entropy over `batch` and its exact gradient.
    pub fn backward(&self, batch: &[(&[f64], [f64; 2])]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut cache = ForwardCache::default();
        let mut loss = 0.0;
        for (x, target) in batch {
            self.check_dim(x)?;
            let (probs, _) = self.backprop_example(
                x,
                |p| [p[0] - target[0], p[1] - target[1]],
                &mut grads,
                &mut cache,
                false,
            );
            loss += soft_cross_entropy(probs, *target);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    /// `θ ← θ - lr · ∇θ`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || !self
                .layers
                .iter()
                .zip(&grads.layers)
                .all(|(a, b)| a.same_shape(b))
        {
            return Err(Error::Shape(
                "gradient shape does not match parameters".into(),
            ));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(g.weights.as_slice())
            {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat().len() {
            return Err(Error::Shape("flat parameter length mismatch".into()));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.as_mut_slice() {
                *w = it.next().expect("length checked");
            }
            for b in &mut l.bias {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let expected = ClassifierParams::zeros(self.arch, self.feature_dim);
        if expected.layers.len() != self.layers.len()
            || !expected
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(a, b)| a.same_shape(b))
        {
            return Err(Error::Shape(format!(
                "layer shapes do not match {:?}",
                self.arch
            )));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier parameter"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: ClassifierParams = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ClassifierParams::from_json(&text)
    }
}

/// `-Σ target · ln(max(pred, LOG_CLAMP))`.
pub fn soft_cross_entropy(pred: [f64; 2], target: [f64; 2]) -> f64 {
    -(target[0] * pred[0].max(LOG_CLAMP).ln() + target[1] * pred[1].max(LOG_CLAMP).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

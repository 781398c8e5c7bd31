//! Bag-classification baselines: instance features are pooled into one bag
//! feature (element-wise max, mean, or attention-weighted sum) and a
//! classifier head predicts the bag label. Trained on bag labels only.

use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::eval::{score_dataset, EvalMetrics};
use crate::model::{
    soft_cross_entropy, Arch, ClassifierParams, ForwardCache, Gradients, SgdConfig,
};
use crate::numkit::{dot, softmax, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
    Attention,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "mean" => Ok(PoolKind::Mean),
            "attention" => Ok(PoolKind::Attention),
            other => Err(Error::InvalidArgument(format!(
                "unknown pooling kind {other:?}"
            ))),
        }
    }
}

/// Attention scorer `a_k ∝ exp(wᵀ tanh(V f_k))` plus the bag classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `L × M`, M the instance feature dimension.
    pub v: Matrix,
    pub w: Vec<f64>,
    pub head: ClassifierParams,
}

impl AttentionParams {
    pub fn init(feature_dim: usize, hidden: usize, head: Arch, rng: &mut Rng) -> Self {
        let bv = 1.0 / (feature_dim as f64).sqrt();
        let bw = 1.0 / (hidden as f64).sqrt();
        let mut v = Matrix::zeros(hidden, feature_dim);
        v.as_mut_slice()
            .iter_mut()
            .for_each(|x| *x = rng.uniform_range(-bv, bv));
        let w = (0..hidden).map(|_| rng.uniform_range(-bw, bw)).collect();
        AttentionParams {
            v,
            w,
            head: ClassifierParams::init(head, feature_dim, rng),
        }
    }

    fn logit(&self, f: &[f64]) -> f64 {
        self.v
            .row_iter()
            .zip(&self.w)
            .map(|(vr, wl)| wl * dot(vr, f).tanh())
            .sum()
    }
}

/// Attention weights over a bag (rows = instances) and the weighted bag
/// feature.
pub fn attention_pool(params: &AttentionParams, bag: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if bag.rows() == 0 {
        return Err(Error::InvalidArgument("attention over an empty bag".into()));
    }
    if bag.cols() != params.v.cols() {
        return Err(Error::Shape(format!(
            "bag features have dim {}, attention expects {}",
            bag.cols(),
            params.v.cols()
        )));
    }
    let logits: Vec<f64> = bag.row_iter().map(|f| params.logit(f)).collect();
    let attn = softmax(&logits)?;
    let mut feature = vec![0.0; bag.cols()];
    for (a, f) in attn.iter().zip(bag.row_iter()) {
        for (z, x) in feature.iter_mut().zip(f) {
            *z += a * x;
        }
    }
    Ok((feature, attn))
}

/// Min-max normalisation of attention weights over an evaluation corpus.
/// A constant corpus maps to 0.5.
pub fn attention_instance_scores(attn: &[f64]) -> Vec<f64> {
    let lo = attn.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attn.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; attn.len()];
    }
    attn.iter().map(|a| (a - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolModel {
    Max { head: ClassifierParams },
    Mean { head: ClassifierParams },
    Attention(AttentionParams),
}

/// Gradients of a [`PoolModel`]; the attention fields are empty for
/// max/mean pooling.
#[derive(Debug, Clone)]
pub struct PoolGradients {
    pub head: Gradients,
    pub v: Option<Matrix>,
    pub w: Option<Vec<f64>>,
}

impl PoolGradients {
    fn zeros_like(model: &PoolModel) -> Self {
        match model {
            PoolModel::Max { head } | PoolModel::Mean { head } => PoolGradients {
                head: Gradients::zeros_like(head),
                v: None,
                w: None,
            },
            PoolModel::Attention(a) => PoolGradients {
                head: Gradients::zeros_like(&a.head),
                v: Some(Matrix::zeros(a.v.rows(), a.v.cols())),
                w: Some(vec![0.0; a.w.len()]),
            },
        }
    }

    fn scale(&mut self, s: f64) {
        self.head.scale(s);
        if let Some(v) = &mut self.v {
            v.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        if let Some(w) = &mut self.w {
            w.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Attention `V`, then `w`, then the head, matching [`PoolModel::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(v) = &self.v {
            out.extend_from_slice(v.as_slice());
        }
        if let Some(w) = &self.w {
            out.extend_from_slice(w);
        }
        out.extend(self.head.flat());
        out
    }
}

impl PoolModel {
    pub fn init(
        kind: PoolKind,
        feature_dim: usize,
        head: Arch,
        attention_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            PoolKind::Max => PoolModel::Max {
                head: ClassifierParams::init(head, feature_dim, rng),
            },
            PoolKind::Mean => PoolModel::Mean {
                head: ClassifierParams::init(head, feature_dim, rng),
            },
            PoolKind::Attention => PoolModel::Attention(AttentionParams::init(
                feature_dim,
                attention_hidden,
                head,
                rng,
            )),
        }
    }

    pub fn kind(&self) -> PoolKind {
        match self {
            PoolModel::Max { .. } => PoolKind::Max,
            PoolModel::Mean { .. } => PoolKind::Mean,
            PoolModel::Attention(_) => PoolKind::Attention,
        }
    }

    pub fn head(&self) -> &ClassifierParams {
        match self {
            PoolModel::Max { head } | PoolModel::Mean { head } => head,
            PoolModel::Attention(a) => &a.head,
        }
    }

    /// Pooled bag feature.
    pub fn bag_feature(&self, bag: &Matrix) -> Result<Vec<f64>> {
        if bag.rows() == 0 {
            return Err(Error::InvalidArgument("cannot pool an empty bag".into()));
        }
        match self {
            PoolModel::Max { .. } => {
                let mut z = bag.row(0).to_vec();
                for row in bag.row_iter().skip(1) {
                    for (m, x) in z.iter_mut().zip(row) {
                        *m = m.max(*x);
                    }
                }
                Ok(z)
            }
            PoolModel::Mean { .. } => {
                let mut z = bag.col_sums();
                let k = bag.rows() as f64;
                z.iter_mut().for_each(|v| *v /= k);
                Ok(z)
            }
            PoolModel::Attention(a) => Ok(attention_pool(a, bag)?.0),
        }
    }

    /// Bag class probabilities `[positive, negative]`.
    pub fn predict(&self, bag: &Matrix) -> Result<[f64; 2]> {
        self.head().forward(&self.bag_feature(bag)?)
    }

    /// Loss and accumulated gradient for one bag with target `target`.
    fn accumulate(&self, bag: &Matrix, target: [f64; 2], grads: &mut PoolGradients) -> Result<f64> {
        let z = self.bag_feature(bag)?;
        let mut cache = ForwardCache::default();
        let (probs, dz) = self.head().backprop_example(
            &z,
            |p| [p[0] - target[0], p[1] - target[1]],
            &mut grads.head,
            &mut cache,
            true,
        );
        if let PoolModel::Attention(a) = self {
            accumulate_attention(a, bag, &dz, grads);
        }
        Ok(soft_cross_entropy(probs, target))
    }

    /// Mean bag cross-entropy over `bags` and its gradient.
    pub fn backward(&self, bags: &[(&Matrix, [f64; 2])]) -> Result<(f64, PoolGradients)> {
        if bags.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grads = PoolGradients::zeros_like(self);
        let mut loss = 0.0;
        for (bag, target) in bags {
            loss += self.accumulate(bag, *target, &mut grads)?;
        }
        let n = bags.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    pub fn sgd_step(&mut self, grads: &PoolGradients, lr: f64) -> Result<()> {
        match self {
            PoolModel::Max { head } | PoolModel::Mean { head } => head.sgd_step(&grads.head, lr),
            PoolModel::Attention(a) => {
                let (gv, gw) = match (&grads.v, &grads.w) {
                    (Some(gv), Some(gw)) if gv.shape() == a.v.shape() && gw.len() == a.w.len() => {
                        (gv, gw)
                    }
                    _ => return Err(Error::Shape("attention gradient shape mismatch".into())),
                };
                for (x, g) in a.v.as_mut_slice().iter_mut().zip(gv.as_slice()) {
                    *x -= lr * g;
                }
                for (x, g) in a.w.iter_mut().zip(gw) {
                    *x -= lr * g;
                }
                a.head.sgd_step(&grads.head, lr)
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            PoolModel::Max { head } | PoolModel::Mean { head } => head.flat(),
            PoolModel::Attention(a) => {
                a.v.as_slice()
                    .iter()
                    .chain(&a.w)
                    .copied()
                    .chain(a.head.flat())
                    .collect()
            }
        }
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        match self {
            PoolModel::Max { head } | PoolModel::Mean { head } => head.set_flat(values),
            PoolModel::Attention(a) => {
                let nv = a.v.as_slice().len();
                let nw = a.w.len();
                if values.len() < nv + nw {
                    return Err(Error::Shape("flat parameter length mismatch".into()));
                }
                a.v.as_mut_slice().copy_from_slice(&values[..nv]);
                a.w.copy_from_slice(&values[nv..nv + nw]);
                a.head.set_flat(&values[nv + nw..])
            }
        }
    }

    /// Instance scores, bag by bag. Attention models report min-max
    /// normalised attention weights over the whole dataset; max/mean models
    /// apply the head to each instance alone (a one-instance bag pools to
    /// itself).
    pub fn instance_scores(&self, bags: &[Bag]) -> Result<Vec<Vec<f64>>> {
        match self {
            PoolModel::Attention(a) => {
                let per_bag = bags
                    .iter()
                    .map(|b| attention_pool(a, &b.feature_matrix()).map(|(_, attn)| attn))
                    .collect::<Result<Vec<_>>>()?;
                let flat: Vec<f64> = per_bag.iter().flatten().copied().collect();
                let mut normed = attention_instance_scores(&flat).into_iter();
                Ok(per_bag
                    .iter()
                    .map(|b| normed.by_ref().take(b.len()).collect())
                    .collect())
            }
            PoolModel::Max { head } | PoolModel::Mean { head } => {
                let mut cache = ForwardCache::default();
                Ok(bags
                    .iter()
                    .map(|b| {
                        b.instances
                            .iter()
                            .map(|i| head.positive_prob(&i.features, &mut cache))
                            .collect()
                    })
                    .collect())
            }
        }
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalMetrics> {
        let inst = self.instance_scores(&dataset.bags)?;
        let bag_scores = dataset
            .bags
            .iter()
            .map(|b| self.predict(&b.feature_matrix()).map(|p| p[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(score_dataset(dataset, &inst, &bag_scores, 0.5))
    }
}

fn accumulate_attention(a: &AttentionParams, bag: &Matrix, dz: &[f64], grads: &mut PoolGradients) {
    let hidden: Vec<Vec<f64>> = bag
        .row_iter()
        .map(|f| a.v.row_iter().map(|vr| dot(vr, f).tanh()).collect())
        .collect();
    let logits: Vec<f64> = hidden.iter().map(|h| dot(h, &a.w)).collect();
    let attn = softmax(&logits).expect("non-empty finite logits");
    // z = Σ a_k f_k  ⇒  ∂L/∂a_k = dz · f_k; softmax backward to the logits.
    let da: Vec<f64> = bag.row_iter().map(|f| dot(dz, f)).collect();
    let mean_da = dot(&attn, &da);
    let gv = grads.v.as_mut().expect("attention gradients");
    let gw = grads.w.as_mut().expect("attention gradients");
    for (k, f) in bag.row_iter().enumerate() {
        let ds = attn[k] * (da[k] - mean_da);
        if ds == 0.0 {
            continue;
        }
        for (l, &h) in hidden[k].iter().enumerate() {
            gw[l] += ds * h;
            let du = ds * a.w[l] * (1.0 - h * h);
            for (g, x) in gv.row_mut(l).iter_mut().zip(f) {
                *g += du * x;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: PoolKind,
    pub sgd: SgdConfig,
    pub head: Arch,
    pub attention_hidden: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: PoolKind::Attention,
            sgd: SgdConfig {
                learning_rate: 0.01,
                batch_size: 1,
                epochs: 30,
                seed: 0,
            },
            head: Arch::Linear,
            attention_hidden: 64,
        }
    }
}

/// Trains a pooling baseline end to end on bag labels.
pub fn pool_baseline_train(dataset: &Dataset, cfg: &BaselineConfig) -> Result<PoolModel> {
    dataset.require_both_classes()?;
    cfg.sgd.validate()?;
    let mut rng = Rng::new(cfg.sgd.seed);
    let mut model = PoolModel::init(
        cfg.kind,
        dataset.feature_dim,
        cfg.head,
        cfg.attention_hidden,
        &mut rng.fork(1),
    );
    let bags: Vec<(Matrix, [f64; 2])> = dataset
        .bags
        .iter()
        .map(|b| (b.feature_matrix(), b.label.one_hot()))
        .collect();
    let mut order: Vec<usize> = (0..bags.len()).collect();
    for _ in 0..cfg.sgd.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.sgd.batch_size) {
            let batch: Vec<(&Matrix, [f64; 2])> =
                chunk.iter().map(|&i| (&bags[i].0, bags[i].1)).collect();
            let (_, grads) = model.backward(&batch)?;
            model.sgd_step(&grads, cfg.sgd.learning_rate)?;
        }
    }
    Ok(model)
}

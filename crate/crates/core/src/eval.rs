//! Metrics: rank-based ROC AUC, bag inference from instance probabilities,
//! pseudo-label quality, and the instance-vs-bag label entropy analysis.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset, Label};
use crate::error::{Error, Result};
use crate::labeling::PseudoLabelMatrix;
use crate::model::{ClassifierParams, ForwardCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Area under the ROC curve via midranks: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean.
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += mid_rank * pos_in_group as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
    Ok(RocResult { auc, n_pos, n_neg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagInference {
    #[default]
    Max,
    Mean,
}

/// Bag probability from instance probabilities.
pub fn pool_probabilities(probs: &[f64], mode: BagInference) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("cannot pool an empty bag".into()));
    }
    Ok(match mode {
        BagInference::Max => probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        BagInference::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
    })
}

pub fn bag_predict(params: &ClassifierParams, bag: &Bag, mode: BagInference) -> Result<f64> {
    let probs = bag
        .instances
        .iter()
        .map(|i| params.forward(&i.features).map(|p| p[0]))
        .collect::<Result<Vec<_>>>()?;
    pool_probabilities(&probs, mode)
}

/// Positive probability for every instance, bag by bag.
pub fn instance_probabilities(params: &ClassifierParams, bags: &[Bag]) -> Vec<Vec<f64>> {
    let mut cache = ForwardCache::default();
    bags.iter()
        .map(|b| {
            b.instances
                .iter()
                .map(|i| params.positive_prob(&i.features, &mut cache))
                .collect()
        })
        .collect()
}

/// Instance- and bag-level scores of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub instance_auc: Option<f64>,
    pub bag_auc: Option<f64>,
    /// Bag predictions thresholded at 0.5.
    pub bag_accuracy: f64,
}

/// Scores a dataset from per-instance scores (bag by bag). Instance AUC needs
/// complete instance labels with both classes; bag AUC needs both bag
/// classes. Bag decisions compare `bag_score` with `threshold`.
pub fn score_dataset(
    dataset: &Dataset,
    instance_scores: &[Vec<f64>],
    bag_scores: &[f64],
    threshold: f64,
) -> EvalMetrics {
    let instance_auc = dataset.instance_labels().and_then(|labels| {
        let flat: Vec<f64> = instance_scores.iter().flatten().copied().collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.is_positive()).collect();
        roc_auc(&flat, &truth).ok().map(|r| r.auc)
    });
    let bag_truth: Vec<bool> = dataset.bags.iter().map(|b| b.label.is_positive()).collect();
    let bag_auc = roc_auc(bag_scores, &bag_truth).ok().map(|r| r.auc);
    let correct = bag_scores
        .iter()
        .zip(&bag_truth)
        .filter(|(&s, &t)| (s >= threshold) == t)
        .count();
    EvalMetrics {
        instance_auc,
        bag_auc,
        bag_accuracy: correct as f64 / bag_truth.len().max(1) as f64,
    }
}

pub fn evaluate(
    params: &ClassifierParams,
    dataset: &Dataset,
    mode: BagInference,
) -> Result<EvalMetrics> {
    if params.feature_dim != dataset.feature_dim {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, dataset has {}",
            params.feature_dim, dataset.feature_dim
        )));
    }
    let probs = instance_probabilities(params, &dataset.bags);
    let bag_scores = probs
        .iter()
        .map(|p| pool_probabilities(p, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_dataset(dataset, &probs, &bag_scores, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoMetrics {
    pub precision: f64,
    pub accuracy: f64,
    /// False when nothing was labelled positive; `precision` is then 1.0
    /// by convention.
    pub precision_defined: bool,
}

/// Precision and accuracy of row-argmax pseudo labels against the truth.
pub fn pseudo_label_metrics(q: &PseudoLabelMatrix, truth: &[Label]) -> Result<PseudoMetrics> {
    if q.n() != truth.len() {
        return Err(Error::Shape(format!(
            "{} pseudo labels for {} true labels",
            q.n(),
            truth.len()
        )));
    }
    let predicted = q.hard_labels();
    let (mut tp, mut fp, mut correct) = (0usize, 0usize, 0usize);
    for (&p, t) in predicted.iter().zip(truth) {
        let t = t.is_positive();
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            _ => {}
        }
        if p == t {
            correct += 1;
        }
    }
    let precision_defined = tp + fp > 0;
    Ok(PseudoMetrics {
        precision: if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            1.0
        },
        accuracy: correct as f64 / truth.len().max(1) as f64,
        precision_defined,
    })
}

/// Instance-label vs bag-label entropy for a bag of `k` independent
/// instances, each with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub k: usize,
    pub p: f64,
    pub h_instance: f64,
    pub h_bag: f64,
    pub difference: f64,
}

/// Binary entropy in bits with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

pub fn entropy_point(k: usize, p: f64) -> EntropyPoint {
    let h_instance = k as f64 * binary_entropy(p);
    let h_bag = binary_entropy(p.powi(k as i32));
    EntropyPoint {
        k,
        p,
        h_instance,
        h_bag,
        difference: h_instance - h_bag,
    }
}

/// Grid of entropy points, `k` outer and `p` inner.
pub fn entropy_curve(ks: &[usize], ps: &[f64]) -> Result<Vec<EntropyPoint>> {
    if let Some(k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidArgument(format!(
            "K must be at least 1, got {k}"
        )));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in [0, 1], got {p}"
        )));
    }
    Ok(ks
        .iter()
        .flat_map(|&k| ps.iter().map(move |&p| entropy_point(k, p)))
        .collect())
}

/// Writes `K,p,h_instance,h_bag,difference`.
pub fn write_entropy_csv(points: &[EntropyPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "K,p,h_instance,h_bag,difference")?;
    for pt in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            pt.k, pt.p, pt.h_instance, pt.h_bag, pt.difference
        )?;
    }
    Ok(())
}

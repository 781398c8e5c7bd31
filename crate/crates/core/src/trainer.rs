//! Weakly-supervised self-training.
//!
//! Each epoch alternates two phases:
//! 1. predict every positive-bag instance with the current classifier and
//!    turn the predictions into pseudo labels (optimal-transport assignment
//!    under the global positive-fraction constraint, then the per-bag local
//!    constraint);
//! 2. run SGD over shuffled batches mixing negative-bag instances (true
//!    negative targets) and positive-bag instances (pseudo-label targets).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pseudo_label_metrics, BagInference};
use crate::labeling::{
    adaptive_mu, apply_local_constraint, apply_local_constraint_by_prediction, naive_assign,
    sinkhorn_assign, LabelMode, LocalConstraintSource, MuSchedule, PredictionMatrix,
    PseudoLabelMatrix, SinkhornConfig,
};
use crate::model::{Arch, ClassifierParams, ForwardCache, SgdConfig};
use crate::numkit::Rng;

/// Switches for the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub soft_labels: bool,
    pub constrain: bool,
    pub adaptive_mu: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        soft_labels: true,
        constrain: true,
        adaptive_mu: true,
    };

    /// The four arms, from plain self-training to the full method.
    pub const SUITE: [Ablation; 4] = [
        Ablation {
            soft_labels: false,
            constrain: false,
            adaptive_mu: false,
        },
        Ablation {
            soft_labels: true,
            constrain: false,
            adaptive_mu: false,
        },
        Ablation {
            soft_labels: true,
            constrain: true,
            adaptive_mu: false,
        },
        Ablation::FULL,
    ];
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub sgd: SgdConfig,
    pub sinkhorn: SinkhornConfig,
    /// Target positive fraction and warm-up length. Without adaptive μ the
    /// target is `schedule.mu_final` from the first epoch.
    pub schedule: MuSchedule,
    pub reassign_every: usize,
    pub ablation: Ablation,
    pub local_constraint: LocalConstraintSource,
    pub bag_inference: BagInference,
    /// Seeds parameter initialisation; `sgd.seed` seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Mlp { hidden: 128 },
            sgd: SgdConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            schedule: MuSchedule {
                mu_final: 0.1,
                warmup: 10,
            },
            reassign_every: 1,
            ablation: Ablation::FULL,
            local_constraint: LocalConstraintSource::Assignment,
            bag_inference: BagInference::Max,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.sinkhorn.validate()?;
        self.schedule.validate()?;
        if self.reassign_every == 0 {
            return Err(Error::InvalidArgument(
                "reassign_every must be at least 1".into(),
            ));
        }
        if let Arch::Mlp { hidden: 0 } = self.arch {
            return Err(Error::InvalidArgument(
                "MLP hidden width must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn mu_at(&self, epoch: usize) -> f64 {
        if self.ablation.adaptive_mu {
            adaptive_mu(epoch, &self.schedule)
        } else {
            self.schedule.mu_final
        }
    }
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mu_t: f64,
    pub train_loss: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
    pub instance_auc: Option<f64>,
    pub bag_auc: Option<f64>,
    pub sinkhorn_converged: bool,
    /// Fraction of positive-bag instances whose pseudo label is positive.
    pub positive_fraction: f64,
    /// Positive-column mass of the pseudo labels.
    pub positive_mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "epoch,mu_t,loss,pseudo_precision,pseudo_accuracy,instance_auc,bag_auc,converged"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.mu_t,
                r.train_loss,
                opt(r.pseudo_precision),
                opt(r.pseudo_accuracy),
                opt(r.instance_auc),
                opt(r.bag_auc),
                r.sinkhorn_converged
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Where each positive-bag instance lives, in row order of P and Q.
#[derive(Debug, Clone)]
pub struct PositiveRows {
    /// `(bag index in dataset, instance index in bag)`.
    pub locations: Vec<(usize, usize)>,
    /// Row → index among positive bags.
    pub bag_of_row: Vec<usize>,
    pub n_bags: usize,
    pub truth: Option<Vec<Label>>,
}

impl PositiveRows {
    pub fn of(dataset: &Dataset) -> Self {
        let mut locations = Vec::new();
        let mut bag_of_row = Vec::new();
        let mut n_bags = 0;
        for (b, bag) in dataset.bags.iter().enumerate() {
            if !bag.label.is_positive() {
                continue;
            }
            for k in 0..bag.len() {
                locations.push((b, k));
                bag_of_row.push(n_bags);
            }
            n_bags += 1;
        }
        let truth = locations
            .iter()
            .map(|&(b, k)| dataset.bags[b].instances[k].label)
            .collect();
        PositiveRows {
            locations,
            bag_of_row,
            n_bags,
            truth,
        }
    }

    /// Classifier predictions over every row, in one inference pass.
    pub fn predict(
        &self,
        dataset: &Dataset,
        params: &ClassifierParams,
    ) -> Result<PredictionMatrix> {
        let mut cache = ForwardCache::default();
        let probs: Vec<f64> = self
            .locations
            .iter()
            .map(|&(b, k)| params.positive_prob(&dataset.bags[b].instances[k].features, &mut cache))
            .collect();
        PredictionMatrix::from_positive(&probs, self.bag_of_row.clone(), self.n_bags)
    }
}

/// One training example: features and a soft target, positive class first.
#[derive(Debug, Clone, Copy)]
pub struct TrainingItem<'a> {
    pub features: &'a [f64],
    pub target: [f64; 2],
    pub from_positive_bag: bool,
}

/// Shuffled partition of every instance into batches. Negative-bag
/// instances target `[0, 1]`; positive-bag instances target their row of
/// `q` (rows ordered as in [`PositiveRows`]).
pub fn mixed_batches<'a>(
    dataset: &'a Dataset,
    q: &PseudoLabelMatrix,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<TrainingItem<'a>>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut items = Vec::with_capacity(dataset.n_instances());
    let mut row = 0;
    for bag in &dataset.bags {
        for inst in &bag.instances {
            let item = if bag.label.is_positive() {
                if row >= q.n() {
                    return Err(Error::Shape(
                        "pseudo labels do not cover all positive-bag instances".into(),
                    ));
                }
                let t = q.row(row);
                row += 1;
                TrainingItem {
                    features: &inst.features,
                    target: t,
                    from_positive_bag: true,
                }
            } else {
                TrainingItem {
                    features: &inst.features,
                    target: Label::Negative.one_hot(),
                    from_positive_bag: false,
                }
            };
            items.push(item);
        }
    }
    if row != q.n() {
        return Err(Error::Shape(format!(
            "{} pseudo labels for {row} positive-bag instances",
            q.n()
        )));
    }
    rng.shuffle(&mut items);
    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        batches.push(iter.by_ref().take(batch_size).collect());
    }
    Ok(batches)
}

/// Pseudo labels for one reassignment round.
pub fn assign_pseudo_labels(
    p: &PredictionMatrix,
    mu: f64,
    cfg: &TrainConfig,
) -> Result<(PseudoLabelMatrix, bool)> {
    let (q, converged) = if cfg.ablation.constrain {
        let assignment = sinkhorn_assign(p, mu, &cfg.sinkhorn)?;
        let q = match cfg.local_constraint {
            LocalConstraintSource::Assignment => apply_local_constraint(&assignment.q)?,
            LocalConstraintSource::Prediction => {
                apply_local_constraint_by_prediction(&assignment.q, p)?
            }
        };
        (q, assignment.report.converged)
    } else {
        let mode = if cfg.ablation.soft_labels {
            LabelMode::Soft
        } else {
            LabelMode::Hard
        };
        (naive_assign(p, mode), true)
    };
    if cfg.ablation.soft_labels {
        Ok((q, converged))
    } else {
        Ok((q.binarize(), converged))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub record: RunRecord,
    /// Pseudo labels of the last assignment round.
    pub pseudo_labels: PseudoLabelMatrix,
}

/// Self-training with AUCs measured on the training data.
pub fn self_train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    self_train_with_eval(dataset, cfg, None)
}

/// Self-training; per-epoch AUCs are measured on `eval` when given,
/// otherwise on the training data.
pub fn self_train_with_eval(
    dataset: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.require_both_classes()?;
    if let Some(e) = eval {
        if e.feature_dim != dataset.feature_dim {
            return Err(Error::Shape(
                "evaluation data has a different feature dim".into(),
            ));
        }
    }
    let eval = eval.unwrap_or(dataset);
    let rows = PositiveRows::of(dataset);
    let mut params = ClassifierParams::init(cfg.arch, dataset.feature_dim, &mut Rng::new(cfg.seed));
    let mut batch_rng = Rng::new(cfg.sgd.seed);
    let mut record = RunRecord::default();
    let mut q: Option<PseudoLabelMatrix> = None;
    let mut converged = true;

    for epoch in 0..cfg.sgd.epochs {
        let mu_t = cfg.mu_at(epoch);
        if epoch % cfg.reassign_every == 0 || q.is_none() {
            let p = rows.predict(dataset, &params)?;
            let (assigned, ok) = assign_pseudo_labels(&p, mu_t, cfg)?;
            q = Some(assigned);
            converged = ok;
        }
        let labels = q.as_ref().expect("assigned above");
        let pseudo = rows
            .truth
            .as_ref()
            .map(|truth| pseudo_label_metrics(labels, truth))
            .transpose()?;

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in mixed_batches(dataset, labels, cfg.sgd.batch_size, &mut batch_rng)? {
            let pairs: Vec<(&[f64], [f64; 2])> =
                batch.iter().map(|it| (it.features, it.target)).collect();
            let (loss, grads) = params.backward(&pairs)?;
            params.sgd_step(&grads, cfg.sgd.learning_rate)?;
            loss_sum += loss * pairs.len() as f64;
            seen += pairs.len();
        }

        let metrics = evaluate(&params, eval, cfg.bag_inference)?;
        record.rows.push(EpochRow {
            epoch,
            mu_t,
            train_loss: loss_sum / seen.max(1) as f64,
            pseudo_precision: pseudo.map(|m| m.precision),
            pseudo_accuracy: pseudo.map(|m| m.accuracy),
            instance_auc: metrics.instance_auc,
            bag_auc: metrics.bag_auc,
            sinkhorn_converged: converged,
            positive_fraction: labels.positive_fraction(),
            positive_mass: labels.positive_mass(),
        });
    }

    let pseudo_labels = match q {
        Some(q) => q,
        // Zero epochs: report the assignment the untrained model would get.
        None => assign_pseudo_labels(&rows.predict(dataset, &params)?, cfg.mu_at(0), cfg)?.0,
    };
    Ok(TrainOutcome {
        params,
        record,
        pseudo_labels,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub instance_auc: Option<f64>,
    pub bag_auc: Option<f64>,
    pub final_positive_fraction: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "soft_labels,constrain,adaptive_mu,instance_auc,bag_auc,final_positive_fraction"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.ablation.soft_labels,
                r.ablation.constrain,
                r.ablation.adaptive_mu,
                opt(r.instance_auc),
                opt(r.bag_auc),
                r.final_positive_fraction
            )?;
        }
        Ok(())
    }
}

/// Runs the four ablation arms on identical data and seeds.
pub fn run_ablation_suite(
    dataset: &Dataset,
    base: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<AblationTable> {
    let rows = Ablation::SUITE
        .iter()
        .map(|&ablation| {
            let cfg = TrainConfig {
                ablation,
                ..base.clone()
            };
            let out = self_train_with_eval(dataset, &cfg, eval)?;
            let last = out.record.last();
            Ok(AblationRow {
                ablation,
                instance_auc: last.and_then(|r| r.instance_auc),
                bag_auc: last.and_then(|r| r.bag_auc),
                final_positive_fraction: out.pseudo_labels.positive_fraction(),
                record: out.record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_normal_bags, Bag, GenConfig, Instance};

    fn tiny() -> Dataset {
        let cfg = GenConfig {
            bag_size: 10,
            n_bags: 12,
            positive_ratio: 0.2,
            ..GenConfig::default()
        };
        generate_normal_bags(&cfg, &mut Rng::new(1)).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            arch: Arch::Mlp { hidden: 8 },
            sgd: SgdConfig {
                learning_rate: 0.05,
                batch_size: 16,
                epochs: 4,
                seed: 3,
            },
            schedule: MuSchedule {
                mu_final: 0.2,
                warmup: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_cover_every_instance_once() {
        let ds = tiny();
        let rows = PositiveRows::of(&ds);
        let q = PseudoLabelMatrix::from_positive(
            &vec![0.3; rows.locations.len()],
            rows.bag_of_row.clone(),
            rows.n_bags,
        )
        .unwrap();
        let batches = mixed_batches(&ds, &q, 7, &mut Rng::new(0)).unwrap();
        let total: usize = batches.iter().map(Vec::len).sum();
        assert_eq!(total, ds.n_instances());
        assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= 7));
        let mut seen: Vec<*const f64> = batches
            .iter()
            .flatten()
            .map(|i| i.features.as_ptr())
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), ds.n_instances());
        for item in batches.iter().flatten() {
            if item.from_positive_bag {
                assert_eq!(item.target, [0.3, 0.7]);
            } else {
                assert_eq!(item.target, [0.0, 1.0]);
            }
        }
    }

    #[test]
    fn batch_composition_tracks_corpus_ratio() {
        let ds = tiny();
        let rows = PositiveRows::of(&ds);
        let q = PseudoLabelMatrix::from_positive(
            &vec![0.5; rows.locations.len()],
            rows.bag_of_row.clone(),
            rows.n_bags,
        )
        .unwrap();
        let corpus_ratio = rows.locations.len() as f64 / ds.n_instances() as f64;
        // The first batch of each shuffle is a uniform sample, so its share of
        // positive-bag instances averages to the corpus ratio.
        let mut rng = Rng::new(5);
        let trials = 400;
        let mut share = 0.0;
        for _ in 0..trials {
            let batches = mixed_batches(&ds, &q, 10, &mut rng).unwrap();
            share += batches[0].iter().filter(|i| i.from_positive_bag).count() as f64 / 10.0;
        }
        assert!((share / trials as f64 - corpus_ratio).abs() < 0.03);
    }

    #[test]
    fn batches_reject_short_pseudo_labels() {
        let ds = tiny();
        let q = PseudoLabelMatrix::from_positive(&[0.5], vec![0], 1).unwrap();
        assert!(mixed_batches(&ds, &q, 4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn first_epoch_mu_is_half_with_adaptive_schedule() {
        let out = self_train(&tiny(), &quick_cfg()).unwrap();
        assert_eq!(out.record.rows[0].mu_t, 0.5);
        assert_eq!(out.record.rows[3].mu_t, 0.2);
        assert_eq!(out.record.rows.len(), 4);
        let epochs: Vec<usize> = out.record.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
    }

    #[test]
    fn constrained_assignment_keeps_bag_positive() {
        let ds = tiny();
        let cfg = quick_cfg();
        let out = self_train(&ds, &cfg).unwrap();
        let q = &out.pseudo_labels;
        let mut hard_pos = vec![0usize; q.n_bags()];
        for i in 0..q.n() {
            if q.row(i) == [1.0, 0.0] {
                hard_pos[q.bag_of_row()[i]] += 1;
            }
        }
        assert!(hard_pos.iter().all(|&c| c >= 1));
        // The local constraint can add at most one unit of mass per bag.
        let target = cfg.mu_at(3) * q.n() as f64;
        assert!(q.positive_mass() >= target - 1e-3);
        assert!(q.positive_mass() <= target + q.n_bags() as f64);
    }

    #[test]
    fn runs_are_bit_identical() {
        let ds = tiny();
        let a = self_train(&ds, &quick_cfg()).unwrap();
        let b = self_train(&ds, &quick_cfg()).unwrap();
        assert_eq!(a.record.to_csv_string(), b.record.to_csv_string());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn needs_both_bag_classes() {
        let bag = |label| Bag {
            bag_id: "b".into(),
            label,
            instances: vec![Instance {
                features: vec![0.0, 1.0],
                label: None,
            }],
        };
        let only_neg = Dataset::new("n", vec![bag(Label::Negative)]).unwrap();
        let only_pos = Dataset::new("p", vec![bag(Label::Positive)]).unwrap();
        assert!(self_train(&only_neg, &quick_cfg()).is_err());
        assert!(self_train(&only_pos, &quick_cfg()).is_err());
    }

    #[test]
    fn hard_label_ablation_binarizes() {
        let p =
            PredictionMatrix::from_positive(&[0.4, 0.7, 0.2, 0.9], vec![0, 0, 1, 1], 2).unwrap();
        let cfg = TrainConfig {
            ablation: Ablation {
                soft_labels: false,
                constrain: true,
                adaptive_mu: false,
            },
            ..quick_cfg()
        };
        let (q, _) = assign_pseudo_labels(&p, 0.5, &cfg).unwrap();
        for i in 0..4 {
            let r = q.row(i);
            assert!(r == [1.0, 0.0] || r == [0.0, 1.0]);
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let out = self_train(&tiny(), &quick_cfg()).unwrap();
        let text = out.record.to_csv_string();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mu_t,loss,pseudo_precision,pseudo_accuracy,instance_auc,bag_auc,converged"
        );
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn ablation_suite_has_four_arms_in_order() {
        let table = run_ablation_suite(&tiny(), &quick_cfg(), None).unwrap();
        let flags: Vec<Ablation> = table.rows.iter().map(|r| r.ablation).collect();
        assert_eq!(flags, Ablation::SUITE.to_vec());
    }
}

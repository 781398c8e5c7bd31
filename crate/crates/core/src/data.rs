//! Bags, datasets, synthetic bag generators and file ingestion.
//!
//! Synthetic data is drawn from Gaussian blobs: negatives around the origin,
//! each positive concept around `separation · e_c` on its own axis. The same
//! bag-assembly code runs over a finite instance pool (e.g. MNIST digits read
//! from IDX files), drawing without replacement until the pool runs dry.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sample_gaussian, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    /// One-hot target with the positive class first.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Positive => [1.0, 0.0],
            Label::Negative => [0.0, 1.0],
        }
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: Label,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instance labels, if every instance carries one.
    pub fn instance_labels(&self) -> Option<Vec<Label>> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// The standard MIL assumption: a bag is positive iff it holds at least
    /// one positive instance. Vacuously true when any instance label is
    /// missing.
    pub fn satisfies_mil_assumption(&self) -> bool {
        match self.instance_labels() {
            Some(labels) => labels.iter().any(|l| l.is_positive()) == self.label.is_positive(),
            None => true,
        }
    }

    pub fn feature_matrix(&self) -> Matrix {
        let dim = self.instances.first().map_or(0, |i| i.features.len());
        let data = self
            .instances
            .iter()
            .flat_map(|i| i.features.iter().copied())
            .collect();
        Matrix::from_vec(self.instances.len(), dim, data).expect("validated bag")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub bags: Vec<Bag>,
}

/// Bag and instance counts, used for generation manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub feature_dim: usize,
    pub bags: usize,
    pub positive_bags: usize,
    pub negative_bags: usize,
    pub instances: usize,
    pub positive_bag_instances: usize,
    pub labeled_positive_instances: usize,
    /// Fraction of positive-bag instances labelled positive (when known).
    pub positive_ratio_in_positive_bags: Option<f64>,
}

impl Dataset {
    /// Validates bag shapes, finiteness and (where labels are complete) the
    /// MIL assumption.
    pub fn new(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self> {
        let name = name.into();
        let feature_dim = bags
            .first()
            .and_then(|b| b.instances.first())
            .map(|i| i.features.len())
            .ok_or_else(|| Error::InvalidDataset(format!("{name}: no bags or empty first bag")))?;
        if feature_dim == 0 {
            return Err(Error::InvalidDataset(format!(
                "{name}: zero-dimensional features"
            )));
        }
        for bag in &bags {
            if bag.instances.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "bag {} is empty",
                    bag.bag_id
                )));
            }
            for (k, inst) in bag.instances.iter().enumerate() {
                if inst.features.len() != feature_dim {
                    return Err(Error::InvalidDataset(format!(
                        "bag {} instance {k}: feature dim {} != {feature_dim}",
                        bag.bag_id,
                        inst.features.len()
                    )));
                }
                if inst.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidDataset(format!(
                        "bag {} instance {k}: non-finite feature",
                        bag.bag_id
                    )));
                }
            }
            if !bag.satisfies_mil_assumption() {
                return Err(Error::InvalidDataset(format!(
                    "bag {} labelled {:?} contradicts its instance labels",
                    bag.bag_id, bag.label
                )));
            }
        }
        Ok(Dataset {
            name,
            feature_dim,
            bags,
        })
    }

    /// Training needs at least one bag of each class.
    pub fn require_both_classes(&self) -> Result<()> {
        let pos = self.positive_bags().count();
        if pos == 0 {
            return Err(Error::InvalidDataset(format!(
                "{}: no positive bags",
                self.name
            )));
        }
        if pos == self.bags.len() {
            return Err(Error::InvalidDataset(format!(
                "{}: no negative bags",
                self.name
            )));
        }
        Ok(())
    }

    pub fn positive_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.label.is_positive())
    }

    pub fn negative_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| !b.label.is_positive())
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.bags.iter().flat_map(|b| b.instances.iter())
    }

    /// True instance labels for every instance in bag order, if complete.
    pub fn instance_labels(&self) -> Option<Vec<Label>> {
        self.instances().map(|i| i.label).collect()
    }

    pub fn has_instance_labels(&self) -> bool {
        self.instances().all(|i| i.label.is_some())
    }

    pub fn summary(&self) -> DatasetSummary {
        let positive_bags = self.positive_bags().count();
        let positive_bag_instances: usize = self.positive_bags().map(Bag::len).sum();
        let labeled_positive_instances = self
            .instances()
            .filter(|i| i.label == Some(Label::Positive))
            .count();
        let ratio = (self.has_instance_labels() && positive_bag_instances > 0)
            .then(|| labeled_positive_instances as f64 / positive_bag_instances as f64);
        DatasetSummary {
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            bags: self.bags.len(),
            positive_bags,
            negative_bags: self.bags.len() - positive_bags,
            instances: self.n_instances(),
            positive_bag_instances,
            labeled_positive_instances,
            positive_ratio_in_positive_bags: ratio,
        }
    }

    fn subset(&self, name: String, indices: &[usize]) -> Dataset {
        Dataset {
            name,
            feature_dim: self.feature_dim,
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One positive concept, fixed positive ratio per positive bag.
    Normal,
    /// Two positive concepts, with single-concept test splits.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scheme: Scheme,
    pub bag_size: usize,
    pub positive_ratio: f64,
    pub n_concepts: usize,
    pub feature_dim: usize,
    /// Distance of the (first) positive concept centre from the negative centre.
    pub cluster_separation: f64,
    /// Distance of the second concept centre; smaller values make that
    /// concept's positives harder to tell from negatives.
    pub second_concept_separation: f64,
    /// Probability that a positive instance in a mixed positive bag comes
    /// from the first concept.
    pub first_concept_prob: f64,
    pub noise_std: f64,
    /// Training bags (half positive, rounded down).
    pub n_bags: usize,
    /// Bags per held-out split.
    pub n_test_bags: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scheme: Scheme::Normal,
            bag_size: 100,
            positive_ratio: 0.10,
            n_concepts: 1,
            feature_dim: 8,
            cluster_separation: 4.0,
            second_concept_separation: 4.0,
            first_concept_prob: 0.5,
            noise_std: 1.0,
            n_bags: 200,
            n_test_bags: 100,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn normal(positive_ratio: f64, n_bags: usize, seed: u64) -> Self {
        GenConfig {
            positive_ratio,
            n_bags,
            seed,
            ..GenConfig::default()
        }
    }

    /// Two concepts: an easy one far from the negatives and a hard one
    /// close to them, with the easy one dominating training bags.
    pub fn hard(n_bags: usize, seed: u64) -> Self {
        GenConfig {
            scheme: Scheme::Hard,
            n_concepts: 2,
            cluster_separation: 6.0,
            second_concept_separation: 3.5,
            first_concept_prob: 0.8,
            n_bags,
            seed,
            ..GenConfig::default()
        }
    }

    /// Positive instances per positive bag: `ratio · bag_size`, rounded half up.
    pub fn positives_per_bag(&self) -> usize {
        (self.positive_ratio * self.bag_size as f64 + 0.5).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "positive_ratio must lie in (0, 1), got {}",
                self.positive_ratio
            )));
        }
        if self.bag_size == 0 {
            return Err(Error::InvalidArgument("bag_size must be at least 1".into()));
        }
        if self.positives_per_bag() < 1 {
            return Err(Error::EmptyPositiveContent {
                ratio: self.positive_ratio,
                bag_size: self.bag_size,
            });
        }
        if self.feature_dim < self.n_concepts.max(1) {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} cannot hold {} orthogonal concepts",
                self.feature_dim, self.n_concepts
            )));
        }
        if !(0.0..=1.0).contains(&self.first_concept_prob) {
            return Err(Error::InvalidArgument(
                "first_concept_prob must lie in [0, 1]".into(),
            ));
        }
        if self.noise_std.is_nan() || self.noise_std <= 0.0 {
            return Err(Error::InvalidArgument("noise_std must be positive".into()));
        }
        Ok(())
    }
}

/// What kind of instance a bag slot needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Negative,
    Concept(usize),
}

/// Supplier of instance features for bag assembly. Returns `None` once a
/// finite pool is exhausted.
pub trait InstanceSource {
    fn draw(&mut self, what: Draw, rng: &mut Rng) -> Option<Vec<f64>>;
    fn feature_dim(&self) -> usize;
}

/// Isotropic Gaussian blobs, one per concept plus one for negatives.
#[derive(Debug, Clone)]
pub struct GaussianBlobs {
    pub negative_center: Vec<f64>,
    pub concept_centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl GaussianBlobs {
    pub fn from_config(cfg: &GenConfig) -> Self {
        let n_concepts = match cfg.scheme {
            Scheme::Normal => 1,
            Scheme::Hard => 2,
        };
        let concept_centers = (0..n_concepts)
            .map(|c| {
                let mut center = vec![0.0; cfg.feature_dim];
                center[c] = if c == 0 {
                    cfg.cluster_separation
                } else {
                    cfg.second_concept_separation
                };
                center
            })
            .collect();
        GaussianBlobs {
            negative_center: vec![0.0; cfg.feature_dim],
            concept_centers,
            std: cfg.noise_std,
        }
    }

    /// Index of the nearest centre: `None` for the negative blob.
    pub fn nearest_concept(&self, x: &[f64]) -> Option<usize> {
        let dist = |c: &[f64]| -> f64 { c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = (dist(&self.negative_center), None);
        for (i, c) in self.concept_centers.iter().enumerate() {
            let d = dist(c);
            if d < best.0 {
                best = (d, Some(i));
            }
        }
        best.1
    }
}

impl InstanceSource for GaussianBlobs {
    fn draw(&mut self, what: Draw, rng: &mut Rng) -> Option<Vec<f64>> {
        let center = match what {
            Draw::Negative => &self.negative_center,
            Draw::Concept(c) => self.concept_centers.get(c)?,
        };
        Some(sample_gaussian(rng, center, self.std).expect("std validated"))
    }

    fn feature_dim(&self) -> usize {
        self.negative_center.len()
    }
}

/// Finite pool drawn without replacement.
#[derive(Debug, Clone)]
pub struct InstancePool {
    dim: usize,
    negatives: Vec<Vec<f64>>,
    concepts: Vec<Vec<Vec<f64>>>,
}

impl InstancePool {
    /// Builds a shuffled pool; `concept_of(i)` maps item `i` to a concept
    /// index or `None` for negatives.
    pub fn new(
        features: &Matrix,
        n_concepts: usize,
        concept_of: impl Fn(usize) -> Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let mut negatives = Vec::new();
        let mut concepts = vec![Vec::new(); n_concepts];
        for (i, row) in features.row_iter().enumerate() {
            match concept_of(i) {
                Some(c) => concepts[c].push(row.to_vec()),
                None => negatives.push(row.to_vec()),
            }
        }
        rng.shuffle(&mut negatives);
        for pool in &mut concepts {
            rng.shuffle(pool);
        }
        InstancePool {
            dim: features.cols(),
            negatives,
            concepts,
        }
    }

    /// MNIST digit pool: digit 9 positive for the normal scheme; digits 0
    /// and 8 (first and second concept) for the hard scheme.
    pub fn mnist(features: &Matrix, digits: &[u8], scheme: Scheme, rng: &mut Rng) -> Self {
        match scheme {
            Scheme::Normal => {
                InstancePool::new(features, 1, |i| (digits[i] == 9).then_some(0), rng)
            }
            Scheme::Hard => InstancePool::new(
                features,
                2,
                |i| match digits[i] {
                    0 => Some(0),
                    8 => Some(1),
                    _ => None,
                },
                rng,
            ),
        }
    }

    pub fn remaining(&self) -> (usize, Vec<usize>) {
        (
            self.negatives.len(),
            self.concepts.iter().map(Vec::len).collect(),
        )
    }
}

impl InstanceSource for InstancePool {
    fn draw(&mut self, what: Draw, _rng: &mut Rng) -> Option<Vec<f64>> {
        match what {
            Draw::Negative => self.negatives.pop(),
            Draw::Concept(c) => self.concepts.get_mut(c)?.pop(),
        }
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }
}

/// Which concepts may fill the positive slots of a positive bag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConceptMix {
    Only(usize),
    /// Each positive independently first concept with this probability,
    /// otherwise second.
    Mixed {
        first_prob: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct BagShape {
    bag_size: usize,
    positives: usize,
}

fn assemble_bag(
    bag_id: String,
    positive: bool,
    shape: BagShape,
    mix: ConceptMix,
    source: &mut dyn InstanceSource,
    rng: &mut Rng,
) -> Option<Bag> {
    let n_pos = if positive { shape.positives } else { 0 };
    let mut instances = Vec::with_capacity(shape.bag_size);
    for _ in 0..n_pos {
        let concept = match mix {
            ConceptMix::Only(c) => c,
            ConceptMix::Mixed { first_prob } => {
                if rng.bernoulli(first_prob) {
                    0
                } else {
                    1
                }
            }
        };
        instances.push(Instance {
            features: source.draw(Draw::Concept(concept), rng)?,
            label: Some(Label::Positive),
        });
    }
    for _ in n_pos..shape.bag_size {
        instances.push(Instance {
            features: source.draw(Draw::Negative, rng)?,
            label: Some(Label::Negative),
        });
    }
    rng.shuffle(&mut instances);
    Some(Bag {
        bag_id,
        label: Label::from(positive),
        instances,
    })
}

/// Assembles up to `n_bags` bags (half positive), alternating classes.
/// With `None`, keeps going until the source runs out; a bag that cannot be
/// completed is discarded.
fn assemble_split(
    name: &str,
    n_bags: Option<usize>,
    shape: BagShape,
    mix: ConceptMix,
    source: &mut dyn InstanceSource,
    rng: &mut Rng,
) -> Result<Dataset> {
    let (mut pos_left, mut neg_left) = match n_bags {
        Some(n) => (n / 2, n - n / 2),
        None => (usize::MAX, usize::MAX),
    };
    let mut bags = Vec::new();
    let mut next_positive = true;
    while pos_left > 0 || neg_left > 0 {
        let positive = if pos_left == 0 {
            false
        } else if neg_left == 0 {
            true
        } else {
            next_positive
        };
        let id = format!("{name}-{:05}", bags.len());
        match assemble_bag(id, positive, shape, mix, source, rng) {
            Some(bag) => bags.push(bag),
            None => break,
        }
        if positive {
            pos_left -= 1;
        } else {
            neg_left -= 1;
        }
        next_positive = !next_positive;
    }
    Dataset::new(name, bags)
}

/// Single-concept dataset: each positive bag holds exactly
/// `positives_per_bag()` positives.
pub fn generate_normal_bags(cfg: &GenConfig, rng: &mut Rng) -> Result<Dataset> {
    let mut blobs = GaussianBlobs::from_config(&GenConfig {
        scheme: Scheme::Normal,
        ..cfg.clone()
    });
    build_normal_bags("train", cfg, Some(cfg.n_bags), &mut blobs, rng)
}

/// Normal-scheme bags over any instance source.
pub fn build_normal_bags(
    name: &str,
    cfg: &GenConfig,
    n_bags: Option<usize>,
    source: &mut dyn InstanceSource,
    rng: &mut Rng,
) -> Result<Dataset> {
    if cfg.scheme != Scheme::Normal {
        return Err(Error::InvalidArgument(
            "normal generator needs scheme = normal".into(),
        ));
    }
    cfg.validate()?;
    let shape = BagShape {
        bag_size: cfg.bag_size,
        positives: cfg.positives_per_bag(),
    };
    assemble_split(name, n_bags, shape, ConceptMix::Only(0), source, rng)
}

/// Training set plus the three held-out splits of the two-concept scheme.
#[derive(Debug, Clone)]
pub struct HardSplits {
    pub train: Dataset,
    pub test_normal: Dataset,
    pub test_pos0: Dataset,
    pub test_pos8: Dataset,
}

impl HardSplits {
    pub fn named(&self) -> [(&'static str, &Dataset); 4] {
        [
            ("train", &self.train),
            ("test_normal", &self.test_normal),
            ("test_pos0", &self.test_pos0),
            ("test_pos8", &self.test_pos8),
        ]
    }
}

pub fn generate_hard_bags(cfg: &GenConfig, rng: &mut Rng) -> Result<HardSplits> {
    check_hard(cfg)?;
    let blobs = GaussianBlobs::from_config(cfg);
    build_hard_bags(cfg, &mut blobs.clone(), &mut blobs.clone(), rng)
}

fn check_hard(cfg: &GenConfig) -> Result<()> {
    if cfg.scheme != Scheme::Hard {
        return Err(Error::InvalidArgument(
            "hard generator needs scheme = hard".into(),
        ));
    }
    if cfg.n_concepts != 2 {
        return Err(Error::InvalidArgument(format!(
            "hard scheme needs exactly 2 concepts, got {}",
            cfg.n_concepts
        )));
    }
    cfg.validate()
}

/// Two-concept splits; training bags come from `train_source`, the three
/// test splits share `test_source`.
pub fn build_hard_bags(
    cfg: &GenConfig,
    train_source: &mut dyn InstanceSource,
    test_source: &mut dyn InstanceSource,
    rng: &mut Rng,
) -> Result<HardSplits> {
    check_hard(cfg)?;
    let shape = BagShape {
        bag_size: cfg.bag_size,
        positives: cfg.positives_per_bag(),
    };
    let mixed = ConceptMix::Mixed {
        first_prob: cfg.first_concept_prob,
    };
    let n_test = Some(cfg.n_test_bags);
    Ok(HardSplits {
        train: assemble_split("train", Some(cfg.n_bags), shape, mixed, train_source, rng)?,
        test_normal: assemble_split("test_normal", n_test, shape, mixed, test_source, rng)?,
        test_pos0: assemble_split(
            "test_pos0",
            n_test,
            shape,
            ConceptMix::Only(0),
            test_source,
            rng,
        )?,
        test_pos8: assemble_split(
            "test_pos8",
            n_test,
            shape,
            ConceptMix::Only(1),
            test_source,
            rng,
        )?,
    })
}

// ---------------------------------------------------------------------------
// NDJSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    features: Vec<f64>,
    #[serde(default)]
    label: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    bag_id: String,
    label: u8,
    instances: Vec<InstanceRecord>,
}

fn parse_label(v: u8, path: &Path, line: usize) -> Result<Label> {
    Label::from_u8(v).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("label must be 0 or 1, got {v}"),
    })
}

pub fn read_ndjson(reader: impl BufRead, name: &str, path: &Path) -> Result<Dataset> {
    let mut bags = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BagRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let instances = record
            .instances
            .into_iter()
            .map(|inst| {
                Ok(Instance {
                    features: inst.features,
                    label: inst
                        .label
                        .map(|l| parse_label(l, path, line_no))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bag = Bag {
            bag_id: record.bag_id,
            label: parse_label(record.label, path, line_no)?,
            instances,
        };
        // Per-line checks so errors carry a line number.
        if let Some(first) = bags.first().and_then(|b: &Bag| b.instances.first()) {
            let dim = first.features.len();
            if let Some(bad) = bag.instances.iter().find(|x| x.features.len() != dim) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("feature dim {} != {dim}", bad.features.len()),
                });
            }
        }
        if !bag.satisfies_mil_assumption() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("bag {} label contradicts its instance labels", bag.bag_id),
            });
        }
        bags.push(bag);
    }
    Dataset::new(name, bags)
}

pub fn load_ndjson(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_ndjson(BufReader::new(file), &name, path)
}

pub fn write_ndjson(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    for bag in &dataset.bags {
        let record = BagRecord {
            bag_id: bag.bag_id.clone(),
            label: bag.label.as_u8(),
            instances: bag
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    features: i.features.clone(),
                    label: i.label.map(Label::as_u8),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<ndjson>", e))?;
    }
    Ok(())
}

pub fn save_ndjson(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_ndjson(dataset, &mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// CSV benchmark format
// ---------------------------------------------------------------------------

/// Reads `bag_id,bag_label,f0,...,f{d-1}`, one instance per row. Bags keep
/// first-appearance order; instance labels are unknown.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name, path)
}

pub fn read_csv(reader: impl Read, name: &str, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    if header.len() < 3 || &header[0] != "bag_id" || &header[1] != "bag_label" {
        return Err(parse_err(
            1,
            "header must start with bag_id,bag_label,f0".into(),
        ));
    }
    for (j, col) in header.iter().skip(2).enumerate() {
        if col != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {col}")));
        }
    }
    let dim = header.len() - 2;
    let mut order: Vec<String> = Vec::new();
    let mut bags: HashMap<String, Bag> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != dim + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, got {}", dim + 2, record.len()),
            ));
        }
        let bag_id = record[0].to_string();
        let label = match &record[1] {
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => {
                return Err(parse_err(
                    line,
                    format!("bag_label must be 0 or 1, got {other}"),
                ))
            }
        };
        let features = record
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(line, format!("bad feature {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bag = bags.entry(bag_id.clone()).or_insert_with(|| {
            order.push(bag_id.clone());
            Bag {
                bag_id: bag_id.clone(),
                label,
                instances: Vec::new(),
            }
        });
        if bag.label != label {
            return Err(parse_err(
                line,
                format!("bag {bag_id} has inconsistent bag_label"),
            ));
        }
        bag.instances.push(Instance {
            features,
            label: None,
        });
    }
    let bags = order
        .into_iter()
        .map(|id| bags.remove(&id).expect("recorded"))
        .collect();
    Dataset::new(name, bags)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["bag_id".to_string(), "bag_label".to_string()];
    header.extend((0..dataset.feature_dim).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for bag in &dataset.bags {
        for inst in &bag.instances {
            let mut row = vec![bag.bag_id.clone(), bag.label.as_u8().to_string()];
            row.extend(inst.features.iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// IDX (MNIST)
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into a row-per-image matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::NotIdx("file shorter than header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::NotIdx(format!("image magic {magic:#010x}")));
    }
    let dims: Vec<usize> = (0..3)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::NotIdx("truncated image header".into()))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = &bytes[16..];
    let expected = n * rows * cols;
    if pixels.len() != expected {
        return Err(Error::NotIdx(format!(
            "image payload has {} bytes, header implies {expected}",
            pixels.len()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::from_vec(n, rows * cols, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::NotIdx("file shorter than header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::NotIdx(format!("label magic {magic:#010x}")));
    }
    let n =
        be_u32(bytes, 4).ok_or_else(|| Error::NotIdx("truncated label header".into()))? as usize;
    let labels = &bytes[8..];
    if labels.len() != n {
        return Err(Error::NotIdx(format!(
            "label payload has {} bytes, header implies {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&d| d > 9) {
        return Err(Error::NotIdx(format!("digit label {bad} out of range")));
    }
    Ok(labels.to_vec())
}

/// Loads an IDX image/label pair. Fails without partial output on a bad
/// magic, a truncated payload or mismatched counts.
pub fn load_idx_mnist(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(Matrix, Vec<u8>)> {
    let images = parse_idx_images(&read_all(images_path.as_ref())?)?;
    let digits = parse_idx_labels(&read_all(labels_path.as_ref())?)?;
    if images.rows() != digits.len() {
        return Err(Error::InvalidDataset(format!(
            "{} images but {} labels",
            images.rows(),
            digits.len()
        )));
    }
    Ok((images, digits))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Stratified k-fold split over bags. Positive and negative bags are
/// shuffled separately and dealt round-robin, negatives continuing where
/// positives stopped so fold sizes differ by at most one.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k-fold needs k >= 2, got {k}"
        )));
    }
    if k > dataset.bags.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds bag count {}",
            dataset.bags.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut pos: Vec<usize> = (0..dataset.bags.len())
        .filter(|&i| dataset.bags[i].label.is_positive())
        .collect();
    let mut neg: Vec<usize> = (0..dataset.bags.len())
        .filter(|&i| !dataset.bags[i].label.is_positive())
        .collect();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut fold_of = vec![0usize; dataset.bags.len()];
    for (slot, &bag) in pos.iter().chain(&neg).enumerate() {
        fold_of[bag] = slot % k;
    }
    Ok((0..k)
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.bags.len()).partition(|&i| fold_of[i] == fold);
            (
                dataset.subset(format!("{}-fold{fold}-train", dataset.name), &train),
                dataset.subset(format!("{}-fold{fold}-test", dataset.name), &test),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> GenConfig {
        GenConfig {
            bag_size: 20,
            n_bags: 10,
            n_test_bags: 6,
            ..GenConfig::default()
        }
    }

    fn count_pos(bag: &Bag) -> usize {
        bag.instances
            .iter()
            .filter(|i| i.label == Some(Label::Positive))
            .count()
    }

    #[test]
    fn normal_bags_have_exact_positive_count() {
        let cfg = GenConfig::normal(0.10, 20, 1);
        let ds = generate_normal_bags(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.bags.len(), 20);
        for bag in &ds.bags {
            assert_eq!(bag.len(), 100);
            let expected = if bag.label.is_positive() { 10 } else { 0 };
            assert_eq!(count_pos(bag), expected);
            assert!(bag.satisfies_mil_assumption());
        }
    }

    #[test]
    fn one_percent_ratio_gives_single_positive() {
        let cfg = GenConfig::normal(0.01, 6, 2);
        let ds = generate_normal_bags(&cfg, &mut Rng::new(2)).unwrap();
        for bag in ds.positive_bags() {
            assert_eq!(count_pos(bag), 1);
        }
    }

    #[test]
    fn ratio_rounding_is_half_up() {
        let cfg = GenConfig {
            bag_size: 10,
            positive_ratio: 0.25,
            ..GenConfig::default()
        };
        assert_eq!(cfg.positives_per_bag(), 3);
        let cfg = GenConfig {
            positive_ratio: 0.004,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_normal_bags(&cfg, &mut Rng::new(0)),
            Err(Error::EmptyPositiveContent { .. })
        ));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let cfg = small_cfg();
        let a = generate_normal_bags(&cfg, &mut Rng::new(9)).unwrap();
        let b = generate_normal_bags(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_normal_bags(&cfg, &mut Rng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hard_splits_respect_concepts() {
        let cfg = GenConfig {
            scheme: Scheme::Hard,
            n_concepts: 2,
            cluster_separation: 12.0,
            second_concept_separation: 12.0,
            ..small_cfg()
        };
        let splits = generate_hard_bags(&cfg, &mut Rng::new(5)).unwrap();
        let blobs = GaussianBlobs::from_config(&cfg);
        let concepts = |ds: &Dataset| -> HashSet<usize> {
            ds.positive_bags()
                .flat_map(|b| b.instances.iter())
                .filter(|i| i.label == Some(Label::Positive))
                .map(|i| blobs.nearest_concept(&i.features).unwrap())
                .collect()
        };
        assert_eq!(concepts(&splits.test_pos0), HashSet::from([0]));
        assert_eq!(concepts(&splits.test_pos8), HashSet::from([1]));
        assert_eq!(concepts(&splits.train), HashSet::from([0, 1]));
        for (_, ds) in splits.named() {
            for bag in &ds.bags {
                assert!(bag.satisfies_mil_assumption());
                if bag.label.is_positive() {
                    assert!(count_pos(bag) >= 1);
                }
            }
        }
    }

    #[test]
    fn hard_scheme_needs_two_concepts() {
        let cfg = GenConfig {
            scheme: Scheme::Hard,
            n_concepts: 3,
            ..small_cfg()
        };
        assert!(generate_hard_bags(&cfg, &mut Rng::new(0)).is_err());
        let cfg = GenConfig {
            scheme: Scheme::Normal,
            ..small_cfg()
        };
        assert!(generate_hard_bags(&cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pool_exhaustion_discards_incomplete_bag() {
        // 25 negatives, 3 positives, bag size 10 with 1 positive.
        let rows: Vec<Vec<f64>> = (0..28).map(|i| vec![i as f64]).collect();
        let features = Matrix::from_rows(&rows).unwrap();
        let mut rng = Rng::new(0);
        let mut pool = InstancePool::new(&features, 1, |i| (i >= 25).then_some(0), &mut rng);
        let cfg = GenConfig {
            bag_size: 10,
            positive_ratio: 0.1,
            feature_dim: 1,
            ..GenConfig::default()
        };
        let ds = build_normal_bags("pool", &cfg, None, &mut pool, &mut rng).unwrap();
        // pos (9 neg), neg (10), pos (9 neg) = 28 negatives needed; third bag fails.
        assert_eq!(ds.bags.len(), 2);
        let seen: HashSet<u64> = ds.instances().map(|i| i.features[0] as u64).collect();
        assert_eq!(seen.len(), 20, "no instance drawn twice");
    }

    #[test]
    fn dataset_rejects_contradicting_labels() {
        let bag = Bag {
            bag_id: "b".into(),
            label: Label::Negative,
            instances: vec![Instance {
                features: vec![0.0],
                label: Some(Label::Positive),
            }],
        };
        assert!(Dataset::new("x", vec![bag]).is_err());
    }

    #[test]
    fn ndjson_parses_minimal_line() {
        let text = r#"{"bag_id": "a", "label": 1, "instances": [{"features": [1, 2, 3], "label": null}, {"features": [4.5, 5, 6]}]}"#;
        let ds = read_ndjson(text.as_bytes(), "t", Path::new("t.ndjson")).unwrap();
        assert_eq!(ds.bags.len(), 1);
        assert_eq!(ds.bags[0].instances.len(), 2);
        assert_eq!(ds.feature_dim, 3);
        assert_eq!(ds.bags[0].label, Label::Positive);
    }

    #[test]
    fn ndjson_errors_carry_line_numbers() {
        let text =
            "{\"bag_id\": \"a\", \"label\": 0, \"instances\": [{\"features\": [1.0]}]}\n{oops\n";
        match read_ndjson(text.as_bytes(), "t", Path::new("t.ndjson")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "{\"bag_id\": \"a\", \"label\": 0, \"instances\": [{\"features\": [1.0]}]}\n\
                    {\"bag_id\": \"b\", \"label\": 0, \"instances\": [{\"features\": [1.0, 2.0]}]}\n";
        match read_ndjson(text.as_bytes(), "t", Path::new("t.ndjson")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("dim"));
            }
            other => panic!("expected dim error, got {other:?}"),
        }
        let text = r#"{"bag_id": "n", "label": 0, "instances": [{"features": [1.0], "label": 1}]}"#;
        assert!(matches!(
            read_ndjson(text.as_bytes(), "t", Path::new("t.ndjson")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_groups_rows_into_bags() {
        let text = "bag_id,bag_label,f0,f1\nb1,1,0.5,1\nb2,0,1,2\nb1,1,3,4\n";
        let ds = read_csv(text.as_bytes(), "c", Path::new("c.csv")).unwrap();
        assert_eq!(ds.bags.len(), 2);
        assert_eq!(ds.bags[0].bag_id, "b1");
        assert_eq!(ds.bags[0].instances.len(), 2);
        assert_eq!(ds.bags[0].instances[1].features, vec![3.0, 4.0]);
        let bad = "bag_id,bag_label,f0\nb1,1,0.5\nb1,0,1\n";
        assert!(read_csv(bad.as_bytes(), "c", Path::new("c.csv")).is_err());
        let bad_header = "id,label,f0\nb1,1,0.5\n";
        assert!(read_csv(bad_header.as_bytes(), "c", Path::new("c.csv")).is_err());
    }

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, 28, 28] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(pixels);
        bytes
    }

    #[test]
    fn idx_images_scale_and_validate() {
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255;
        pixels[784 + 5] = 51;
        let m = parse_idx_images(&idx_images(2, &pixels)).unwrap();
        assert_eq!(m.shape(), (2, 784));
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 5), 0.2);
        assert!(parse_idx_images(&idx_images(2, &pixels[..1000])).is_err());
        let mut wrong = idx_images(2, &pixels);
        wrong[3] = 0x01;
        assert!(matches!(parse_idx_images(&wrong), Err(Error::NotIdx(_))));
    }

    #[test]
    fn idx_labels_validate() {
        let mut bytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 9, 8]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 9, 8]);
        assert!(parse_idx_labels(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[10] = 12;
        assert!(parse_idx_labels(&bad).is_err());
    }

    #[test]
    fn mnist_pool_maps_digits_to_concepts() {
        let features = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let digits = [9, 0, 8, 3];
        let mut rng = Rng::new(0);
        let normal = InstancePool::mnist(&features, &digits, Scheme::Normal, &mut rng);
        assert_eq!(normal.remaining(), (3, vec![1]));
        let hard = InstancePool::mnist(&features, &digits, Scheme::Hard, &mut rng);
        assert_eq!(hard.remaining(), (2, vec![1, 1]));
    }

    #[test]
    fn kfold_partitions_and_stratifies() {
        let cfg = GenConfig {
            bag_size: 5,
            n_bags: 100,
            positive_ratio: 0.2,
            ..GenConfig::default()
        };
        let ds = generate_normal_bags(&cfg, &mut Rng::new(3)).unwrap();
        let folds = kfold_split(&ds, 10, 11).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = HashSet::new();
        for (train, test) in &folds {
            assert_eq!(test.positive_bags().count(), 5);
            assert_eq!(train.bags.len() + test.bags.len(), 100);
            for bag in &test.bags {
                assert!(seen.insert(bag.bag_id.clone()), "bag in two test folds");
            }
        }
        assert_eq!(seen.len(), 100);
        assert_eq!(
            kfold_split(&ds, 10, 11).unwrap()[3].1,
            folds[3].1,
            "deterministic per seed"
        );
    }

    #[test]
    fn kfold_edge_cases() {
        let cfg = GenConfig {
            bag_size: 3,
            n_bags: 10,
            positive_ratio: 0.34,
            ..GenConfig::default()
        };
        let ds = generate_normal_bags(&cfg, &mut Rng::new(3)).unwrap();
        for (_, test) in kfold_split(&ds, 10, 0).unwrap() {
            assert_eq!(test.bags.len(), 1);
        }
        assert!(kfold_split(&ds, 11, 0).is_err());
        assert!(kfold_split(&ds, 1, 0).is_err());
    }
}

//! Pseudo-label assignment for positive-bag instances.
//!
//! Matrices here are `N × 2`: one row per instance drawn from a positive
//! bag, column 0 the positive class and column 1 the negative class.
//! [`sinkhorn_assign`] solves
//!
//! ```text
//! min_{Q ∈ U(r, c)}  <Q, -log P> + (1/λ) KL(Q ‖ r cᵀ)
//! r = [μN, (1-μ)N] (class column sums),  c = 1 (instance row sums)
//! ```
//!
//! whose solution is `Q = diag(β) · P^λ · diag(α)`. The scaling vectors are
//! found by alternating column/row normalisation, carried out on their
//! logarithms so that `P^λ` never underflows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{log_sum_exp, Matrix};

pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

fn check_bag_index(rows: usize, bag_of_row: &[usize], n_bags: usize) -> Result<()> {
    if bag_of_row.len() != rows {
        return Err(Error::Shape(format!(
            "{} bag indices for {rows} rows",
            bag_of_row.len()
        )));
    }
    if let Some(&b) = bag_of_row.iter().find(|&&b| b >= n_bags) {
        return Err(Error::InvalidArgument(format!(
            "bag index {b} >= bag count {n_bags}"
        )));
    }
    Ok(())
}

/// Classifier probabilities over every positive-bag instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    probs: Matrix,
    bag_of_row: Vec<usize>,
    n_bags: usize,
}

impl PredictionMatrix {
    pub fn new(probs: Matrix, bag_of_row: Vec<usize>, n_bags: usize) -> Result<Self> {
        if probs.cols() != 2 {
            return Err(Error::Shape(format!(
                "prediction matrix needs 2 columns, got {}",
                probs.cols()
            )));
        }
        check_bag_index(probs.rows(), &bag_of_row, n_bags)?;
        for (i, row) in probs.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (row[0] + row[1] - 1.0).abs() > 1e-9
            {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {i} = {row:?} is not a probability pair"
                )));
            }
        }
        Ok(PredictionMatrix {
            probs,
            bag_of_row,
            n_bags,
        })
    }

    /// From positive-class probabilities only; the negative column is `1 - p`.
    pub fn from_positive(positive: &[f64], bag_of_row: Vec<usize>, n_bags: usize) -> Result<Self> {
        let data = positive.iter().flat_map(|&p| [p, 1.0 - p]).collect();
        PredictionMatrix::new(
            Matrix::from_vec(positive.len(), 2, data)?,
            bag_of_row,
            n_bags,
        )
    }

    /// All rows in one bag.
    pub fn single_bag(positive: &[f64]) -> Result<Self> {
        PredictionMatrix::from_positive(positive, vec![0; positive.len()], 1)
    }

    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn positive(&self, row: usize) -> f64 {
        self.probs.get(row, POSITIVE)
    }

    pub fn bag_of_row(&self) -> &[usize] {
        &self.bag_of_row
    }

    pub fn n_bags(&self) -> usize {
        self.n_bags
    }

    /// Applies the same row permutation to probabilities and bag indices:
    /// row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let data = perm
            .iter()
            .flat_map(|&i| self.probs.row(i).to_vec())
            .collect();
        PredictionMatrix {
            probs: Matrix::from_vec(perm.len(), 2, data).expect("same shape"),
            bag_of_row: perm.iter().map(|&i| self.bag_of_row[i]).collect(),
            n_bags: self.n_bags,
        }
    }
}

/// Soft pseudo labels for the rows of a [`PredictionMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix {
    q: Matrix,
    bag_of_row: Vec<usize>,
    n_bags: usize,
}

impl PseudoLabelMatrix {
    pub fn new(q: Matrix, bag_of_row: Vec<usize>, n_bags: usize) -> Result<Self> {
        if q.cols() != 2 {
            return Err(Error::Shape(format!(
                "pseudo-label matrix needs 2 columns, got {}",
                q.cols()
            )));
        }
        check_bag_index(q.rows(), &bag_of_row, n_bags)?;
        if q.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pseudo labels must lie in [0, 1]".into(),
            ));
        }
        Ok(PseudoLabelMatrix {
            q,
            bag_of_row,
            n_bags,
        })
    }

    pub fn from_positive(positive: &[f64], bag_of_row: Vec<usize>, n_bags: usize) -> Result<Self> {
        let data = positive.iter().flat_map(|&p| [p, 1.0 - p]).collect();
        PseudoLabelMatrix::new(
            Matrix::from_vec(positive.len(), 2, data)?,
            bag_of_row,
            n_bags,
        )
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    pub fn row(&self, i: usize) -> [f64; 2] {
        [self.q.get(i, POSITIVE), self.q.get(i, NEGATIVE)]
    }

    pub fn positive(&self, i: usize) -> f64 {
        self.q.get(i, POSITIVE)
    }

    pub fn bag_of_row(&self) -> &[usize] {
        &self.bag_of_row
    }

    pub fn n_bags(&self) -> usize {
        self.n_bags
    }

    /// Total positive-column mass.
    pub fn positive_mass(&self) -> f64 {
        (0..self.n()).map(|i| self.positive(i)).sum()
    }

    /// Row-argmax class per row; a tie goes to the positive column.
    pub fn hard_labels(&self) -> Vec<bool> {
        (0..self.n())
            .map(|i| self.q.get(i, POSITIVE) >= self.q.get(i, NEGATIVE))
            .collect()
    }

    /// Fraction of rows whose argmax is positive.
    pub fn positive_fraction(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.hard_labels().iter().filter(|&&p| p).count() as f64 / self.n() as f64
    }

    /// One-hot rows from the row argmax.
    pub fn binarize(&self) -> PseudoLabelMatrix {
        let pos: Vec<f64> = self
            .hard_labels()
            .iter()
            .map(|&p| if p { 1.0 } else { 0.0 })
            .collect();
        PseudoLabelMatrix::from_positive(&pos, self.bag_of_row.clone(), self.n_bags)
            .expect("valid one-hot")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Inverse entropic weight; larger is closer to the unregularised LP.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the column violation per instance and the row violation
    /// both fall below this.
    pub marginal_tol: f64,
    /// `P` is clamped to `[prob_floor, 1 - prob_floor]` before taking logs.
    pub prob_floor: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            lambda: 5.0,
            max_iters: 1000,
            marginal_tol: 1e-6,
            prob_floor: 1e-8,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.marginal_tol.is_nan() || self.marginal_tol <= 0.0 {
            return Err(Error::InvalidArgument(
                "marginal_tol must be positive".into(),
            ));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1e-3) {
            return Err(Error::InvalidArgument(format!(
                "prob_floor must lie in (0, 1e-3), got {}",
                self.prob_floor
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics of one Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornReport {
    pub converged: bool,
    pub iterations: usize,
    /// `max_y |colsum_y - r_y| / N` of the returned matrix.
    pub column_violation: f64,
    /// `max_i |rowsum_i - 1|` of the returned matrix.
    pub row_violation: f64,
    /// Dual potential after every iteration, in objective units (divided by
    /// λ). Non-increasing; empty unless tracing was requested.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub q: PseudoLabelMatrix,
    pub report: SinkhornReport,
}

/// Target class column sums `[μN, (1-μ)N]`.
pub fn class_marginals(mu: f64, n: usize) -> [f64; 2] {
    [mu * n as f64, (1.0 - mu) * n as f64]
}

pub fn sinkhorn_assign(p: &PredictionMatrix, mu: f64, cfg: &SinkhornConfig) -> Result<Assignment> {
    solve(p, mu, cfg, false)
}

/// As [`sinkhorn_assign`], also recording the per-iteration objective trace.
pub fn sinkhorn_assign_traced(
    p: &PredictionMatrix,
    mu: f64,
    cfg: &SinkhornConfig,
) -> Result<Assignment> {
    solve(p, mu, cfg, true)
}

fn log_kernel(p: &PredictionMatrix, cfg: &SinkhornConfig) -> Vec<[f64; 2]> {
    let (lo, hi) = (cfg.prob_floor, 1.0 - cfg.prob_floor);
    p.probs
        .row_iter()
        .map(|r| {
            [
                cfg.lambda * r[0].clamp(lo, hi).ln(),
                cfg.lambda * r[1].clamp(lo, hi).ln(),
            ]
        })
        .collect()
}

struct Violations {
    column: f64,
    row: f64,
}

fn violations(log_k: &[[f64; 2]], f: &[f64], g: &[f64; 2], target: &[f64; 2]) -> Violations {
    let n = log_k.len() as f64;
    let mut col = [0.0; 2];
    let mut row = 0.0f64;
    for (k, &fi) in log_k.iter().zip(f) {
        let a = (fi + k[0] + g[0]).exp();
        let b = (fi + k[1] + g[1]).exp();
        col[0] += a;
        col[1] += b;
        row = row.max((a + b - 1.0).abs());
    }
    Violations {
        column: (col[0] - target[0]).abs().max((col[1] - target[1]).abs()) / n,
        row,
    }
}

fn solve(p: &PredictionMatrix, mu: f64, cfg: &SinkhornConfig, trace: bool) -> Result<Assignment> {
    cfg.validate()?;
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mu must lie in (0, 1), got {mu}"
        )));
    }
    let n = p.n();
    if mu * (n as f64) < 1.0 {
        return Err(Error::MarginalBelowOne { mu, n });
    }
    let log_k = log_kernel(p, cfg);
    let target = class_marginals(mu, n);
    let log_r = [target[0].ln(), target[1].ln()];

    // f: log row scalings (one per instance), g: log column scalings.
    let mut f = vec![0.0; n];
    let mut g = [0.0; 2];
    let mut best = (f64::INFINITY, f.clone(), g);
    let mut objective_trace = Vec::new();
    let mut last_potential = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut scratch = vec![0.0; n];

    for it in 1..=cfg.max_iters {
        iterations = it;
        for (y, gy) in g.iter_mut().enumerate() {
            for ((s, k), fi) in scratch.iter_mut().zip(&log_k).zip(&f) {
                *s = k[y] + fi;
            }
            *gy = log_r[y] - log_sum_exp(&scratch)?;
        }
        for (fi, k) in f.iter_mut().zip(&log_k) {
            *fi = -log_sum_exp(&[k[0] + g[0], k[1] + g[1]])?;
        }

        let v = violations(&log_k, &f, &g, &target);
        if trace || cfg!(debug_assertions) {
            let potential = dual_potential(&log_k, &f, &g, &target) / cfg.lambda;
            debug_assert!(
                potential <= last_potential + 1e-9 * last_potential.abs().max(1.0),
                "Sinkhorn potential increased: {last_potential} -> {potential}"
            );
            last_potential = potential;
            if trace {
                objective_trace.push(potential);
            }
        }
        let score = v.column.max(v.row);
        if score < best.0 {
            best = (score, f.clone(), g);
        }
        if v.column < cfg.marginal_tol && v.row < cfg.marginal_tol {
            converged = true;
            break;
        }
    }

    let (_, f, g) = best;
    let v = violations(&log_k, &f, &g, &target);
    let data = log_k
        .iter()
        .zip(&f)
        .flat_map(|(k, fi)| [(fi + k[0] + g[0]).exp(), (fi + k[1] + g[1]).exp()])
        .map(|x| x.min(1.0))
        .collect();
    let q = PseudoLabelMatrix::new(
        Matrix::from_vec(n, 2, data)?,
        p.bag_of_row.clone(),
        p.n_bags,
    )?;
    Ok(Assignment {
        q,
        report: SinkhornReport {
            converged,
            iterations,
            column_violation: v.column,
            row_violation: v.row,
            objective_trace,
        },
    })
}

/// `Σ_iy exp(f_i + log K_iy + g_y) - Σ_i f_i - Σ_y r_y g_y`, the convex
/// function that each half-step of the scaling iteration minimises exactly
/// over one block of variables. Its minimum equals, up to sign, λ times the
/// optimal regularised objective.
fn dual_potential(log_k: &[[f64; 2]], f: &[f64], g: &[f64; 2], r: &[f64; 2]) -> f64 {
    let mass: f64 = log_k
        .iter()
        .zip(f)
        .map(|(k, fi)| (fi + k[0] + g[0]).exp() + (fi + k[1] + g[1]).exp())
        .sum();
    mass - f.iter().sum::<f64>() - r[0] * g[0] - r[1] * g[1]
}

/// `<Q, -log P>` with `P` clamped as in the solver.
pub fn transport_cost(q: &PseudoLabelMatrix, p: &PredictionMatrix, prob_floor: f64) -> f64 {
    let (lo, hi) = (prob_floor, 1.0 - prob_floor);
    q.q.as_slice()
        .iter()
        .zip(p.probs.as_slice())
        .map(|(qv, pv)| -qv * pv.clamp(lo, hi).ln())
        .sum()
}

/// `<Q, -log P> + (1/λ) KL(Q ‖ r cᵀ)` with `0 log 0 = 0`.
pub fn regularized_objective(
    q: &PseudoLabelMatrix,
    p: &PredictionMatrix,
    mu: f64,
    cfg: &SinkhornConfig,
) -> f64 {
    let r = class_marginals(mu, q.n());
    let kl: f64 =
        q.q.row_iter()
            .flat_map(|row| [(row[0], r[0]), (row[1], r[1])])
            .filter(|(qv, _)| *qv > 0.0)
            .map(|(qv, m)| qv * (qv / m).ln())
            .sum();
    transport_cost(q, p, cfg.prob_floor) + kl / cfg.lambda
}

/// Which matrix ranks instances inside a bag for the local constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalConstraintSource {
    /// The assignment `Q` being finalised.
    #[default]
    Assignment,
    /// The raw predictions `P`.
    Prediction,
}

/// Sets, in every bag, the row with the largest positive entry of `Q` to
/// exactly `[1, 0]`. Ties go to the lowest row index.
pub fn apply_local_constraint(q: &PseudoLabelMatrix) -> Result<PseudoLabelMatrix> {
    constrain_by(q, |i| q.positive(i))
}

/// Local constraint ranking rows by `P` instead of `Q`.
pub fn apply_local_constraint_by_prediction(
    q: &PseudoLabelMatrix,
    p: &PredictionMatrix,
) -> Result<PseudoLabelMatrix> {
    if p.n() != q.n() || p.bag_of_row != q.bag_of_row {
        return Err(Error::Shape(
            "prediction and assignment rows disagree".into(),
        ));
    }
    constrain_by(q, |i| p.positive(i))
}

fn constrain_by(q: &PseudoLabelMatrix, score: impl Fn(usize) -> f64) -> Result<PseudoLabelMatrix> {
    let mut winner: Vec<Option<(usize, f64)>> = vec![None; q.n_bags];
    for (i, &b) in q.bag_of_row.iter().enumerate() {
        let s = score(i);
        match winner[b] {
            Some((_, best)) if best >= s => {}
            _ => winner[b] = Some((i, s)),
        }
    }
    let mut out = q.clone();
    for (b, w) in winner.iter().enumerate() {
        let (row, _) = w.ok_or(Error::EmptyBagInAssignment(b))?;
        out.q.set(row, POSITIVE, 1.0);
        out.q.set(row, NEGATIVE, 0.0);
    }
    Ok(out)
}

/// Linear decay of the target positive fraction from 0.5 to `mu_final`
/// over `warmup` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSchedule {
    pub mu_final: f64,
    pub warmup: usize,
}

impl MuSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_final > 0.0 && self.mu_final <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "mu must lie in (0, 0.5], got {}",
                self.mu_final
            )));
        }
        Ok(())
    }
}

pub fn adaptive_mu(t: usize, schedule: &MuSchedule) -> f64 {
    if t >= schedule.warmup {
        schedule.mu_final
    } else {
        0.5 + (schedule.mu_final - 0.5) / schedule.warmup as f64 * t as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Soft,
    Hard,
}

/// Pseudo labels taken straight from the predictions, unconstrained. This
/// is the self-training arm that collapses to all-negative labels.
pub fn naive_assign(p: &PredictionMatrix, mode: LabelMode) -> PseudoLabelMatrix {
    let q = PseudoLabelMatrix {
        q: p.probs.clone(),
        bag_of_row: p.bag_of_row.clone(),
        n_bags: p.n_bags,
    };
    match mode {
        LabelMode::Soft => q,
        LabelMode::Hard => q.binarize(),
    }
}

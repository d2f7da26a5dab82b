//! Ranking losses over descriptor tuples.
//!
//! A training tuple holds one query descriptor, m positives and n negatives,
//! all unit norm. The triplet loss compares every negative against the worst
//! positive only; the all-pair loss penalizes every (positive, negative)
//! combination, which keeps gradients alive on tuples the triplet loss has
//! already given up on. Both share the hinge `max(0, n - p + margin)` in dot
//! product space; for unit vectors ranking by dot product descending equals
//! ranking by Euclidean distance ascending.

use crate::netvlad::ImageDescriptor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("tuple has no positive samples")]
    EmptyPositives,
    #[error("tuple has no negative samples")]
    EmptyNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Allpair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.3 }
    }
}

/// Query descriptor with its positive and negative samples.
#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub query: ImageDescriptor,
    pub positives: Vec<ImageDescriptor>,
    pub negatives: Vec<ImageDescriptor>,
}

impl TrainingTuple {
    pub fn positive_dots(&self) -> Vec<f64> {
        self.positives.iter().map(|p| self.query.dot(p)).collect()
    }

    pub fn negative_dots(&self) -> Vec<f64> {
        self.negatives.iter().map(|n| self.query.dot(n)).collect()
    }

    fn check(&self) -> Result<(), LossError> {
        if self.positives.is_empty() {
            return Err(LossError::EmptyPositives);
        }
        if self.negatives.is_empty() {
            return Err(LossError::EmptyNegatives);
        }
        Ok(())
    }

    /// Fraction of ordered (positive, negative) pairs ranked correctly,
    /// i.e. with the positive dot strictly above the negative dot.
    pub fn correct_pair_fraction(&self) -> f64 {
        let pos = self.positive_dots();
        let neg = self.negative_dots();
        let mut correct = 0usize;
        for p in &pos {
            for n in &neg {
                if p > n {
                    correct += 1;
                }
            }
        }
        correct as f64 / (pos.len() * neg.len()) as f64
    }
}

/// Hinge on the worst positive: `sum_j max(0, <q,N_j> - min_i <q,P_i> + m)`.
pub fn triplet_loss(t: &TrainingTuple, cfg: &LossConfig) -> Result<f64, LossError> {
    t.check()?;
    let worst_positive = t
        .positive_dots()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(t.negative_dots()
        .into_iter()
        .map(|n| (n - worst_positive + cfg.margin).max(0.0))
        .sum())
}

/// Hinge over every pair: `sum_i sum_j max(0, <q,N_j> - <q,P_i> + m)`.
pub fn allpair_loss(t: &TrainingTuple, cfg: &LossConfig) -> Result<f64, LossError> {
    t.check()?;
    let pos = t.positive_dots();
    let neg = t.negative_dots();
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += (n - p + cfg.margin).max(0.0);
        }
    }
    Ok(total)
}

/// The m x n hinge matrix `max(0, 1_m dN^T - dP 1_n^T + margin 1 1^T)`.
pub fn allpair_hinge_matrix(
    t: &TrainingTuple,
    cfg: &LossConfig,
) -> Result<DMatrix<f64>, LossError> {
    t.check()?;
    let dp = DMatrix::from_vec(t.positives.len(), 1, t.positive_dots());
    let dn = DMatrix::from_vec(t.negatives.len(), 1, t.negative_dots());
    let ones_m = DMatrix::from_element(t.positives.len(), 1, 1.0);
    let ones_n = DMatrix::from_element(t.negatives.len(), 1, 1.0);
    let raw = &ones_m * dn.transpose() - &dp * ones_n.transpose()
        + cfg.margin * &ones_m * ones_n.transpose();
    Ok(raw.map(|x| x.max(0.0)))
}

/// Matrix-form evaluation of the all-pair loss; equals the scalar loop
/// exactly up to summation order.
pub fn allpair_loss_matrix(t: &TrainingTuple, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(allpair_hinge_matrix(t, cfg)?.sum())
}

pub fn loss(t: &TrainingTuple, kind: LossKind, cfg: &LossConfig) -> Result<f64, LossError> {
    match kind {
        LossKind::Triplet => triplet_loss(t, cfg),
        LossKind::Allpair => allpair_loss(t, cfg),
    }
}

/// Gradients of a tuple loss with respect to every descriptor in the tuple.
#[derive(Debug, Clone)]
pub struct TupleGradient {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl TupleGradient {
    fn zeros(t: &TrainingTuple) -> Self {
        TupleGradient {
            query: vec![0.0; t.query.len()],
            positives: t.positives.iter().map(|p| vec![0.0; p.len()]).collect(),
            negatives: t.negatives.iter().map(|n| vec![0.0; n.len()]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.query
            .iter()
            .chain(self.positives.iter().flatten())
            .chain(self.negatives.iter().flatten())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn axpy(acc: &mut [f64], scale: f64, v: &ImageDescriptor) {
    for (a, b) in acc.iter_mut().zip(v.values.iter()) {
        *a += scale * b;
    }
}

/// Subgradient of the chosen loss. The zero branch is taken at hinge kinks,
/// so a fully separated tuple yields all-zero gradients.
pub fn loss_gradient(
    t: &TrainingTuple,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<(f64, TupleGradient), LossError> {
    t.check()?;
    let pos = t.positive_dots();
    let neg = t.negative_dots();
    let mut grad = TupleGradient::zeros(t);
    let mut total = 0.0;
    match kind {
        LossKind::Triplet => {
            let worst = pos
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let worst_dot = pos[worst];
            for (j, n) in neg.iter().enumerate() {
                let slack = n - worst_dot + cfg.margin;
                if slack > 0.0 {
                    total += slack;
                    // d/dq = N_j - P_worst ; d/dN_j = q ; d/dP_worst = -q
                    axpy(&mut grad.query, 1.0, &t.negatives[j]);
                    axpy(&mut grad.query, -1.0, &t.positives[worst]);
                    axpy(&mut grad.negatives[j], 1.0, &t.query);
                    axpy(&mut grad.positives[worst], -1.0, &t.query);
                }
            }
        }
        LossKind::Allpair => {
            for (i, p) in pos.iter().enumerate() {
                for (j, n) in neg.iter().enumerate() {
                    let slack = n - p + cfg.margin;
                    if slack > 0.0 {
                        total += slack;
                        axpy(&mut grad.query, 1.0, &t.negatives[j]);
                        axpy(&mut grad.query, -1.0, &t.positives[i]);
                        axpy(&mut grad.negatives[j], 1.0, &t.query);
                        axpy(&mut grad.positives[i], -1.0, &t.query);
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Number of tuples in the batch with loss exactly zero.
pub fn zero_loss_count(
    batch: &[TrainingTuple],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<usize, LossError> {
    let mut count = 0;
    for t in batch {
        if loss(t, kind, cfg)? == 0.0 {
            count += 1;
        }
    }
    Ok(count)
}

/// Mean and population standard deviation of the query-positive and
/// query-negative dot products pooled over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub pos_mean: f64,
    pub pos_sigma: f64,
    pub neg_mean: f64,
    pub neg_sigma: f64,
}

pub fn spread_stats(batch: &[TrainingTuple]) -> SpreadStats {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in batch {
        pos.extend(t.positive_dots());
        neg.extend(t.negative_dots());
    }
    let stats = |v: &[f64]| -> (f64, f64) {
        if v.is_empty() {
            return (0.0, 0.0);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (pos_mean, pos_sigma) = stats(&pos);
    let (neg_mean, neg_sigma) = stats(&neg);
    SpreadStats {
        pos_mean,
        pos_sigma,
        neg_mean,
        neg_sigma,
    }
}

//! Toy trainer for the aggregation layer.
//!
//! Trains cluster centers and assignment coefficients on synthetic feature
//! tuples with AdaDelta, logging per-iteration loss, pair-identification
//! rates on train and validation tuples, dot-product spreads and the number
//! of zero-loss tuples per batch. Deterministic per seed: batches are drawn
//! from a seeded shuffle and processed in canonical index order.

use crate::loss::{
    loss_gradient, spread_stats, LossConfig, LossError, LossKind, TrainingTuple,
};
use crate::netvlad::grad::{
    describe_backward, describe_forward, flatten_gradient, flatten_params, unflatten_params,
    VladGradient,
};
use crate::netvlad::{init_params, FeatureMap, NetvladError, VladParams};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },
    #[error("dataset has no training tuples")]
    EmptyDataset,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Netvlad(#[from] NetvladError),
}

/// One training sample in feature space: descriptors are produced by the
/// aggregation layer under the current parameters.
#[derive(Debug, Clone)]
pub struct FeatureTuple {
    pub query: FeatureMap,
    pub positives: Vec<FeatureMap>,
    pub negatives: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct TupleDataset {
    pub train: Vec<FeatureTuple>,
    pub validation: Vec<FeatureTuple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub clusters: usize,
    pub dim: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub stagnation_epochs: usize,
    pub regularization: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            clusters: 4,
            dim: 16,
            alpha: 1.0,
            batch_size: 4,
            iterations: 200,
            iterations_per_epoch: 500,
            learning_rate: 1.0,
            lr_decay: 0.7,
            stagnation_epochs: 50,
            regularization: 0.001,
            margin: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss_rel: f64,
    pub train_pairs_pct: f64,
    pub val_pairs_pct: f64,
    pub pos_mu: f64,
    pub pos_sigma: f64,
    pub neg_mu: f64,
    pub neg_sigma: f64,
    pub zero_loss_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub kind: LossKind,
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn csv_header() -> &'static str {
        "iter,loss_rel,train_pairs_pct,val_pairs_pct,pos_mu,pos_sigma,neg_mu,neg_sigma,zero_loss_count"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.loss_rel,
                r.train_pairs_pct,
                r.val_pairs_pct,
                r.pos_mu,
                r.pos_sigma,
                r.neg_mu,
                r.neg_sigma,
                r.zero_loss_count
            ));
        }
        out
    }

    pub fn final_val_pairs_pct(&self) -> f64 {
        self.rows.last().map(|r| r.val_pairs_pct).unwrap_or(0.0)
    }

    pub fn cumulative_zero_loss(&self) -> usize {
        self.rows.iter().map(|r| r.zero_loss_count).sum()
    }
}

/// Standard AdaDelta accumulator (decay rho, stabilizer eps) over a flat
/// parameter vector.
pub struct AdaDelta {
    rho: f64,
    eps: f64,
    avg_sq_grad: Vec<f64>,
    avg_sq_update: Vec<f64>,
}

impl AdaDelta {
    pub fn new(len: usize) -> Self {
        AdaDelta {
            rho: 0.95,
            eps: 1e-6,
            avg_sq_grad: vec![0.0; len],
            avg_sq_update: vec![0.0; len],
        }
    }

    /// Update direction for the given gradient (already negated).
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        let mut update = Vec::with_capacity(grad.len());
        for (i, g) in grad.iter().enumerate() {
            self.avg_sq_grad[i] = self.rho * self.avg_sq_grad[i] + (1.0 - self.rho) * g * g;
            let dx = -g * ((self.avg_sq_update[i] + self.eps).sqrt()
                / (self.avg_sq_grad[i] + self.eps).sqrt());
            self.avg_sq_update[i] = self.rho * self.avg_sq_update[i] + (1.0 - self.rho) * dx * dx;
            update.push(dx);
        }
        update
    }
}

/// Descriptors of one feature tuple under the given parameters.
fn tuple_descriptors(
    tuple: &FeatureTuple,
    params: &VladParams,
) -> Result<TrainingTuple, NetvladError> {
    let (query, _) = describe_forward(&tuple.query, params)?;
    let mut positives = Vec::with_capacity(tuple.positives.len());
    for f in &tuple.positives {
        positives.push(describe_forward(f, params)?.0);
    }
    let mut negatives = Vec::with_capacity(tuple.negatives.len());
    for f in &tuple.negatives {
        negatives.push(describe_forward(f, params)?.0);
    }
    Ok(TrainingTuple {
        query,
        positives,
        negatives,
    })
}

/// Mean correct-pair percentage of a tuple set under the given parameters.
pub fn pair_identification_pct(
    tuples: &[FeatureTuple],
    params: &VladParams,
) -> Result<f64, NetvladError> {
    if tuples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in tuples {
        total += tuple_descriptors(t, params)?.correct_pair_fraction();
    }
    Ok(100.0 * total / tuples.len() as f64)
}

/// Loss, descriptors and parameter gradient of one feature tuple: the full
/// chain from feature maps through aggregation into the chosen loss.
pub fn feature_tuple_gradient(
    tuple: &FeatureTuple,
    params: &VladParams,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<(f64, TrainingTuple, VladGradient), TrainError> {
    let (query, query_cache) = describe_forward(&tuple.query, params)?;
    let mut positives = Vec::with_capacity(tuple.positives.len());
    let mut pos_caches = Vec::with_capacity(tuple.positives.len());
    for f in &tuple.positives {
        let (d, c) = describe_forward(f, params)?;
        positives.push(d);
        pos_caches.push(c);
    }
    let mut negatives = Vec::with_capacity(tuple.negatives.len());
    let mut neg_caches = Vec::with_capacity(tuple.negatives.len());
    for f in &tuple.negatives {
        let (d, c) = describe_forward(f, params)?;
        negatives.push(d);
        neg_caches.push(c);
    }
    let descriptors = TrainingTuple {
        query,
        positives,
        negatives,
    };
    let (loss_value, desc_grad) = loss_gradient(&descriptors, kind, cfg)?;

    let mut grad = VladGradient::zeros(params, tuple.query.width, tuple.query.height);
    let g = describe_backward(&tuple.query, params, &query_cache, &desc_grad.query);
    grad.accumulate_params(&g);
    for ((f, cache), dg) in tuple
        .positives
        .iter()
        .zip(pos_caches.iter())
        .zip(desc_grad.positives.iter())
    {
        let g = describe_backward(f, params, cache, dg);
        grad.accumulate_params(&g);
    }
    for ((f, cache), dg) in tuple
        .negatives
        .iter()
        .zip(neg_caches.iter())
        .zip(desc_grad.negatives.iter())
    {
        let g = describe_backward(f, params, cache, dg);
        grad.accumulate_params(&g);
    }
    Ok((loss_value, descriptors, grad))
}

/// Train the aggregation parameters on the dataset and return the log plus
/// the final parameters.
pub fn toy_train(
    dataset: &TupleDataset,
    cfg: &ToyTrainConfig,
    kind: LossKind,
) -> Result<(TrainLog, VladParams), TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(cfg.clusters, cfg.dim, cfg.alpha, cfg.seed);
    let loss_cfg = LossConfig { margin: cfg.margin };
    let mut optimizer = AdaDelta::new(flatten_params(&params).len());
    let mut lr = cfg.learning_rate;

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut cursor = order.len(); // force shuffle on first use
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut first_loss = None;
    let mut best_epoch_loss = f64::INFINITY;
    let mut stagnant_epochs = 0usize;
    let mut epoch_loss_acc = 0.0;
    let mut epoch_iters = 0usize;

    for iter in 0..cfg.iterations {
        // Draw the next batch from the shuffled order, then process it in
        // ascending index order so summation order is canonical.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch.sort_unstable();

        let mut batch_loss = 0.0;
        let mut batch_grad = VladGradient::zeros(
            &params,
            dataset.train[0].query.width,
            dataset.train[0].query.height,
        );
        let mut batch_descriptors = Vec::with_capacity(cfg.batch_size);
        let mut zero_count = 0usize;
        for &idx in &batch {
            let (l, descriptors, grad) =
                feature_tuple_gradient(&dataset.train[idx], &params, kind, &loss_cfg)?;
            if l == 0.0 {
                zero_count += 1;
            }
            batch_loss += l;
            batch_grad.accumulate_params(&grad);
            batch_descriptors.push(descriptors);
        }
        batch_loss /= cfg.batch_size as f64;
        batch_grad.scale_params(1.0 / cfg.batch_size as f64);

        // L2 regularization on the learnable parameters.
        let flat = flatten_params(&params);
        let reg_loss: f64 = cfg.regularization * flat.iter().map(|x| x * x).sum::<f64>();
        let total_loss = batch_loss + reg_loss;
        if !total_loss.is_finite() {
            return Err(TrainError::Diverged { iteration: iter });
        }

        let first = *first_loss.get_or_insert(total_loss);
        let loss_rel = if first > 0.0 { total_loss / first } else { 1.0 };

        let train_pairs = 100.0
            * batch_descriptors
                .iter()
                .map(|d| d.correct_pair_fraction())
                .sum::<f64>()
            / batch_descriptors.len() as f64;
        let val_pairs = pair_identification_pct(&dataset.validation, &params)?;
        let spreads = spread_stats(&batch_descriptors);
        rows.push(TrainLogRow {
            iter,
            loss_rel,
            train_pairs_pct: train_pairs,
            val_pairs_pct: val_pairs,
            pos_mu: spreads.pos_mean,
            pos_sigma: spreads.pos_sigma,
            neg_mu: spreads.neg_mean,
            neg_sigma: spreads.neg_sigma,
            zero_loss_count: zero_count,
        });

        // Parameter update.
        let mut grad_flat = flatten_gradient(&batch_grad);
        for (g, x) in grad_flat.iter_mut().zip(flat.iter()) {
            *g += 2.0 * cfg.regularization * x;
        }
        let update = optimizer.step(&grad_flat);
        let new_flat: Vec<f64> = flat
            .iter()
            .zip(update.iter())
            .map(|(x, dx)| x + lr * dx)
            .collect();
        params = unflatten_params(&new_flat, &params);

        // Learning-rate schedule: decay on epochs without improvement.
        epoch_loss_acc += total_loss;
        epoch_iters += 1;
        if epoch_iters == cfg.iterations_per_epoch {
            let epoch_loss = epoch_loss_acc / epoch_iters as f64;
            if epoch_loss < best_epoch_loss {
                best_epoch_loss = epoch_loss;
                stagnant_epochs = 0;
            } else {
                stagnant_epochs += 1;
                if stagnant_epochs >= cfg.stagnation_epochs {
                    lr *= cfg.lr_decay;
                    stagnant_epochs = 0;
                }
            }
            epoch_loss_acc = 0.0;
            epoch_iters = 0;
        }
    }
    Ok((TrainLog { kind, rows }, params))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

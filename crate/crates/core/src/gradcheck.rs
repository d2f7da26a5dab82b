//! Finite-difference validation of every analytic gradient path.
//!
//! Checks the loss subgradients against central differences in descriptor
//! space, and the full chain from feature map through aggregation and
//! normalization into the loss against central differences over the layer
//! parameters. Tuples too close to a hinge kink are resampled; the zero
//! branch at a kink is a subgradient choice, not a smooth derivative.

use crate::loss::{loss, loss_gradient, LossConfig, LossKind, TrainingTuple};
use crate::netvlad::grad::{flatten_gradient, flatten_params, unflatten_params};
use crate::netvlad::{init_params, ImageDescriptor};
use crate::sim::tuples::{generate_tuples, TupleDatasetConfig};
use crate::train::feature_tuple_gradient;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Tuples per loss kind for the descriptor-space check.
    pub tuples: usize,
    /// Tuples per loss kind for the through-aggregation check.
    pub feature_tuples: usize,
    pub descriptor_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Minimum distance of any pair slack from the hinge kink.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            tuples: 100,
            feature_tuples: 100,
            descriptor_dim: 16,
            step: 1e-6,
            tolerance: 1e-5,
            kink_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub triplet_max_rel: f64,
    pub allpair_max_rel: f64,
    pub netvlad_max_rel: f64,
    pub tuples_checked: usize,
    pub feature_tuples_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative error with a scale floor: components far below the typical
/// gradient magnitude are judged on absolute agreement, since the central
/// difference itself carries cancellation noise around 1e-10.
fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-2)
}

fn random_unit(dim: usize, rng: &mut ChaCha12Rng) -> ImageDescriptor {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = ImageDescriptor::normalized(v);
        if d.norm() > 0.5 {
            return d;
        }
    }
}

fn min_slack(t: &TrainingTuple, margin: f64) -> f64 {
    let pos = t.positive_dots();
    let neg = t.negative_dots();
    pos.iter()
        .flat_map(|p| neg.iter().map(move |n| (n - p + margin).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Descriptor-space check: analytic subgradient versus central differences
/// on every coordinate of every tuple member. Returns the max relative
/// error over `cfg.tuples` kink-free tuples.
fn descriptor_space_check(
    kind: LossKind,
    cfg: &GradCheckConfig,
    loss_cfg: &LossConfig,
    flip_one_sign: bool,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(kind as u64));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < cfg.tuples {
        let t = TrainingTuple {
            query: random_unit(cfg.descriptor_dim, &mut rng),
            positives: (0..3).map(|_| random_unit(cfg.descriptor_dim, &mut rng)).collect(),
            negatives: (0..3).map(|_| random_unit(cfg.descriptor_dim, &mut rng)).collect(),
        };
        if min_slack(&t, loss_cfg.margin) < cfg.kink_margin {
            continue;
        }
        checked += 1;
        let (_, mut grad) = loss_gradient(&t, kind, loss_cfg).expect("non-empty tuple");
        if flip_one_sign && checked == 1 {
            // Fault-injection fixture: a sign error the check must catch.
            if let Some(v) = grad.query.iter_mut().find(|v| v.abs() > 1e-3) {
                *v = -*v;
            }
        }
        // Central differences over each member.
        let fd_vs = |t: &TrainingTuple| -> Vec<(f64, f64)> {
            let mut pairs = Vec::new();
            let perturbed_loss = |mutate: &dyn Fn(&mut TrainingTuple)| -> f64 {
                let mut copy = t.clone();
                mutate(&mut copy);
                loss(&copy, kind, loss_cfg).expect("non-empty tuple")
            };
            for d in 0..t.query.len() {
                let plus = perturbed_loss(&|c| c.query.values[d] += cfg.step);
                let minus = perturbed_loss(&|c| c.query.values[d] -= cfg.step);
                pairs.push(((plus - minus) / (2.0 * cfg.step), grad.query[d]));
            }
            for (i, g) in grad.positives.iter().enumerate() {
                for d in 0..t.positives[i].len() {
                    let plus = perturbed_loss(&|c| c.positives[i].values[d] += cfg.step);
                    let minus = perturbed_loss(&|c| c.positives[i].values[d] -= cfg.step);
                    pairs.push(((plus - minus) / (2.0 * cfg.step), g[d]));
                }
            }
            for (j, g) in grad.negatives.iter().enumerate() {
                for d in 0..t.negatives[j].len() {
                    let plus = perturbed_loss(&|c| c.negatives[j].values[d] += cfg.step);
                    let minus = perturbed_loss(&|c| c.negatives[j].values[d] -= cfg.step);
                    pairs.push(((plus - minus) / (2.0 * cfg.step), g[d]));
                }
            }
            pairs
        };
        for (fd, analytic) in fd_vs(&t) {
            worst = worst.max(rel_error(fd, analytic));
        }
    }
    worst
}

/// Through-aggregation check: gradients of `loss(describe(features))` with
/// respect to the layer parameters, against central differences.
fn netvlad_chain_check(cfg: &GradCheckConfig, loss_cfg: &LossConfig) -> (f64, usize) {
    let dataset = generate_tuples(&TupleDatasetConfig {
        seed: cfg.seed.wrapping_add(17),
        places: 8,
        width: 3,
        height: 3,
        channels: 16,
        train_tuples: cfg.feature_tuples * 2,
        validation_tuples: 0,
        positives: 2,
        negatives: 2,
        sample_noise: 1.5,
        hard_fraction: 0.0,
        hard_sample_noise: None,
        confuser_mix: 0.0,
    });
    let params = init_params(4, 16, 1.0, cfg.seed.wrapping_add(23));
    let flat = flatten_params(&params);
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    for tuple in &dataset.train {
        if checked >= cfg.feature_tuples {
            break;
        }
        let mut used = false;
        for kind in [LossKind::Triplet, LossKind::Allpair] {
            let (tuple_loss, descriptors, grad) =
                feature_tuple_gradient(tuple, &params, kind, loss_cfg).expect("valid tuple");
            // Require an active loss away from the kink so the check is not
            // vacuous: a separated tuple has zero gradient on both sides.
            if tuple_loss == 0.0 || min_slack(&descriptors, loss_cfg.margin) < cfg.kink_margin {
                continue;
            }
            used = true;
            let analytic = flatten_gradient(&grad);
            let eval = |flat_params: &[f64]| -> f64 {
                let p = unflatten_params(flat_params, &params);
                let (l, _, _) =
                    feature_tuple_gradient(tuple, &p, kind, loss_cfg).expect("valid tuple");
                l
            };
            for idx in 0..flat.len() {
                let mut plus = flat.clone();
                plus[idx] += cfg.step;
                let mut minus = flat.clone();
                minus[idx] -= cfg.step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * cfg.step);
                worst = worst.max(rel_error(fd, analytic[idx]));
            }
        }
        if used {
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn run_gradcheck(cfg: &GradCheckConfig) -> GradCheckReport {
    run_gradcheck_with_fault(cfg, false)
}

/// `flip_one_sign` injects a deliberate sign error into one analytic
/// gradient so tests can confirm the check actually fails on bad gradients.
pub fn run_gradcheck_with_fault(cfg: &GradCheckConfig, flip_one_sign: bool) -> GradCheckReport {
    let loss_cfg = LossConfig::default();
    let triplet_max_rel = descriptor_space_check(LossKind::Triplet, cfg, &loss_cfg, flip_one_sign);
    let allpair_max_rel = descriptor_space_check(LossKind::Allpair, cfg, &loss_cfg, flip_one_sign);
    let (netvlad_max_rel, feature_tuples_checked) = netvlad_chain_check(cfg, &loss_cfg);
    let pass = triplet_max_rel <= cfg.tolerance
        && allpair_max_rel <= cfg.tolerance
        && netvlad_max_rel <= cfg.tolerance;
    GradCheckReport {
        triplet_max_rel,
        allpair_max_rel,
        netvlad_max_rel,
        tuples_checked: cfg.tuples,
        feature_tuples_checked,
        tolerance: cfg.tolerance,
        pass,
    }
}

//! Backward pass through the aggregation pipeline.
//!
//! The forward pass caches soft assignments and normalization factors so a
//! descriptor-space gradient can be pulled back onto the cluster centers,
//! assignment coefficients and the input feature map. Assignments depend on
//! the weights and biases only; the centers enter through the residuals.
//! That keeps the parameters decoupled, matching how they are trained.

use super::{FeatureMap, ImageDescriptor, NetvladError, VladParams, ZERO_COLUMN_EPS};
use nalgebra::DMatrix;

/// Intermediate state of one `describe` evaluation.
pub struct DescribeCache {
    /// Soft assignments per pixel (pixel-major, K per pixel).
    assignments: Vec<f64>,
    /// Raw residual sums, D x K.
    v: DMatrix<f64>,
    /// Per-cluster column norms before intra-normalization.
    col_norms: Vec<f64>,
    /// Flattened intra-normalized vector before global normalization.
    y: Vec<f64>,
    y_norm: f64,
}

/// Gradients of a scalar with respect to every learnable and the input map.
#[derive(Debug, Clone)]
pub struct VladGradient {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub features: FeatureMap,
}

impl VladGradient {
    pub fn zeros(p: &VladParams, width: usize, height: usize) -> Self {
        VladGradient {
            centers: vec![vec![0.0; p.dim]; p.clusters],
            weights: vec![vec![0.0; p.dim]; p.clusters],
            biases: vec![0.0; p.clusters],
            features: FeatureMap::zeros(width, height, p.dim),
        }
    }

    pub fn accumulate_params(&mut self, other: &VladGradient) {
        for (a, b) in self.centers.iter_mut().zip(other.centers.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (x, y) in self.biases.iter_mut().zip(other.biases.iter()) {
            *x += y;
        }
    }

    pub fn scale_params(&mut self, s: f64) {
        for row in self.centers.iter_mut().chain(self.weights.iter_mut()) {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        for x in self.biases.iter_mut() {
            *x *= s;
        }
    }
}

/// Flat parameter vector layout used by the optimizer: centers, weights,
/// biases, each cluster-major.
pub fn flatten_params(p: &VladParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.clusters * (2 * p.dim + 1));
    for row in p.centers.iter().chain(p.weights.iter()) {
        out.extend_from_slice(row);
    }
    out.extend_from_slice(&p.biases);
    out
}

pub fn unflatten_params(flat: &[f64], template: &VladParams) -> VladParams {
    let (k, d) = (template.clusters, template.dim);
    debug_assert_eq!(flat.len(), k * (2 * d + 1));
    let mut p = template.clone();
    for ki in 0..k {
        p.centers[ki].copy_from_slice(&flat[ki * d..(ki + 1) * d]);
        p.weights[ki].copy_from_slice(&flat[k * d + ki * d..k * d + (ki + 1) * d]);
    }
    p.biases.copy_from_slice(&flat[2 * k * d..]);
    p
}

pub fn flatten_gradient(g: &VladGradient) -> Vec<f64> {
    let k = g.centers.len();
    let d = g.centers[0].len();
    let mut out = Vec::with_capacity(k * (2 * d + 1));
    for row in g.centers.iter().chain(g.weights.iter()) {
        out.extend_from_slice(row);
    }
    out.extend_from_slice(&g.biases);
    out
}

/// Forward pass that records everything the backward pass needs.
pub fn describe_forward(
    f: &FeatureMap,
    p: &VladParams,
) -> Result<(ImageDescriptor, DescribeCache), NetvladError> {
    if f.channels != p.dim {
        return Err(NetvladError::ChannelMismatch {
            expected: p.dim,
            got: f.channels,
        });
    }
    let pixels = f.pixels();
    let mut assignments = vec![0.0; pixels * p.clusters];
    let mut v = DMatrix::<f64>::zeros(p.dim, p.clusters);
    for pix in 0..pixels {
        let h = f.pixel(pix);
        let a = super::soft_assign(h, p);
        assignments[pix * p.clusters..(pix + 1) * p.clusters].copy_from_slice(&a);
        for k in 0..p.clusters {
            let ak = a[k];
            let center = &p.centers[k];
            let mut col = v.column_mut(k);
            for d in 0..p.dim {
                col[d] += ak * (h[d] - center[d]);
            }
        }
    }
    let mut col_norms = Vec::with_capacity(p.clusters);
    let mut y = Vec::with_capacity(p.dim * p.clusters);
    for k in 0..p.clusters {
        let col = v.column(k);
        let norm = col.norm();
        col_norms.push(norm);
        if norm < ZERO_COLUMN_EPS {
            y.extend(std::iter::repeat(0.0).take(p.dim));
        } else {
            y.extend(col.iter().map(|x| x / norm));
        }
    }
    let y_norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
    let values = if y_norm > ZERO_COLUMN_EPS {
        y.iter().map(|x| x / y_norm).collect()
    } else {
        y.clone()
    };
    Ok((
        ImageDescriptor { values },
        DescribeCache {
            assignments,
            v,
            col_norms,
            y,
            y_norm,
        },
    ))
}

/// Pull a gradient in descriptor space back onto parameters and features.
/// `d_desc` is the derivative of the scalar objective with respect to each
/// descriptor entry.
pub fn describe_backward(
    f: &FeatureMap,
    p: &VladParams,
    cache: &DescribeCache,
    d_desc: &[f64],
) -> VladGradient {
    let (k_total, dim) = (p.clusters, p.dim);
    let mut grad = VladGradient::zeros(p, f.width, f.height);
    if cache.y_norm < ZERO_COLUMN_EPS {
        return grad;
    }

    // Global normalization backward: eta = y / |y|.
    let eta: Vec<f64> = cache.y.iter().map(|x| x / cache.y_norm).collect();
    let g_dot_eta: f64 = d_desc.iter().zip(eta.iter()).map(|(g, e)| g * e).sum();
    let d_y: Vec<f64> = d_desc
        .iter()
        .zip(eta.iter())
        .map(|(g, e)| (g - g_dot_eta * e) / cache.y_norm)
        .collect();

    // Intra-normalization backward per cluster column.
    let mut d_v = DMatrix::<f64>::zeros(dim, k_total);
    for k in 0..k_total {
        let n = cache.col_norms[k];
        if n < ZERO_COLUMN_EPS {
            continue;
        }
        let g_block = &d_y[k * dim..(k + 1) * dim];
        let col = cache.v.column(k);
        let y_block: Vec<f64> = col.iter().map(|x| x / n).collect();
        let g_dot_y: f64 = g_block.iter().zip(y_block.iter()).map(|(g, y)| g * y).sum();
        let mut dst = d_v.column_mut(k);
        for d in 0..dim {
            dst[d] = (g_block[d] - g_dot_y * y_block[d]) / n;
        }
    }

    // Aggregation backward: residual term to centers, assignment term
    // through the softmax to weights and biases, both terms to the features.
    let mut assign_mass = vec![0.0; k_total];
    for pix in 0..f.pixels() {
        let a = &cache.assignments[pix * k_total..(pix + 1) * k_total];
        let h = f.pixel(pix);

        // dL/da_k = dV_k . (h - c_k)
        let mut d_a = vec![0.0; k_total];
        for k in 0..k_total {
            assign_mass[k] += a[k];
            let col = d_v.column(k);
            let center = &p.centers[k];
            let mut acc = 0.0;
            for d in 0..dim {
                acc += col[d] * (h[d] - center[d]);
            }
            d_a[k] = acc;
        }

        // Softmax backward.
        let s: f64 = a.iter().zip(d_a.iter()).map(|(ak, g)| ak * g).sum();
        let d_r: Vec<f64> = a
            .iter()
            .zip(d_a.iter())
            .map(|(ak, g)| ak * (g - s))
            .collect();

        let fgrad = grad.features.pixel_mut(pix);
        for k in 0..k_total {
            let drk = d_r[k];
            if drk != 0.0 {
                for d in 0..dim {
                    grad.weights[k][d] += drk * h[d];
                    fgrad[d] += drk * p.weights[k][d];
                }
                grad.biases[k] += drk;
            }
            let ak = a[k];
            let col = d_v.column(k);
            for d in 0..dim {
                fgrad[d] += ak * col[d];
            }
        }
    }
    for k in 0..k_total {
        let col = d_v.column(k);
        for d in 0..dim {
            grad.centers[k][d] = -assign_mass[k] * col[d];
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::super::test_support::random_feature_map;
    use super::super::{describe, init_params};
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn forward_matches_describe() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = init_params(4, 8, 1.0, 2);
        let f = random_feature_map(3, 2, 8, &mut rng);
        let (d, _) = describe_forward(&f, &params).unwrap();
        let reference = describe(&f, &params, None).unwrap();
        assert_eq!(d, reference);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let params = init_params(3, 5, 1.0, 4);
        let f = random_feature_map(3, 2, 5, &mut rng);
        // Scalar objective: fixed random linear functional of the descriptor.
        let (d0, cache) = describe_forward(&f, &params).unwrap();
        let g: Vec<f64> = (0..d0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = describe_backward(&f, &params, &cache, &g);

        let eval = |p: &VladParams, fm: &FeatureMap| -> f64 {
            let (d, _) = describe_forward(fm, p).unwrap();
            d.values.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let step = 1e-6;

        let flat = flatten_params(&params);
        let analytic = flatten_gradient(&grad);
        for idx in 0..flat.len() {
            let mut plus = flat.clone();
            plus[idx] += step;
            let mut minus = flat.clone();
            minus[idx] -= step;
            let fd = (eval(&unflatten_params(&plus, &params), &f)
                - eval(&unflatten_params(&minus, &params), &f))
                / (2.0 * step);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(
                (fd - analytic[idx]).abs() / denom < 1e-5,
                "param {idx}: fd={fd} analytic={}",
                analytic[idx]
            );
        }

        for pix in 0..f.pixels() {
            for c in 0..f.channels {
                let mut plus = f.clone();
                plus.pixel_mut(pix)[c] += step;
                let mut minus = f.clone();
                minus.pixel_mut(pix)[c] -= step;
                let fd = (eval(&params, &plus) - eval(&params, &minus)) / (2.0 * step);
                let an = grad.features.pixel(pix)[c];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-5);
            }
        }
    }
}

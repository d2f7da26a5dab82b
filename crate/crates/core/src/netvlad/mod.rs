//! Whole-image descriptor aggregation.
//!
//! Per-pixel feature descriptors are softly assigned to K learnable cluster
//! centers; the weighted residuals are summed per cluster, intra-normalized
//! and flattened into a single unit-norm image descriptor. The soft
//! assignment is an affine map plus softmax, so the whole layer is
//! differentiable ([`grad`] holds the backward pass). [`backbone`] provides
//! toy convolutional feature extractors and [`flops`] the analytic
//! computation/parameter accounting for them.

pub mod backbone;
pub mod flops;
pub mod grad;

use nalgebra::DMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns with norm below this are treated as empty clusters and normalize
/// to zero instead of NaN.
pub const ZERO_COLUMN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NetvladError {
    #[error("feature map has {got} channels, parameters expect {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("squash expects {expected} input channels, feature map has {got}")]
    SquashMismatch { expected: usize, got: usize },
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    BadShape {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
}

/// Dense grid of per-pixel descriptors: `width * height` pixels, `channels`
/// values per pixel, stored pixel-major in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, NetvladError> {
        if data.len() != width * height * channels {
            return Err(NetvladError::BadShape {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Descriptor of the pixel at row-major index `p`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Learnable aggregation parameters: K cluster centers in R^D plus the
/// affine assignment coefficients. At initialization the assignment is
/// coupled to the centers (`w_k = 2*alpha*c_k`, `b_k = -alpha*|c_k|^2`);
/// training may decouple them.
#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    pub clusters: usize,
    pub dim: usize,
    pub alpha: f64,
    /// Cluster centers, `clusters` rows of `dim` values.
    pub centers: Vec<Vec<f64>>,
    /// Assignment weights, same layout as `centers`.
    pub weights: Vec<Vec<f64>>,
    /// Assignment biases, one per cluster.
    pub biases: Vec<f64>,
}

/// Per-cluster residual sums before normalization: a D x K matrix whose
/// column k is the weighted residual sum for cluster k.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVlad(pub DMatrix<f64>);

/// Flattened, per-cluster and globally normalized scene descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageDescriptor {
    pub values: Vec<f64>,
}

impl ImageDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &ImageDescriptor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Build a unit-norm descriptor from raw values. All-zero input stays
    /// all-zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > ZERO_COLUMN_EPS {
            for v in values.iter_mut() {
                *v /= norm;
            }
        }
        ImageDescriptor { values }
    }
}

/// Per-channel 1x1 convolution used to squash the feature-map channel count
/// before aggregation. Applied per pixel as a plain matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSquash {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels` rows of `in_channels` coefficients.
    pub weights: Vec<Vec<f64>>,
}

impl ChannelSquash {
    pub fn random(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_channels as f64).sqrt();
        let weights = (0..out_channels)
            .map(|_| {
                (0..in_channels)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * scale
                    })
                    .collect()
            })
            .collect();
        ChannelSquash {
            in_channels,
            out_channels,
            weights,
        }
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap, NetvladError> {
        if f.channels != self.in_channels {
            return Err(NetvladError::SquashMismatch {
                expected: self.in_channels,
                got: f.channels,
            });
        }
        let mut out = FeatureMap::zeros(f.width, f.height, self.out_channels);
        for p in 0..f.pixels() {
            let src = f.pixel(p);
            let dst = out.pixel_mut(p);
            for (o, row) in self.weights.iter().enumerate() {
                dst[o] = row.iter().zip(src.iter()).map(|(w, x)| w * x).sum();
            }
        }
        Ok(out)
    }
}

/// Draw cluster centers uniformly from the unit hypersphere and couple the
/// assignment coefficients to them. Deterministic per seed.
pub fn init_params(clusters: usize, dim: usize, alpha: f64, seed: u64) -> VladParams {
    assert!(clusters >= 1 && dim >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in c.iter_mut() {
            *v /= norm;
        }
        centers.push(c);
    }
    params_from_centers(centers, alpha)
}

/// Couple weights and biases to the given centers: `w_k = 2*alpha*c_k`,
/// `b_k = -alpha*|c_k|^2`.
pub fn params_from_centers(centers: Vec<Vec<f64>>, alpha: f64) -> VladParams {
    let clusters = centers.len();
    let dim = centers[0].len();
    let weights: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| c.iter().map(|v| 2.0 * alpha * v).collect())
        .collect();
    let biases: Vec<f64> = centers
        .iter()
        .map(|c| -alpha * c.iter().map(|v| v * v).sum::<f64>())
        .collect();
    VladParams {
        clusters,
        dim,
        alpha,
        centers,
        weights,
        biases,
    }
}

/// Softmax assignment of one descriptor to the K clusters. The scores are
/// the affine responses `r_k = w_k . h + b_k`; with coupled parameters this
/// equals the normalized Gaussian kernel on squared center distances.
pub fn soft_assign(h: &[f64], p: &VladParams) -> Vec<f64> {
    debug_assert_eq!(h.len(), p.dim);
    let mut scores = Vec::with_capacity(p.clusters);
    for k in 0..p.clusters {
        let r = p.weights[k]
            .iter()
            .zip(h.iter())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + p.biases[k];
        scores.push(r);
    }
    softmax_in_place(&mut scores);
    scores
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Sum soft-assigned residuals per cluster. Pixels are consumed in row-major
/// order so repeated calls are bit-reproducible.
pub fn vlad_aggregate(f: &FeatureMap, p: &VladParams) -> Result<RawVlad, NetvladError> {
    if f.channels != p.dim {
        return Err(NetvladError::ChannelMismatch {
            expected: p.dim,
            got: f.channels,
        });
    }
    let mut v = DMatrix::<f64>::zeros(p.dim, p.clusters);
    for pix in 0..f.pixels() {
        let h = f.pixel(pix);
        let a = soft_assign(h, p);
        for k in 0..p.clusters {
            let ak = a[k];
            let center = &p.centers[k];
            let mut col = v.column_mut(k);
            for d in 0..p.dim {
                col[d] += ak * (h[d] - center[d]);
            }
        }
    }
    Ok(RawVlad(v))
}

/// Per-cluster L2 normalization followed by global L2 normalization of the
/// flattened vector. Cluster blocks are laid out consecutively.
pub fn intra_normalize(v: &RawVlad) -> ImageDescriptor {
    let (dim, clusters) = v.0.shape();
    let mut values = Vec::with_capacity(dim * clusters);
    for k in 0..clusters {
        let col = v.0.column(k);
        let norm = col.norm();
        if norm < ZERO_COLUMN_EPS {
            values.extend(std::iter::repeat(0.0).take(dim));
        } else {
            values.extend(col.iter().map(|x| x / norm));
        }
    }
    ImageDescriptor::normalized(values)
}

/// Full descriptor pipeline: optional channel squash, aggregation, then
/// intra-normalization.
pub fn describe(
    f: &FeatureMap,
    p: &VladParams,
    squash: Option<&ChannelSquash>,
) -> Result<ImageDescriptor, NetvladError> {
    match squash {
        Some(s) => {
            let squashed = s.apply(f)?;
            Ok(intra_normalize(&vlad_aggregate(&squashed, p)?))
        }
        None => Ok(intra_normalize(&vlad_aggregate(f, p)?)),
    }
}

//! Analytic computation and parameter accounting for backbone tables.
//!
//! Conventions: one multiply-accumulate counts as 2 FLOPs, convolution
//! layers only (bias and activation ignored, pooling free). The aggregation
//! layer on top of a tap is costed as its 1x1 assignment convolution
//! (2*W*H*K*D), a softmax at 4 ops per entry and the weighted residual
//! accumulation (3*W*H*K*D).

use super::backbone::{BackboneSpec, LayerKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountReport {
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy)]
struct LayerStat {
    out_w: usize,
    out_h: usize,
    out_c: usize,
    flops: u64,
    params: u64,
}

fn walk(spec: &BackboneSpec, input: (usize, usize)) -> Vec<LayerStat> {
    let (mut w, mut h) = input;
    let mut stats = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let (ow, oh) = match layer.kind {
            LayerKind::MaxPool => (
                (w - layer.kernel) / layer.stride + 1,
                (h - layer.kernel) / layer.stride + 1,
            ),
            _ => (w.div_ceil(layer.stride), h.div_ceil(layer.stride)),
        };
        let spatial = (ow * oh) as u64;
        let k2 = (layer.kernel * layer.kernel) as u64;
        let (flops, params) = match layer.kind {
            LayerKind::StandardConv => {
                let macs = spatial * layer.out_channels as u64 * layer.in_channels as u64 * k2;
                (
                    2 * macs,
                    (layer.out_channels * layer.in_channels) as u64 * k2,
                )
            }
            LayerKind::DepthwiseConv => {
                let macs = spatial * layer.in_channels as u64 * k2;
                (2 * macs, layer.in_channels as u64 * k2)
            }
            LayerKind::PointwiseConv => {
                let macs = spatial * layer.out_channels as u64 * layer.in_channels as u64;
                (2 * macs, (layer.out_channels * layer.in_channels) as u64)
            }
            LayerKind::MaxPool => (0, 0),
        };
        stats.push(LayerStat {
            out_w: ow,
            out_h: oh,
            out_c: layer.out_channels,
            flops,
            params,
        });
        w = ow;
        h = oh;
    }
    stats
}

/// Analytic FLOP and parameter counts for a layer table at the given input
/// size.
pub fn count_flops_params(spec: &BackboneSpec, input: (usize, usize)) -> CountReport {
    let stats = walk(spec, input);
    CountReport {
        flops: stats.iter().map(|s| s.flops).sum(),
        params: stats.iter().map(|s| s.params).sum(),
    }
}

/// Cost of the aggregation layer on a W x H x D tap with K clusters.
pub fn aggregation_flops(w: usize, h: usize, channels: usize, clusters: usize) -> u64 {
    let spatial = (w * h) as u64;
    let assign = 2 * spatial * clusters as u64 * channels as u64;
    let softmax = 4 * spatial * clusters as u64;
    let residuals = 3 * spatial * clusters as u64 * channels as u64;
    assign + softmax + residuals
}

/// Learnable parameters of the aggregation layer: centers, weights, biases.
pub fn aggregation_params(channels: usize, clusters: usize) -> u64 {
    (2 * channels * clusters + clusters) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vgg16,
    Decoupled,
    Custom(BackboneSpec),
}

impl BackboneKind {
    fn spec(&self) -> BackboneSpec {
        match self {
            BackboneKind::Vgg16 => BackboneSpec::vgg16(),
            BackboneKind::Decoupled => BackboneSpec::decoupled(),
            BackboneKind::Custom(spec) => spec.clone(),
        }
    }
}

/// One configuration of the accounting table: a backbone run in full for
/// computation cost, tapped at `tap` for the aggregation input and the
/// parameter count, optionally squashing channels before aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsConfig {
    pub name: String,
    pub backbone: BackboneKind,
    #[serde(default)]
    pub tap: Option<String>,
    pub clusters: usize,
    #[serde(default)]
    pub squash_to: Option<usize>,
    pub inputs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsRow {
    pub config: String,
    pub input: (usize, usize),
    pub gflops: f64,
    pub params: u64,
    pub desc_dim: usize,
}

impl FlopsRow {
    pub fn csv_header() -> &'static str {
        "config,input,gflops,params,desc_dim"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{}x{},{:.4},{},{}",
            self.config, self.input.0, self.input.1, self.gflops, self.params, self.desc_dim
        )
    }
}

/// Expand a configuration into one report row per input size.
pub fn report_rows(cfg: &FlopsConfig) -> Vec<FlopsRow> {
    let full = cfg.backbone.spec();
    let tapped = match &cfg.tap {
        Some(tap) => full
            .up_to(tap)
            .unwrap_or_else(|| panic!("unknown tap layer {tap}")),
        None => full.clone(),
    };
    let mut rows = Vec::new();
    for &input in &cfg.inputs {
        let full_stats = walk(&full, input);
        let tap_stats = walk(&tapped, input);
        let backbone_flops: u64 = full_stats.iter().map(|s| s.flops).sum();
        let tap_params: u64 = tap_stats.iter().map(|s| s.params).sum();
        let tap_out = tap_stats.last().expect("non-empty backbone");

        let (agg_channels, squash_flops, squash_params) = match cfg.squash_to {
            Some(d) => (
                d,
                2 * (tap_out.out_w * tap_out.out_h) as u64 * (tap_out.out_c * d) as u64,
                (tap_out.out_c * d) as u64,
            ),
            None => (tap_out.out_c, 0, 0),
        };
        let flops = backbone_flops
            + squash_flops
            + aggregation_flops(tap_out.out_w, tap_out.out_h, agg_channels, cfg.clusters);
        let params = tap_params + squash_params + aggregation_params(agg_channels, cfg.clusters);
        rows.push(FlopsRow {
            config: cfg.name.clone(),
            input,
            gflops: flops as f64 / 1e9,
            params,
            desc_dim: cfg.clusters * agg_channels,
        });
    }
    rows
}

/// The stock configuration set covering both backbones at every tap depth,
/// with and without channel squashing.
pub fn default_configs() -> Vec<FlopsConfig> {
    let inputs = vec![(320, 240), (640, 480)];
    let mut configs = Vec::new();
    for (kname, k) in [("K16", 16usize), ("K64", 64usize)] {
        for tap in ["block5_pool", "block4_pool", "block3_pool"] {
            configs.push(FlopsConfig {
                name: format!("VGG16_{kname}/{tap}"),
                backbone: BackboneKind::Vgg16,
                tap: Some(tap.to_string()),
                clusters: k,
                squash_to: None,
                inputs: inputs.clone(),
            });
        }
        for tap in ["pw13", "pw10", "pw7"] {
            configs.push(FlopsConfig {
                name: format!("decoup_{kname}/{tap}"),
                backbone: BackboneKind::Decoupled,
                tap: Some(tap.to_string()),
                clusters: k,
                squash_to: None,
                inputs: inputs.clone(),
            });
        }
    }
    for tap in ["pw13", "pw10", "pw7"] {
        configs.push(FlopsConfig {
            name: format!("decoup_K16_r/{tap}"),
            backbone: BackboneKind::Decoupled,
            tap: Some(tap.to_string()),
            clusters: 16,
            squash_to: Some(32),
            inputs: inputs.clone(),
        });
    }
    configs
}

/// Render rows for a set of configurations as CSV text.
pub fn report_csv(configs: &[FlopsConfig]) -> String {
    let mut out = String::from(FlopsRow::csv_header());
    out.push('\n');
    for cfg in configs {
        for row in report_rows(cfg) {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
    }
    out
}

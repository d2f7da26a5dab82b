//! Toy convolutional backbones.
//!
//! A backbone is an ordered layer table of standard, depthwise and pointwise
//! convolutions plus max-pooling. Convolutions use zero 'same' padding
//! (output size `ceil(in/stride)`); pooling is valid. Execution is meant for
//! small inputs; the full-resolution configurations exist for analytic
//! computation accounting only.

use super::{FeatureMap, NetvladError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Optional tap marker so configurations can truncate the table by name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl LayerSpec {
    fn conv(kind: LayerKind, kernel: usize, stride: usize, inc: usize, outc: usize) -> Self {
        LayerSpec {
            kind,
            kernel,
            stride,
            in_channels: inc,
            out_channels: outc,
            name: None,
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, String> {
        let spec = BackboneSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(json: &str) -> Result<Self, String> {
        let spec: BackboneSpec = serde_json::from_str(json).map_err(|e| e.to_string())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut channels = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(prev) = channels {
                if layer.in_channels != prev {
                    return Err(format!(
                        "layer {i}: in_channels {} does not match previous out_channels {prev}",
                        layer.in_channels
                    ));
                }
            }
            match layer.kind {
                LayerKind::PointwiseConv if layer.kernel != 1 => {
                    return Err(format!("layer {i}: pointwise convolution must have kernel 1"));
                }
                LayerKind::DepthwiseConv | LayerKind::MaxPool
                    if layer.in_channels != layer.out_channels =>
                {
                    return Err(format!("layer {i}: channel-preserving layer changes channels"));
                }
                _ => {}
            }
            if layer.stride == 0 || layer.kernel == 0 {
                return Err(format!("layer {i}: zero kernel or stride"));
            }
            channels = Some(layer.out_channels);
        }
        Ok(())
    }

    /// Channel count produced by the last layer.
    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    /// Copy of the table truncated just after the layer with the given tap
    /// name.
    pub fn up_to(&self, tap: &str) -> Option<BackboneSpec> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.name.as_deref() == Some(tap))?;
        Some(BackboneSpec {
            layers: self.layers[..=idx].to_vec(),
        })
    }

    /// The 13-layer VGG16 convolution stack with its five pooling stages.
    pub fn vgg16() -> Self {
        use LayerKind::*;
        let mut layers = Vec::new();
        let blocks: [(usize, usize, usize); 5] = [
            (3, 64, 2),
            (64, 128, 2),
            (128, 256, 3),
            (256, 512, 3),
            (512, 512, 3),
        ];
        for (b, (inc, outc, convs)) in blocks.iter().enumerate() {
            for c in 0..*convs {
                let i = if c == 0 { *inc } else { *outc };
                layers.push(LayerSpec::conv(StandardConv, 3, 1, i, *outc));
            }
            layers.push(
                LayerSpec::conv(MaxPool, 2, 2, *outc, *outc).named(&format!("block{}_pool", b + 1)),
            );
        }
        BackboneSpec { layers }
    }

    /// Decoupled backbone: one standard stem convolution followed by 13
    /// depthwise/pointwise pairs (32-64-128-128-256-256-512-512x5-1024-1024
    /// schedule with strides 2 at the stage transitions). Pointwise layers
    /// carry pw1..pw13 tap names.
    pub fn decoupled() -> Self {
        use LayerKind::*;
        let mut layers = vec![LayerSpec::conv(StandardConv, 3, 2, 3, 32).named("stem")];
        // (stride of the depthwise stage, output channels of the pointwise)
        let schedule: [(usize, usize); 13] = [
            (1, 64),
            (2, 128),
            (1, 128),
            (2, 256),
            (1, 256),
            (2, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (2, 1024),
            (1, 1024),
        ];
        let mut channels = 32;
        for (i, (stride, outc)) in schedule.iter().enumerate() {
            layers.push(LayerSpec::conv(DepthwiseConv, 3, *stride, channels, channels));
            layers.push(
                LayerSpec::conv(PointwiseConv, 1, 1, channels, *outc)
                    .named(&format!("pw{}", i + 1)),
            );
            channels = *outc;
        }
        BackboneSpec { layers }
    }
}

/// Kernel tensors for one layer. Standard kernels are indexed
/// `[out][in][ky][kx]`, depthwise `[channel][ky][kx]`, pointwise
/// `[out][in]`. Pooling has no parameters.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Standard(Vec<Vec<Vec<Vec<f64>>>>),
    Depthwise(Vec<Vec<Vec<f64>>>),
    Pointwise(Vec<Vec<f64>>),
    Pool,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub layers: Vec<LayerParams>,
}

impl BackboneParams {
    /// All-zero kernels matching the spec, handy as a template.
    pub fn zeros(spec: &BackboneSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::StandardConv => LayerParams::Standard(vec![
                    vec![
                        vec![vec![0.0; l.kernel]; l.kernel];
                        l.in_channels
                    ];
                    l.out_channels
                ]),
                LayerKind::DepthwiseConv => {
                    LayerParams::Depthwise(vec![vec![vec![0.0; l.kernel]; l.kernel]; l.in_channels])
                }
                LayerKind::PointwiseConv => {
                    LayerParams::Pointwise(vec![vec![0.0; l.in_channels]; l.out_channels])
                }
                LayerKind::MaxPool => LayerParams::Pool,
            })
            .collect();
        BackboneParams { layers }
    }
}

fn out_size(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

fn conv_input(f: &FeatureMap, x: i64, y: i64, c: usize) -> f64 {
    if x < 0 || y < 0 || x >= f.width as i64 || y >= f.height as i64 {
        0.0
    } else {
        f.get(x as usize, y as usize, c)
    }
}

fn standard_conv(f: &FeatureMap, spec: &LayerSpec, w: &[Vec<Vec<Vec<f64>>>]) -> FeatureMap {
    let ow = out_size(f.width, spec.stride);
    let oh = out_size(f.height, spec.stride);
    let pad = (spec.kernel as i64 - 1) / 2;
    let mut out = FeatureMap::zeros(ow, oh, spec.out_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for (o, w_o) in w.iter().enumerate() {
                let mut acc = 0.0;
                for (i, w_oi) in w_o.iter().enumerate() {
                    for (ky, row) in w_oi.iter().enumerate() {
                        for (kx, coeff) in row.iter().enumerate() {
                            let sx = (ox * spec.stride) as i64 + kx as i64 - pad;
                            let sy = (oy * spec.stride) as i64 + ky as i64 - pad;
                            acc += coeff * conv_input(f, sx, sy, i);
                        }
                    }
                }
                out.set(ox, oy, o, acc);
            }
        }
    }
    out
}

fn depthwise_conv(f: &FeatureMap, spec: &LayerSpec, w: &[Vec<Vec<f64>>]) -> FeatureMap {
    let ow = out_size(f.width, spec.stride);
    let oh = out_size(f.height, spec.stride);
    let pad = (spec.kernel as i64 - 1) / 2;
    let mut out = FeatureMap::zeros(ow, oh, spec.out_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for (c, w_c) in w.iter().enumerate() {
                let mut acc = 0.0;
                for (ky, row) in w_c.iter().enumerate() {
                    for (kx, coeff) in row.iter().enumerate() {
                        let sx = (ox * spec.stride) as i64 + kx as i64 - pad;
                        let sy = (oy * spec.stride) as i64 + ky as i64 - pad;
                        acc += coeff * conv_input(f, sx, sy, c);
                    }
                }
                out.set(ox, oy, c, acc);
            }
        }
    }
    out
}

fn pointwise_conv(f: &FeatureMap, spec: &LayerSpec, w: &[Vec<f64>]) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.width, f.height, spec.out_channels);
    for p in 0..f.pixels() {
        let src = f.pixel(p);
        let dst = out.pixel_mut(p);
        for (o, row) in w.iter().enumerate() {
            dst[o] = row.iter().zip(src.iter()).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn max_pool(f: &FeatureMap, spec: &LayerSpec) -> FeatureMap {
    let ow = (f.width - spec.kernel) / spec.stride + 1;
    let oh = (f.height - spec.kernel) / spec.stride + 1;
    let mut out = FeatureMap::zeros(ow, oh, f.channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..f.channels {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        best = best.max(f.get(ox * spec.stride + kx, oy * spec.stride + ky, c));
                    }
                }
                out.set(ox, oy, c, best);
            }
        }
    }
    out
}

/// Run the layer table on a small input.
pub fn backbone_forward(
    image: &FeatureMap,
    spec: &BackboneSpec,
    params: &BackboneParams,
) -> Result<FeatureMap, NetvladError> {
    assert_eq!(spec.layers.len(), params.layers.len());
    let mut current = image.clone();
    for (layer, p) in spec.layers.iter().zip(params.layers.iter()) {
        if current.channels != layer.in_channels {
            return Err(NetvladError::ChannelMismatch {
                expected: layer.in_channels,
                got: current.channels,
            });
        }
        current = match (layer.kind, p) {
            (LayerKind::StandardConv, LayerParams::Standard(w)) => standard_conv(&current, layer, w),
            (LayerKind::DepthwiseConv, LayerParams::Depthwise(w)) => {
                depthwise_conv(&current, layer, w)
            }
            (LayerKind::PointwiseConv, LayerParams::Pointwise(w)) => {
                pointwise_conv(&current, layer, w)
            }
            (LayerKind::MaxPool, LayerParams::Pool) => max_pool(&current, layer),
            _ => panic!("layer parameters do not match layer kind"),
        };
    }
    Ok(current)
}

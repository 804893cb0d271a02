//! On-Off patterns and active-path counting.
//!
//! A path is a sequence of one neuron per layer from an input element to a
//! target neuron. It is active when every ReLU neuron on it is on and every
//! connecting weight is nonzero (FC weights must also exceed the clip
//! threshold). Counts are computed by propagating ones through the network
//! with surviving weights set to one and off neurons set to zero.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Layer, ModelSpec, ModelWeights};
use crate::ops::conv2d_f64;
use crate::tensor::Tensor;

/// Largest integer below which every count is exactly representable in `f64`.
pub const EXACT_LIMIT: f64 = 9_007_199_254_740_992.0;

/// Default enumeration budget for [`pathcount_bruteforce`].
pub const BRUTEFORCE_LIMIT: u64 = 10_000_000;

/// `1` where `x > 0`, else `0`.
pub fn onoff(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Binary on/off indicator for every layer output of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct OnOffPattern {
    pub layers: Vec<Tensor>,
}

pub fn extract_onoff(trace: &ForwardTrace) -> OnOffPattern {
    OnOffPattern {
        layers: trace.outputs.iter().map(onoff).collect(),
    }
}

/// Mean of the binary pattern at `layer`.
pub fn on_ratio(pattern: &OnOffPattern, layer: usize) -> Result<f64> {
    let t = pattern
        .layers
        .get(layer)
        .ok_or_else(|| Error::arg(format!("layer {layer} not in pattern")))?;
    if t.numel() == 0 {
        return Ok(0.0);
    }
    Ok(t.sum() / t.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Threshold is the configured value itself.
    Absolute,
    /// Threshold is the configured value times the layer's mean `|w|`.
    MeanAbs,
}

/// Which FC weights count as path-carrying connections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub mode: ClipMode,
    pub threshold: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl ClipConfig {
    /// Every nonzero weight survives.
    pub fn none() -> Self {
        Self {
            mode: ClipMode::Absolute,
            threshold: 0.0,
        }
    }

    pub fn absolute(threshold: f64) -> Self {
        Self {
            mode: ClipMode::Absolute,
            threshold,
        }
    }

    pub fn mean_abs(scale: f64) -> Self {
        Self {
            mode: ClipMode::MeanAbs,
            threshold: scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::arg(format!("clip threshold {} must be >= 0", self.threshold)));
        }
        Ok(())
    }

    /// Resolved magnitude threshold for a particular weight tensor.
    pub fn resolve(&self, weights: &Tensor) -> f64 {
        match self.mode {
            ClipMode::Absolute => self.threshold,
            ClipMode::MeanAbs => {
                let n = weights.numel().max(1) as f64;
                let mean = weights.data().iter().map(|&w| (w as f64).abs()).sum::<f64>() / n;
                self.threshold * mean
            }
        }
    }
}

/// `1` where `|w|` strictly exceeds the resolved threshold. Never touches the model.
pub fn clip_fc_weights(weights: &Tensor, clip: &ClipConfig) -> Tensor {
    let thr = clip.resolve(weights);
    weights.map(|w| if (w as f64).abs() > thr { 1.0 } else { 0.0 })
}

/// Active-path counts of one layer's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub shape: Vec<usize>,
    pub counts: Vec<f64>,
}

impl LayerCounts {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.counts.iter().map(|&c| c as f32).collect()).expect("shape matches counts")
    }
}

/// Path counts for every layer output, plus whether all of them are exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCountMap {
    pub layers: Vec<LayerCounts>,
    pub exact: bool,
}

impl PathCountMap {
    pub fn layer(&self, l: usize) -> &LayerCounts {
        &self.layers[l]
    }

    /// CSV rows `layer,neuron,count`.
    pub fn write_csv<W: Write>(&self, names: &[String], layers: &[usize], mut out: W) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        writeln!(out, "layer,neuron,count").map_err(io)?;
        for &l in layers {
            for (i, c) in self.layers[l].counts.iter().enumerate() {
                writeln!(out, "{},{},{}", names[l], i, c).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self, names: &[String], layers: &[usize]) -> serde_json::Value {
        serde_json::json!({
            "exact": self.exact,
            "layers": layers.iter().map(|&l| serde_json::json!({
                "name": names[l],
                "index": l,
                "shape": self.layers[l].shape,
                "counts": self.layers[l].counts,
            })).collect::<Vec<_>>(),
        })
    }
}

fn check_trace(spec: &ModelSpec, trace: &ForwardTrace) -> Result<()> {
    if trace.len() != spec.layers.len() {
        return Err(Error::shape(format!(
            "trace has {} layers, spec has {}",
            trace.len(),
            spec.layers.len()
        )));
    }
    Ok(())
}

/// Active-path counts from all input elements to every neuron of every layer.
///
/// Input elements each contribute one path regardless of their value. Conv
/// and FC outputs are not gated by their own sign; gating happens at ReLU
/// layers, which zero the count wherever the activation is zero. Max-pool
/// passes only the count of its routed winner.
pub fn pathcount_forward(
    weights: &ModelWeights,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    clip: &ClipConfig,
) -> Result<PathCountMap> {
    clip.validate()?;
    check_trace(spec, trace)?;
    let mut cur = vec![1.0f64; trace.input.numel()];
    let mut cur_shape = trace.input.shape().to_vec();
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut exact = true;
    for (l, layer) in spec.layers.iter().enumerate() {
        let out_shape = trace.output(l).shape().to_vec();
        let next = match *layer {
            Layer::Conv { stride, padding, .. } => {
                let w = weights.param(l).ok_or_else(|| Error::shape("missing conv weights"))?;
                let mask: Vec<f64> = w.data().iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect();
                conv2d_f64(&cur, &cur_shape, &mask, w.shape(), stride, padding)?.0
            }
            Layer::Fc { .. } => {
                let w = weights.param(l).ok_or_else(|| Error::shape("missing fc weights"))?;
                let mask = clip_fc_weights(w, clip);
                let n = cur.len();
                mask.data()
                    .chunks_exact(n)
                    .map(|row| row.iter().zip(&cur).map(|(&m, &c)| m as f64 * c).sum())
                    .collect()
            }
            Layer::Relu => trace
                .output(l)
                .data()
                .iter()
                .zip(&cur)
                .map(|(&a, &c)| if a > 0.0 { c } else { 0.0 })
                .collect(),
            Layer::MaxPool { .. } => {
                let routing = trace
                    .routing(l)
                    .ok_or_else(|| Error::shape(format!("no pool routing cached for layer {l}")))?;
                routing.indices.iter().map(|&i| cur[i]).collect()
            }
            Layer::Dropout { .. } | Layer::Flatten => cur,
        };
        if next.len() != out_shape.iter().product::<usize>() {
            return Err(Error::shape(format!("layer {l}: count size does not match trace")));
        }
        exact &= next.iter().all(|&c| c <= EXACT_LIMIT);
        layers.push(LayerCounts {
            shape: out_shape.clone(),
            counts: next.clone(),
        });
        cur = next;
        cur_shape = out_shape;
    }
    Ok(PathCountMap { layers, exact })
}

/// Edges into one neuron: predecessor flat indices in the previous layer's output.
struct PathGraph<'a> {
    spec: &'a ModelSpec,
    weights: &'a ModelWeights,
    trace: &'a ForwardTrace,
    thresholds: Vec<f64>,
}

impl PathGraph<'_> {
    fn in_shape(&self, l: usize) -> &[usize] {
        self.trace.layer_input(l).shape()
    }

    /// Calls `visit(k)` for each predecessor `k` of neuron `j` at layer `l` over an active edge.
    fn predecessors(&self, l: usize, j: usize, visit: &mut dyn FnMut(usize)) {
        match self.spec.layers[l] {
            Layer::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = self.weights.param(l).expect("conv weights");
                let &[c_in, h, wd] = self.in_shape(l) else {
                    unreachable!()
                };
                let out = self.trace.output(l).shape();
                let (oh, ow) = (out[1], out[2]);
                let co = j / (oh * ow);
                let (oy, ox) = ((j / ow) % oh, j % ow);
                for ci in 0..c_in {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            if w.at(&[co, ci, ky, kx]) != 0.0 {
                                visit((ci * h + iy as usize) * wd + ix as usize);
                            }
                        }
                    }
                }
            }
            Layer::Fc { .. } => {
                let w = self.weights.param(l).expect("fc weights");
                let n = w.shape()[1];
                for k in 0..n {
                    if (w.data()[j * n + k] as f64).abs() > self.thresholds[l] {
                        visit(k);
                    }
                }
            }
            Layer::Relu => {
                if self.trace.output(l).data()[j] > 0.0 {
                    visit(j);
                }
            }
            Layer::MaxPool { .. } => visit(self.trace.routing(l).expect("routing").indices[j]),
            Layer::Dropout { .. } | Layer::Flatten => visit(j),
        }
    }

    /// Walks every path backwards from `(l, j)` and counts those reaching the input.
    fn enumerate(&self, l: usize, j: usize, found: &mut u64) {
        let mut visit = |k: usize| {
            if l == 0 {
                *found += 1;
            } else {
                self.enumerate(l - 1, k, found);
            }
        };
        self.predecessors(l, j, &mut visit);
    }
}

/// Upper bound on the number of paths reaching any neuron of `layer`: product of fan-ins.
fn path_bound(spec: &ModelSpec, trace: &ForwardTrace, layer: usize) -> f64 {
    (0..=layer)
        .map(|l| match spec.layers[l] {
            Layer::Conv { kernel, .. } => (trace.layer_input(l).shape()[0] * kernel * kernel) as f64,
            Layer::Fc { .. } => trace.layer_input(l).numel() as f64,
            _ => 1.0,
        })
        .product()
}

/// Exact active-path count to one neuron by explicit depth-first enumeration.
///
/// Work is proportional to the number of paths, so the network must be tiny;
/// when the fan-in product exceeds `limit` a size error is returned instead.
pub fn pathcount_bruteforce(
    weights: &ModelWeights,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    clip: &ClipConfig,
    target: (usize, usize),
    limit: u64,
) -> Result<u64> {
    clip.validate()?;
    check_trace(spec, trace)?;
    let (layer, neuron) = target;
    if layer >= spec.layers.len() || neuron >= trace.output(layer).numel() {
        return Err(Error::arg(format!("target {target:?} outside the network")));
    }
    let bound = path_bound(spec, trace, layer);
    if bound >= limit as f64 {
        return Err(Error::Size(format!(
            "up to {bound:.3e} paths to enumerate, limit is {limit}"
        )));
    }
    let thresholds = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match layer {
            Layer::Fc { .. } => clip.resolve(weights.param(l).expect("fc weights")),
            _ => 0.0,
        })
        .collect();
    let graph = PathGraph {
        spec,
        weights,
        trace,
        thresholds,
    };
    let mut found = 0;
    graph.enumerate(layer, neuron, &mut found);
    Ok(found)
}

//! Replacing one layer's activation with a scaled On-Off pattern or a scaled
//! path count, then finishing inference without any retraining.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, forward_from, model_hash, Layer, ModelSpec, ModelWeights};
use crate::pathcount::{onoff, pathcount_forward, ClipConfig, PathCountMap};
use crate::report::Csv;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementKind {
    Identity,
    ScaledOnoff,
    ScaledPathcount,
    SignedScaledPathcount,
}

impl ReplacementKind {
    pub const ALL: [ReplacementKind; 4] = [
        ReplacementKind::Identity,
        ReplacementKind::ScaledOnoff,
        ReplacementKind::ScaledPathcount,
        ReplacementKind::SignedScaledPathcount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReplacementKind::Identity => "identity",
            ReplacementKind::ScaledOnoff => "scaled_onoff",
            ReplacementKind::ScaledPathcount => "scaled_pathcount",
            ReplacementKind::SignedScaledPathcount => "signed_scaled_pathcount",
        }
    }

    fn needs_counts(self) -> bool {
        matches!(
            self,
            ReplacementKind::ScaledPathcount | ReplacementKind::SignedScaledPathcount
        )
    }

    /// Whether this kind may replace layer `layer` of `spec`.
    pub fn accepts(self, spec: &ModelSpec, layer: usize) -> bool {
        match (self, spec.layers.get(layer)) {
            (_, None) => false,
            (ReplacementKind::Identity, _) => true,
            (ReplacementKind::SignedScaledPathcount, Some(Layer::Conv { .. })) => true,
            (_, Some(l)) => matches!(l, Layer::Relu),
        }
    }
}

impl fmt::Display for ReplacementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplacementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .or(match key.as_str() {
                "onoff" => Some(ReplacementKind::ScaledOnoff),
                "pathcount" | "pc" => Some(ReplacementKind::ScaledPathcount),
                "signed" | "signed_pathcount" => Some(ReplacementKind::SignedScaledPathcount),
                _ => None,
            })
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown replacement kind '{s}'; expected one of identity, scaled_onoff, scaled_pathcount, signed_scaled_pathcount"
                ))
            })
    }
}

fn scaled(values: &[f64], mass: f64, shape: &[usize]) -> Tensor {
    let total: f64 = values.iter().sum();
    let data = if total > 0.0 {
        let factor = mass / total;
        values.iter().map(|&v| (v * factor) as f32).collect()
    } else {
        vec![0.0; values.len()]
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `o · (mu_a / mu_o)`, where `mu_a` is the activation sum and `mu_o` the
/// number of on entries among the nonzero activations.
pub fn scaled_onoff(activation: &Tensor, pattern: &Tensor) -> Result<Tensor> {
    if activation.shape() != pattern.shape() {
        return Err(Error::shape("activation and pattern shapes differ"));
    }
    let mass = activation.sum();
    let gated: Vec<f64> = activation
        .data()
        .iter()
        .zip(pattern.data())
        .map(|(&a, &o)| if a != 0.0 { o as f64 } else { 0.0 })
        .collect();
    Ok(scaled(&gated, mass, activation.shape()))
}

/// `pc · (mu_a / mu_pc)` with `mu_pc` the total count; all zeros if that total is zero.
pub fn scaled_pathcount(activation: &Tensor, counts: &[f64]) -> Result<Tensor> {
    if activation.numel() != counts.len() {
        return Err(Error::shape("activation and count sizes differ"));
    }
    Ok(scaled(counts, activation.sum(), activation.shape()))
}

/// `sign(pre) · scaled_pathcount(|pre|, counts)`.
pub fn signed_scaled_pathcount(pre_activation: &Tensor, counts: &[f64]) -> Result<Tensor> {
    if counts.iter().any(|&c| c < 0.0) {
        return Err(Error::arg("path counts must be nonnegative"));
    }
    let magnitude = scaled_pathcount(&pre_activation.map(f32::abs), counts)?;
    let data = pre_activation
        .data()
        .iter()
        .zip(magnitude.data())
        .map(|(&p, &m)| {
            if p > 0.0 {
                m
            } else if p < 0.0 {
                -m
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(pre_activation.shape().to_vec(), data)
}

/// Replacement value for `layer` given its original output and counts.
pub fn replaced_value(
    kind: ReplacementKind,
    value: &Tensor,
    counts: Option<&PathCountMap>,
    layer: usize,
) -> Result<Tensor> {
    let counts_of = || {
        counts
            .map(|c| c.layer(layer).counts.as_slice())
            .ok_or_else(|| Error::arg("path counts required"))
    };
    match kind {
        ReplacementKind::Identity => Ok(value.clone()),
        ReplacementKind::ScaledOnoff => scaled_onoff(value, &onoff(value)),
        ReplacementKind::ScaledPathcount => scaled_pathcount(value, counts_of()?),
        ReplacementKind::SignedScaledPathcount => signed_scaled_pathcount(value, counts_of()?),
    }
}

fn check_kind(spec: &ModelSpec, layer: usize, kind: ReplacementKind) -> Result<()> {
    if !kind.accepts(spec, layer) {
        let name = spec
            .layer_names()
            .get(layer)
            .cloned()
            .unwrap_or_else(|| layer.to_string());
        return Err(Error::arg(format!("{kind} cannot replace layer {name}")));
    }
    Ok(())
}

/// Logits after substituting layer `layer`'s output according to `kind`.
pub fn replace_and_infer(
    weights: &ModelWeights,
    spec: &ModelSpec,
    input: &Tensor,
    layer: usize,
    kind: ReplacementKind,
    clip: &ClipConfig,
) -> Result<Tensor> {
    check_kind(spec, layer, kind)?;
    let trace = forward(weights, spec, input)?;
    let counts = if kind.needs_counts() {
        Some(pathcount_forward(weights, spec, &trace, clip)?)
    } else {
        None
    };
    let value = replaced_value(kind, trace.output(layer), counts.as_ref(), layer)?;
    let outs = forward_from(weights, spec, layer, value)?;
    Ok(outs.last().expect("nonempty tail").clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_name: String,
    pub layer: usize,
    pub kind: ReplacementKind,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub mean_on_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub model_hash: String,
    pub dataset: String,
    pub kinds: Vec<ReplacementKind>,
    pub clip: ClipConfig,
    pub sample_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: SweepMeta,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::with_header(&["layer_name", "kind", "accuracy", "baseline_accuracy", "mean_on_ratio"]);
        for r in &self.rows {
            csv.row([
                r.layer_name.clone(),
                r.kind.to_string(),
                r.accuracy.to_string(),
                r.baseline_accuracy.to_string(),
                r.mean_on_ratio.to_string(),
            ]);
        }
        csv
    }

    pub fn row(&self, layer_name: &str, kind: ReplacementKind) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.layer_name == layer_name && r.kind == kind)
    }
}

struct SampleOutcome {
    baseline: bool,
    replaced: Vec<bool>,
    on_ratios: Vec<f64>,
}

/// Accuracy for every (layer, kind) pair over `dataset`, plus the mean On
/// ratio of each layer. `layers` defaults to every ReLU layer.
pub fn sweep(
    weights: &ModelWeights,
    spec: &ModelSpec,
    dataset: &Dataset,
    layers: Option<&[usize]>,
    kinds: &[ReplacementKind],
    clip: &ClipConfig,
) -> Result<SweepReport> {
    if dataset.is_empty() {
        return Err(Error::arg("sweep needs a nonempty dataset"));
    }
    if kinds.is_empty() {
        return Err(Error::arg("no replacement kinds requested"));
    }
    let layers = layers.map_or_else(|| spec.relu_layers(), <[usize]>::to_vec);
    for &l in &layers {
        for &k in kinds {
            check_kind(spec, l, k)?;
        }
    }
    let need_counts = kinds.iter().any(|k| k.needs_counts());
    let outcomes: Vec<SampleOutcome> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (image, label) = dataset.get(i);
            let trace = forward(weights, spec, image)?;
            let counts = if need_counts {
                Some(pathcount_forward(weights, spec, &trace, clip)?)
            } else {
                None
            };
            let mut replaced = Vec::with_capacity(layers.len() * kinds.len());
            let mut on_ratios = Vec::with_capacity(layers.len());
            for &l in &layers {
                let out = trace.output(l);
                let on = out.data().iter().filter(|&&v| v > 0.0).count();
                on_ratios.push(on as f64 / out.numel() as f64);
                for &k in kinds {
                    let value = replaced_value(k, out, counts.as_ref(), l)?;
                    let tail = forward_from(weights, spec, l, value)?;
                    replaced.push(tail.last().expect("logits").argmax() == label);
                }
            }
            Ok(SampleOutcome {
                baseline: trace.logits().argmax() == label,
                replaced,
                on_ratios,
            })
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let baseline = outcomes.iter().filter(|o| o.baseline).count() as f64 / n;
    let names = spec.layer_names();
    let mut rows = Vec::with_capacity(layers.len() * kinds.len());
    for (li, &l) in layers.iter().enumerate() {
        let mean_on_ratio = outcomes.iter().map(|o| o.on_ratios[li]).sum::<f64>() / n;
        for (ki, &k) in kinds.iter().enumerate() {
            let idx = li * kinds.len() + ki;
            let correct = outcomes.iter().filter(|o| o.replaced[idx]).count();
            rows.push(SweepRow {
                layer_name: names[l].clone(),
                layer: l,
                kind: k,
                accuracy: correct as f64 / n,
                baseline_accuracy: baseline,
                mean_on_ratio,
            });
        }
    }
    Ok(SweepReport {
        meta: SweepMeta {
            model_hash: model_hash(weights, spec)?,
            dataset: format!("{} images", dataset.len()),
            kinds: kinds.to_vec(),
            clip: *clip,
            sample_size: dataset.len(),
        },
        rows,
    })
}

//! Kendall's tau-b between layer representations and path counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, Layer, ModelSpec, ModelWeights};
use crate::pathcount::{pathcount_forward, ClipConfig};
use crate::report::Csv;

/// Number of unordered pairs among `n` items.
fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Sum of `pairs(run)` over runs of equal adjacent elements.
fn tied_pairs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += pairs(run);
            run = 1;
        }
    }
    total + pairs(run)
}

/// Sorts `v` by `y` with a merge sort, returning the number of inversions.
fn merge_count(v: &mut [(f64, f64)], buf: &mut Vec<(f64, f64)>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].1 < v[i].1 {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Tie-corrected Kendall rank correlation in `O(n log n)`.
///
/// `tau_b = (C - D) / sqrt((n0 - n1) (n0 - n2))` where `n1`/`n2` are the
/// pairs tied in `x`/`y`. Undefined (an error) when either side is all ties.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::arg("need at least two observations"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::arg("NaN in correlation input"));
    }
    let mut v: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // -0.0 and 0.0 compare equal as values.
    let n0 = pairs(v.len() as u64);
    let n1 = tied_pairs(&v, |a, b| a.0 == b.0);
    let n3 = tied_pairs(&v, |a, b| a.0 == b.0 && a.1 == b.1);
    let mut buf = Vec::with_capacity(v.len());
    let swaps = merge_count(&mut v, &mut buf);
    let n2 = tied_pairs(&v, |a, b| a.1 == b.1);
    if n1 == n0 || n2 == n0 {
        return Err(Error::UndefinedCorrelation("one of the inputs is constant".into()));
    }
    let numer = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub layer: String,
    pub tau_raw_mean: f64,
    pub tau_raw_std: f64,
    pub tau_abs_mean: f64,
    pub tau_abs_std: f64,
    pub images: usize,
    pub skipped_images: usize,
}

/// Per-layer tau statistics; one row per conv output, ReLU output and FC output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub rows: Vec<TauRow>,
}

impl TauReport {
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::with_header(&[
            "layer",
            "tau_raw_mean",
            "tau_raw_std",
            "tau_abs_mean",
            "tau_abs_std",
            "skipped_images",
        ]);
        for r in &self.rows {
            csv.row([
                r.layer.clone(),
                r.tau_raw_mean.to_string(),
                r.tau_raw_std.to_string(),
                r.tau_abs_mean.to_string(),
                r.tau_abs_std.to_string(),
                r.skipped_images.to_string(),
            ]);
        }
        csv
    }

    pub fn row(&self, layer: &str) -> Option<&TauRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Layers compared against path counts: conv outputs, ReLU outputs and FC outputs.
pub fn correlated_layers(spec: &ModelSpec) -> Vec<usize> {
    spec.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv { .. } | Layer::Relu | Layer::Fc { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// Per-image `(raw, abs)` tau for each layer; `None` where tau is undefined.
pub type ImageTaus = Vec<Option<(f64, f64)>>;

pub fn image_taus(
    weights: &ModelWeights,
    spec: &ModelSpec,
    image: &crate::tensor::Tensor,
    layers: &[usize],
    clip: &ClipConfig,
) -> Result<ImageTaus> {
    let trace = forward(weights, spec, image)?;
    let pc = pathcount_forward(weights, spec, &trace, clip)?;
    layers
        .iter()
        .map(|&l| {
            let rep: Vec<f64> = trace.output(l).data().iter().map(|&v| v as f64).collect();
            let abs: Vec<f64> = rep.iter().map(|v| v.abs()).collect();
            let counts = &pc.layer(l).counts;
            match (kendall_tau_b(&rep, counts), kendall_tau_b(&abs, counts)) {
                (Ok(r), Ok(a)) => Ok(Some((r, a))),
                (Err(Error::UndefinedCorrelation(_)), _) | (_, Err(Error::UndefinedCorrelation(_))) => Ok(None),
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        })
        .collect()
}

/// Reduces per-image taus (image-major) into per-layer mean and std.
pub fn reduce_taus(names: &[String], per_image: &[ImageTaus]) -> TauReport {
    let rows = names
        .iter()
        .enumerate()
        .map(|(li, name)| {
            let vals: Vec<(f64, f64)> = per_image.iter().filter_map(|t| t[li]).collect();
            let raw: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let abs: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let (rm, rs) = mean_std(&raw);
            let (am, as_) = mean_std(&abs);
            TauRow {
                layer: name.clone(),
                tau_raw_mean: rm,
                tau_raw_std: rs,
                tau_abs_mean: am,
                tau_abs_std: as_,
                images: vals.len(),
                skipped_images: per_image.len() - vals.len(),
            }
        })
        .collect();
    TauReport { rows }
}

/// One tau per image between each layer's flattened representation and its
/// path counts (raw and absolute values), then mean and std across images.
pub fn layerwise_tau(
    weights: &ModelWeights,
    spec: &ModelSpec,
    sample: &Dataset,
    clip: &ClipConfig,
) -> Result<TauReport> {
    if sample.is_empty() {
        return Err(Error::arg("correlation sample is empty"));
    }
    let layers = correlated_layers(spec);
    let names: Vec<String> = {
        let all = spec.layer_names();
        layers.iter().map(|&l| all[l].clone()).collect()
    };
    let per_image: Vec<ImageTaus> = sample
        .images()
        .par_iter()
        .map(|im| image_taus(weights, spec, im, &layers, clip))
        .collect::<Result<_>>()?;
    Ok(reduce_taus(&names, &per_image))
}

/// Mean and std of per-model means, for reports from models trained with different seeds.
pub fn aggregate_models(reports: &[TauReport]) -> Result<TauReport> {
    let first = reports.first().ok_or_else(|| Error::arg("no reports to aggregate"))?;
    let rows = first
        .rows
        .iter()
        .map(|r0| {
            let rows: Vec<&TauRow> = reports
                .iter()
                .map(|rep| {
                    rep.row(&r0.layer)
                        .ok_or_else(|| Error::arg(format!("layer {} missing", r0.layer)))
                })
                .collect::<Result<_>>()?;
            let raw: Vec<f64> = rows.iter().map(|r| r.tau_raw_mean).filter(|v| !v.is_nan()).collect();
            let abs: Vec<f64> = rows.iter().map(|r| r.tau_abs_mean).filter(|v| !v.is_nan()).collect();
            let (rm, rs) = mean_std(&raw);
            let (am, as_) = mean_std(&abs);
            Ok(TauRow {
                layer: r0.layer.clone(),
                tau_raw_mean: rm,
                tau_raw_std: rs,
                tau_abs_mean: am,
                tau_abs_std: as_,
                images: rows.iter().map(|r| r.images).sum(),
                skipped_images: rows.iter().map(|r| r.skipped_images).sum(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TauReport { rows })
}

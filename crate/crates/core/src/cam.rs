//! Grad-CAM with activation, On-Off and path-count feature terms, and the
//! two saliency metrics: MoRF/LeRF degradation and tiled target matching.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, output_gradient, ModelSpec, ModelWeights};
use crate::pathcount::{onoff, pathcount_forward, ClipConfig};
use crate::report::Csv;
use crate::tensor::Tensor;

/// Feature term multiplied by the channel weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamVariant {
    /// The activation itself (plain Grad-CAM).
    Act,
    /// The binary On-Off pattern of the activation.
    Onoff,
    /// The active-path count of each neuron.
    Pathcount,
}

impl CamVariant {
    pub fn name(self) -> &'static str {
        match self {
            CamVariant::Act => "act",
            CamVariant::Onoff => "onoff",
            CamVariant::Pathcount => "pathcount",
        }
    }
}

/// Where a saliency map comes from: a CAM variant or a control baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    Cam(CamVariant),
    /// Constant map; every ranking and tile comparison is a tie.
    Uniform,
    /// Independent uniform noise per image, seeded.
    Random {
        seed: u64,
    },
}

impl fmt::Display for SaliencySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SaliencySource::Cam(v) => f.write_str(v.name()),
            SaliencySource::Uniform => f.write_str("uniform"),
            SaliencySource::Random { .. } => f.write_str("random"),
        }
    }
}

impl FromStr for SaliencySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "act" | "act-cam" | "gradcam" => SaliencySource::Cam(CamVariant::Act),
            "onoff" | "onoff-cam" => SaliencySource::Cam(CamVariant::Onoff),
            "pathcount" | "pc" | "pc-cam" => SaliencySource::Cam(CamVariant::Pathcount),
            "uniform" => SaliencySource::Uniform,
            "random" => SaliencySource::Random { seed: 0 },
            other => {
                return Err(Error::arg(format!(
                    "unknown variant '{other}'; expected act, onoff, pathcount, uniform or random"
                )))
            }
        })
    }
}

/// Per-pixel importance on the input grid, max-normalized into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub map: Tensor,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    /// Binary 8-bit PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(
            self.map
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let w = self.width();
        for row in self.map.data().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).map_err(|e| Error::io("<csv>", e))?;
        }
        Ok(())
    }
}

/// Divides by the maximum; an all-zero map stays all-zero.
pub fn normalize_max(map: &Tensor) -> Tensor {
    let max = map.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        map.map(|v| (v / max).clamp(0.0, 1.0))
    } else {
        map.map(|v| v.max(0.0))
    }
}

/// Bilinear resize of a `[h, w]` map with half-pixel centers and edge clamping.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape(format!("expected a [H,W] map, got {:?}", map.shape())));
    };
    if h == out_h && w == out_w {
        return Ok(map.clone());
    }
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, w, out_w);
            let top = d[y0 * w + x0] as f64 * (1.0 - fx) + d[y0 * w + x1] as f64 * fx;
            let bot = d[y1 * w + x0] as f64 * (1.0 - fx) + d[y1 * w + x1] as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Tensor::new([out_h, out_w], out)
}

/// The layer whose output feeds the CAM: the ReLU right after the last conv.
pub fn cam_layer(spec: &ModelSpec) -> Result<usize> {
    spec.last_conv_relu()
        .ok_or_else(|| Error::arg("CAM needs a convolution followed by a ReLU"))
}

/// `relu(sum_k alpha_k F^k)` on the feature grid, with `alpha_k` the spatial mean of `grad[k]`.
pub fn combine_channels(grad: &Tensor, features: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = features.shape() else {
        return Err(Error::shape(format!(
            "CAM features must be [C,H,W], got {:?}",
            features.shape()
        )));
    };
    if grad.shape() != features.shape() {
        return Err(Error::shape("gradient and feature shapes differ"));
    }
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for k in 0..c {
        let g = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let f = &features.data()[k * plane..(k + 1) * plane];
        for (a, &v) in acc.iter_mut().zip(f) {
            *a += alpha * v as f64;
        }
    }
    Tensor::new([h, w], acc.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Gradient of logit `target` with respect to the CAM layer's activation.
pub fn cam_gradient(
    weights: &ModelWeights,
    spec: &ModelSpec,
    input: &Tensor,
    target: usize,
) -> Result<(Tensor, Tensor)> {
    if target >= spec.num_classes {
        return Err(Error::arg(format!(
            "target class {target} out of range for {} classes",
            spec.num_classes
        )));
    }
    let layer = cam_layer(spec)?;
    let trace = forward(weights, spec, input)?;
    let mut onehot = Tensor::zeros([spec.num_classes]);
    onehot.data_mut()[target] = 1.0;
    let grad = output_gradient(weights, spec, &trace, layer, &onehot)?;
    Ok((trace.output(layer).clone(), grad))
}

/// Grad-CAM at the last conv ReLU with the chosen feature term, upsampled to the
/// input grid and max-normalized.
pub fn grad_cam(
    weights: &ModelWeights,
    spec: &ModelSpec,
    input: &Tensor,
    target: usize,
    variant: CamVariant,
    clip: &ClipConfig,
) -> Result<SaliencyMap> {
    if target >= spec.num_classes {
        return Err(Error::arg(format!(
            "target class {target} out of range for {} classes",
            spec.num_classes
        )));
    }
    let layer = cam_layer(spec)?;
    let trace = forward(weights, spec, input)?;
    let mut onehot = Tensor::zeros([spec.num_classes]);
    onehot.data_mut()[target] = 1.0;
    let grad = output_gradient(weights, spec, &trace, layer, &onehot)?;
    let activation = trace.output(layer);
    let features = match variant {
        CamVariant::Act => activation.clone(),
        CamVariant::Onoff => onoff(activation),
        CamVariant::Pathcount => pathcount_forward(weights, spec, &trace, clip)?.layer(layer).to_tensor(),
    };
    let coarse = combine_channels(&grad, &features)?;
    let (h, w) = (spec.input_shape[1], spec.input_shape[2]);
    Ok(SaliencyMap {
        map: normalize_max(&upsample_bilinear(&coarse, h, w)?),
    })
}

fn random_map(h: usize, w: usize, seed: u64) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SaliencyMap {
        map: Tensor::new([h, w], (0..h * w).map(|_| rng.gen::<f32>()).collect()).expect("shape"),
    }
}

/// Saliency for `input` and `target` from any source. `key` decorrelates random maps.
pub fn saliency(
    weights: &ModelWeights,
    spec: &ModelSpec,
    input: &Tensor,
    target: usize,
    source: SaliencySource,
    clip: &ClipConfig,
    key: u64,
) -> Result<SaliencyMap> {
    let (h, w) = (spec.input_shape[1], spec.input_shape[2]);
    match source {
        SaliencySource::Cam(v) => grad_cam(weights, spec, input, target, v, clip),
        SaliencySource::Uniform => Ok(SaliencyMap {
            map: Tensor::full([h, w], 1.0),
        }),
        SaliencySource::Random { seed } => Ok(random_map(h, w, seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbOrder {
    /// Most relevant first.
    MoRF,
    /// Least relevant first.
    LeRF,
}

/// Replaces `round(fraction * H * W)` pixels (all channels) with `fill`,
/// ranked by saliency; ties go to the lower flat index in both orders.
pub fn perturb(
    input: &Tensor,
    saliency: &SaliencyMap,
    fraction: f64,
    order: PerturbOrder,
    fill: f32,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::arg(format!("fraction {fraction} outside [0, 1]")));
    }
    let &[c, h, w] = input.shape() else {
        return Err(Error::shape("perturb expects a [C,H,W] input"));
    };
    if saliency.map.shape() != [h, w] {
        return Err(Error::shape("saliency grid does not match the input"));
    }
    let s = saliency.map.data();
    let mut idx: Vec<usize> = (0..h * w).collect();
    match order {
        PerturbOrder::MoRF => idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b))),
        PerturbOrder::LeRF => idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b))),
    }
    let k = (fraction * (h * w) as f64).round() as usize;
    let mut out = input.clone();
    let data = out.data_mut();
    for &p in &idx[..k.min(h * w)] {
        for ch in 0..c {
            data[ch * h * w + p] = fill;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub source: String,
    pub fractions: Vec<f64>,
    pub morf: Vec<f64>,
    pub lerf: Vec<f64>,
    /// Trapezoidal area of `lerf - morf` over the fraction axis.
    pub area: f64,
    pub images: usize,
}

impl DegradationReport {
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::with_header(&["fraction", "morf_accuracy", "lerf_accuracy"]);
        for ((f, m), l) in self.fractions.iter().zip(&self.morf).zip(&self.lerf) {
            csv.row([f, m, l]);
        }
        csv
    }
}

/// Trapezoidal integral of `y` over `x`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// Accuracy trajectories while pixels are removed most- or least-relevant
/// first, at fractions `0, 1/steps, ..., 1`. Saliency targets the image label.
pub fn degradation_score(
    weights: &ModelWeights,
    spec: &ModelSpec,
    dataset: &Dataset,
    source: SaliencySource,
    steps: usize,
    clip: &ClipConfig,
    fill: f32,
) -> Result<DegradationReport> {
    if steps < 2 {
        return Err(Error::arg("degradation needs at least 2 steps"));
    }
    if dataset.is_empty() {
        return Err(Error::arg("degradation needs a nonempty dataset"));
    }
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let hits: Vec<(Vec<bool>, Vec<bool>)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (image, label) = dataset.get(i);
            let sal = saliency(weights, spec, image, label, source, clip, i as u64)?;
            let run = |order| -> Result<Vec<bool>> {
                fractions
                    .iter()
                    .map(|&f| {
                        let x = perturb(image, &sal, f, order, fill)?;
                        Ok(forward(weights, spec, &x)?.logits().argmax() == label)
                    })
                    .collect()
            };
            Ok((run(PerturbOrder::MoRF)?, run(PerturbOrder::LeRF)?))
        })
        .collect::<Result<_>>()?;
    let n = hits.len() as f64;
    let curve = |morf: bool| -> Vec<f64> {
        (0..fractions.len())
            .map(|s| hits.iter().filter(|h| if morf { h.0[s] } else { h.1[s] }).count() as f64 / n)
            .collect()
    };
    let morf = curve(true);
    let lerf = curve(false);
    let diff: Vec<f64> = lerf.iter().zip(&morf).map(|(l, m)| l - m).collect();
    Ok(DegradationReport {
        source: source.to_string(),
        area: trapezoid(&fractions, &diff),
        fractions,
        morf,
        lerf,
        images: dataset.len(),
    })
}

/// A 2x2 composite of four downscaled images. Tile `t` sits at grid row
/// `t / 2`, column `t % 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledSample {
    pub image: Tensor,
    pub labels: [usize; 4],
    pub tile_h: usize,
    pub tile_w: usize,
}

impl TiledSample {
    /// Row and column ranges of tile `t`.
    pub fn tile_bounds(&self, t: usize) -> ((usize, usize), (usize, usize)) {
        let (r, c) = (t / 2, t % 2);
        (
            (r * self.tile_h, (r + 1) * self.tile_h),
            (c * self.tile_w, (c + 1) * self.tile_w),
        )
    }
}

/// Block-average downscale of a `[C,H,W]` image by an integer factor.
pub fn downscale(image: &Tensor, factor: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("downscale expects [C,H,W]"));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::arg(format!("cannot downscale {h}x{w} by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += image.at(&[ch, y * factor + dy, x * factor + dx]) as f64;
                    }
                }
                out.push((s / norm) as f32);
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Builds `count` composites, each from four images of distinct classes
/// downscaled by `factor`; deterministic in `seed`.
pub fn make_tiled(dataset: &Dataset, count: usize, seed: u64, factor: usize) -> Result<Vec<TiledSample>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 4 {
        return Err(Error::arg(format!(
            "tiling needs four distinct classes, dataset has {}",
            present.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let classes: Vec<usize> = present.choose_multiple(&mut rng, 4).copied().collect();
            let picks: Vec<usize> = classes
                .iter()
                .map(|&c| *by_class[c].choose(&mut rng).expect("nonempty class"))
                .collect();
            let tiles: Vec<Tensor> = picks
                .iter()
                .map(|&i| downscale(&dataset.images()[i], factor))
                .collect::<Result<_>>()?;
            let &[ch, th, tw] = tiles[0].shape() else {
                unreachable!()
            };
            let (h, w) = (2 * th, 2 * tw);
            let mut img = vec![0.0f32; ch * h * w];
            for (t, tile) in tiles.iter().enumerate() {
                let (r0, c0) = ((t / 2) * th, (t % 2) * tw);
                for c in 0..ch {
                    for y in 0..th {
                        for x in 0..tw {
                            img[(c * h + r0 + y) * w + c0 + x] = tile.at(&[c, y, x]);
                        }
                    }
                }
            }
            Ok(TiledSample {
                image: Tensor::new([ch, h, w], img)?,
                labels: [classes[0], classes[1], classes[2], classes[3]],
                tile_h: th,
                tile_w: tw,
            })
        })
        .collect()
}

/// Tile with the strictly largest mean saliency; `None` on a tie.
pub fn infer_tile(sample: &TiledSample, saliency: &SaliencyMap) -> Option<usize> {
    let w = saliency.width();
    let means: Vec<f64> = (0..4)
        .map(|t| {
            let ((r0, r1), (c0, c1)) = sample.tile_bounds(t);
            let mut s = 0.0f64;
            for y in r0..r1 {
                for x in c0..c1 {
                    s += saliency.map.data()[y * w + x] as f64;
                }
            }
            s / ((r1 - r0) * (c1 - c0)) as f64
        })
        .collect();
    let best = (0..4).fold(0, |b, t| if means[t] > means[b] { t } else { b });
    let tied = (0..4).any(|t| t != best && means[t] == means[best]);
    (!tied).then_some(best)
}

/// How the CAM target is chosen for each tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Target the tile's own label.
    True,
    /// Target the label of a tile picked by a seeded random permutation of the four tiles.
    Shuffled { seed: u64 },
}

/// Fraction of (sample, tile) cases where the tile with the highest mean
/// saliency for that tile's label is the tile itself. Ties count as wrong.
pub fn target_matching_accuracy(
    weights: &ModelWeights,
    spec: &ModelSpec,
    tiled: &[TiledSample],
    source: SaliencySource,
    targets: TargetMode,
    clip: &ClipConfig,
) -> Result<f64> {
    if tiled.is_empty() {
        return Err(Error::arg("no tiled samples"));
    }
    let correct: Vec<usize> = tiled
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            s.image.expect_shape(&spec.input_shape, "tiled composite")?;
            let perm: [usize; 4] = match targets {
                TargetMode::True => [0, 1, 2, 3],
                TargetMode::Shuffled { seed } => {
                    let mut p = [0, 1, 2, 3];
                    p.shuffle(&mut ChaCha8Rng::seed_from_u64(
                        seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
                    ));
                    p
                }
            };
            let mut hits = 0;
            for (t, &p) in perm.iter().enumerate() {
                let target = s.labels[p];
                let key = (i * 4 + t) as u64;
                let sal = saliency(weights, spec, &s.image, target, source, clip, key)?;
                if infer_tile(s, &sal) == Some(t) {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / (4 * tiled.len()) as f64)
}

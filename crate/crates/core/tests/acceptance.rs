//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Needs the MNIST IDX files in `data/mnist` (or `NPSC_MNIST_DIR`).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use npsc::cam::{
    cam_gradient, degradation_score, make_tiled, target_matching_accuracy, CamVariant, SaliencySource, TargetMode,
};
use npsc::correlation::kendall_tau_b;
use npsc::dataio::{load_idx, subsample, Dataset};
use npsc::model::{
    backward, build_model, evaluate_accuracy, forward, load_model, model_from_bytes, model_to_bytes, output_gradient,
    save_model, train_sgd, Layer, ModelSpec, ModelWeights, TrainConfig,
};
use npsc::ops::softmax_cross_entropy;
use npsc::pathcount::{onoff, pathcount_bruteforce, pathcount_forward, ClipConfig, BRUTEFORCE_LIMIT};
use npsc::replacement::{replace_and_infer, scaled_onoff, scaled_pathcount, sweep, ReplacementKind};
use npsc::{Error, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, o: &Outcome) -> bool {
    println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

// ---------------------------------------------------------------------------
// 1. path counts vs explicit enumeration

fn random_path_net(rng: &mut ChaCha8Rng) -> (ModelSpec, ModelWeights, Tensor) {
    let h = if rng.gen_bool(0.3) { 2 } else { 1 };
    let w = rng.gen_range(2..=6);
    let mut shape = vec![1usize, h, w];
    let mut layers = Vec::new();
    let depth = rng.gen_range(2..=4);
    for i in 0..depth {
        let last = i + 1 == depth;
        let spatial = shape.len() == 3;
        if !last && spatial && rng.gen_bool(0.6) {
            let max_c = 12 / (shape[1] * shape[2]);
            let c = rng.gen_range(1..=max_c.clamp(1, 3));
            layers.push(Layer::conv3(c));
            layers.push(Layer::Relu);
            shape = vec![c, shape[1], shape[2]];
            if shape[1] == 2 && shape[2] % 2 == 0 && rng.gen_bool(0.5) {
                layers.push(Layer::MaxPool { window: 2, stride: 2 });
                shape = vec![c, 1, shape[2] / 2];
            }
        } else {
            if spatial {
                layers.push(Layer::Flatten);
            }
            let units = if last {
                rng.gen_range(2..=4)
            } else {
                rng.gen_range(2..=12)
            };
            layers.push(Layer::Fc { out_features: units });
            if !last {
                layers.push(Layer::Relu);
            }
            shape = vec![units];
        }
    }
    let spec = ModelSpec {
        input_shape: vec![1, h, w],
        num_classes: shape[0],
        layers,
    };
    let mut weights = build_model(&spec, rng.gen()).expect("valid random net");
    for l in 0..spec.layers.len() {
        if let Some(p) = weights.param_mut(l) {
            for v in p.data_mut() {
                if rng.gen_bool(0.2) {
                    *v = 0.0;
                }
            }
        }
    }
    let input = Tensor::new(
        spec.input_shape.clone(),
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    (spec, weights, input)
}

fn criterion_pathcount() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut neurons = 0usize;
    let mut mismatches = Vec::new();
    for net in 0..100 {
        let (spec, w, x) = random_path_net(&mut rng);
        let clip = if net % 2 == 0 {
            ClipConfig::none()
        } else {
            ClipConfig::absolute(rng.gen_range(0.05..0.6))
        };
        let trace = forward(&w, &spec, &x).unwrap();
        let pc = pathcount_forward(&w, &spec, &trace, &clip).unwrap();
        for l in 0..spec.layers.len() {
            for (n, &fast) in pc.layer(l).counts.iter().enumerate() {
                match pathcount_bruteforce(&w, &spec, &trace, &clip, (l, n), BRUTEFORCE_LIMIT) {
                    Ok(brute) => {
                        neurons += 1;
                        if fast != brute as f64 {
                            mismatches.push(format!("net {net} layer {l} neuron {n}: {fast} vs {brute}"));
                        }
                    }
                    Err(e) => mismatches.push(format!("net {net} layer {l} neuron {n}: {e}")),
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && secs < 30.0,
        format!(
            "100 networks, {neurons} neurons, {} mismatches{}, {secs:.2}s (limit 30s)",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})"))
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Kendall tau-b vs pair enumeration

fn tau_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if tx == n0 || ty == n0 {
        return None;
    }
    Some((c - d) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

fn criterion_tau() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut disagreements = 0;
    let mut undefined = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=200);
        let kx = rng.gen_range(1..=12);
        let ky = rng.gen_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..kx) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..ky) as f64).collect();
        match (kendall_tau_b(&x, &y), tau_oracle(&x, &y)) {
            (Ok(t), Some(o)) => worst = worst.max((t - o).abs()),
            (Err(Error::UndefinedCorrelation(_)), None) => undefined += 1,
            _ => disagreements += 1,
        }
    }
    let hand = kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).ok() == Some(1.0)
        && kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).ok() == Some(-1.0)
        && kendall_tau_b(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0]).ok() == Some(0.8);
    outcome(
        worst <= 1e-12 && disagreements == 0 && hand,
        format!(
            "1000 tied vectors, max |diff| {worst:.2e} (tol 1e-12), {undefined} both-undefined, {disagreements} disagreements, hand cases {}",
            if hand { "exact" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. gradients vs central differences on an f64 shadow network

/// Plain f64 re-implementation of inference from layer `start` onwards; returns the final output.
fn shadow_from(
    spec: &ModelSpec,
    params: &[Option<Vec<f64>>],
    start: usize,
    value: Vec<f64>,
    shape: Vec<usize>,
) -> Vec<f64> {
    let mut x = value;
    let mut s = shape;
    for (layer, param) in spec.layers.iter().zip(params).skip(start) {
        match *layer {
            Layer::Conv {
                kernel: k,
                stride,
                padding: p,
                out_channels: oc,
            } => {
                let w = param.as_ref().unwrap();
                let (c, h, wd) = (s[0], s[1], s[2]);
                let oh = (h + 2 * p - k) / stride + 1;
                let ow = (wd + 2 * p - k) / stride + 1;
                let mut y = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (yy * stride + ky) as isize - p as isize;
                                        let ix = (xx * stride + kx) as isize - p as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                            acc += w[((o * c + ci) * k + ky) * k + kx]
                                                * x[(ci * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                            }
                            y[(o * oh + yy) * ow + xx] = acc;
                        }
                    }
                }
                x = y;
                s = vec![oc, oh, ow];
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::MaxPool { window, stride } => {
                let (c, h, wd) = (s[0], s[1], s[2]);
                let oh = (h - window) / stride + 1;
                let ow = (wd - window) / stride + 1;
                let mut y = vec![f64::NEG_INFINITY; c * oh * ow];
                for ci in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            for i in 0..window {
                                for j in 0..window {
                                    let v = x[(ci * h + yy * stride + i) * wd + xx * stride + j];
                                    let o = &mut y[(ci * oh + yy) * ow + xx];
                                    *o = o.max(v);
                                }
                            }
                        }
                    }
                }
                x = y;
                s = vec![c, oh, ow];
            }
            Layer::Dropout { .. } => {}
            Layer::Flatten => s = vec![s.iter().product()],
            Layer::Fc { out_features } => {
                let w = param.as_ref().unwrap();
                let n = x.len();
                x = (0..out_features)
                    .map(|o| (0..n).map(|i| w[o * n + i] * x[i]).sum())
                    .collect();
                s = vec![out_features];
            }
        }
    }
    x
}

fn shadow_loss(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn central_diff(v: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut x = v.to_vec();
    (0..v.len())
        .map(|i| {
            x[i] = v[i] + h;
            let up = f(&x);
            x[i] = v[i] - h;
            let down = f(&x);
            x[i] = v[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Every ReLU input and pool window must be clear of its kink for differences to be meaningful.
fn clear_of_kinks(spec: &ModelSpec, weights: &ModelWeights, input: &Tensor, margin: f32) -> bool {
    let trace = forward(weights, spec, input).unwrap();
    spec.layers.iter().enumerate().all(|(l, layer)| match layer {
        Layer::Relu => trace.layer_input(l).data().iter().all(|v| v.abs() > margin),
        Layer::MaxPool { window, stride } => {
            let x = trace.layer_input(l);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            (0..c).all(|ci| {
                (0..(h - window) / stride + 1).all(|yy| {
                    (0..(w - window) / stride + 1).all(|xx| {
                        let mut vals: Vec<f32> = (0..window * window)
                            .map(|q| x.at(&[ci, yy * stride + q / window, xx * stride + q % window]))
                            .collect();
                        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        vals[0] - vals[1] > margin
                    })
                })
            })
        }
        _ => true,
    })
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checks = 0usize;
    let mut instances = 0;
    let mut attempts = 0;
    while instances < 50 && attempts < 5000 {
        attempts += 1;
        let c = rng.gen_range(1..=2);
        let h = *[4usize, 6].choose(&mut rng).unwrap();
        let wd = *[4usize, 6].choose(&mut rng).unwrap();
        let classes = rng.gen_range(2..=4);
        let spec = ModelSpec {
            input_shape: vec![c, h, wd],
            num_classes: classes,
            layers: vec![
                Layer::conv3(rng.gen_range(2..=3)),
                Layer::Relu,
                Layer::conv3(rng.gen_range(2..=3)),
                Layer::Relu,
                Layer::MaxPool { window: 2, stride: 2 },
                Layer::Dropout { rate: 0.25 },
                Layer::Flatten,
                Layer::Fc { out_features: 5 },
                Layer::Relu,
                Layer::Fc { out_features: classes },
            ],
        };
        let weights = build_model(&spec, rng.gen()).unwrap();
        let input = Tensor::new(
            spec.input_shape.clone(),
            (0..c * h * wd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        if !clear_of_kinks(&spec, &weights, &input, 1e-3) {
            continue;
        }
        instances += 1;
        let params: Vec<Option<Vec<f64>>> = weights.params().iter().map(|p| p.as_ref().map(to64)).collect();
        let label = rng.gen_range(0..classes);
        let trace = forward(&weights, &spec, &input).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(trace.logits(), label).unwrap();
        let grads = backward(&weights, &spec, &trace, &grad_logits).unwrap();
        let mut note = |err: f64, what: String| {
            checks += 1;
            if err > worst {
                worst = err;
                worst_at = what;
            }
        };

        // Parameter gradients of the loss.
        for (l, _) in weights.iter() {
            let fd = central_diff(&params[l].clone().unwrap(), |v| {
                let mut ps = params.clone();
                ps[l] = Some(v.to_vec());
                shadow_loss(
                    &shadow_from(&spec, &ps, 0, to64(&input), spec.input_shape.clone()),
                    label,
                )
            });
            note(
                rel_err(&to64(grads.params[l].as_ref().unwrap()), &fd),
                format!("param of layer {l}"),
            );
        }
        // Input gradient of the loss.
        let fd = central_diff(&to64(&input), |v| {
            shadow_loss(
                &shadow_from(&spec, &params, 0, v.to_vec(), spec.input_shape.clone()),
                label,
            )
        });
        note(rel_err(&to64(&grads.input), &fd), "network input".into());
        // Target-logit gradient at every layer output: exercises each layer's backward rule.
        let target = rng.gen_range(0..classes);
        let mut onehot = Tensor::zeros([classes]);
        onehot.data_mut()[target] = 1.0;
        for l in 0..spec.layers.len() - 1 {
            let g = output_gradient(&weights, &spec, &trace, l, &onehot).unwrap();
            let out = trace.output(l);
            let fd = central_diff(&to64(out), |v| {
                shadow_from(&spec, &params, l + 1, v.to_vec(), out.shape().to_vec())[target]
            });
            note(
                rel_err(&to64(&g), &fd),
                format!("output of layer {l} ({:?})", spec.layers[l]),
            );
        }
        // Grad-CAM gradient at the last conv ReLU.
        let (act, g) = cam_gradient(&weights, &spec, &input, target).unwrap();
        let cam_l = spec.last_conv_relu().unwrap();
        let fd = central_diff(&to64(&act), |v| {
            shadow_from(&spec, &params, cam_l + 1, v.to_vec(), act.shape().to_vec())[target]
        });
        note(rel_err(&to64(&g), &fd), "grad-cam target gradient".into());
    }
    outcome(
        instances == 50 && worst < 1e-3,
        format!("{instances} instances, {checks} gradient checks, max rel err {worst:.2e} at {worst_at} (tol 1e-3)"),
    )
}

// ---------------------------------------------------------------------------
// 4. scale preservation and identity replacement

fn criterion_scale(desk: Option<&Desk>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let shape = [rng.gen_range(1..=8), rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let n: usize = shape.iter().product();
        let mut data: Vec<f32> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0.0..3.0)
                } else {
                    0.0
                }
            })
            .collect();
        data[rng.gen_range(0..n)] = rng.gen_range(0.1..3.0);
        let act = Tensor::new(shape, data).unwrap();
        let counts: Vec<f64> = act
            .data()
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    rng.gen_range(1..1_000_000u64) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let total = act.sum();
        let so = scaled_onoff(&act, &onoff(&act)).unwrap().sum();
        let sp = scaled_pathcount(&act, &counts).unwrap().sum();
        worst = worst
            .max(((so - total) / total).abs())
            .max(((sp - total) / total).abs());
    }
    let mut detail = format!("1000 layers, max rel mass error {worst:.2e} (tol 1e-5)");
    let mut pass = worst <= 1e-5;
    match desk {
        Some(d) => {
            let mut checked = 0;
            let mut identical = true;
            for i in 0..20 {
                let (x, _) = d.test.get(i);
                let base = forward(&d.weights, &d.spec, x).unwrap().logits().clone();
                for l in 0..d.spec.layers.len() {
                    let out = replace_and_infer(
                        &d.weights,
                        &d.spec,
                        x,
                        l,
                        ReplacementKind::Identity,
                        &ClipConfig::none(),
                    )
                    .unwrap();
                    checked += 1;
                    identical &= out
                        .data()
                        .iter()
                        .zip(base.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                }
            }
            pass &= identical;
            detail += &format!("; identity replacement bitwise equal on {checked} (image, layer) pairs: {identical}");
        }
        None => {
            pass = false;
            detail += "; identity replacement not checked (no desk model)";
        }
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// Desk model shared by 4-9

struct Desk {
    spec: ModelSpec,
    weights: ModelWeights,
    train: Dataset,
    test: Dataset,
    test_acc: f64,
    train_secs: f64,
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("NPSC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn train_desk() -> Result<Desk, String> {
    let dir = mnist_dir();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
        .and_then(|d| d.with_num_classes(10))
        .map_err(|e| format!("MNIST training data: {e}"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))
        .and_then(|d| d.with_num_classes(10))
        .map_err(|e| format!("MNIST test data: {e}"))?;
    let spec = ModelSpec::desk_mnist();
    let start = Instant::now();
    let init = build_model(&spec, 0).map_err(|e| e.to_string())?;
    let (weights, _) = train_sgd(&init, &spec, &train, &TrainConfig::desk(0)).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let test_acc = evaluate_accuracy(&weights, &spec, &test).map_err(|e| e.to_string())?;
    Ok(Desk {
        spec,
        weights,
        train,
        test,
        test_acc,
        train_secs,
    })
}

fn criterion_zero_sets(d: &Desk) -> Outcome {
    let mut mismatched = 0usize;
    let mut neurons = 0usize;
    let relus = d.spec.relu_layers();
    for i in 0..100 {
        let (x, _) = d.test.get(i);
        let trace = forward(&d.weights, &d.spec, x).unwrap();
        let pc = pathcount_forward(&d.weights, &d.spec, &trace, &ClipConfig::none()).unwrap();
        for &l in &relus {
            for (a, c) in trace.output(l).data().iter().zip(&pc.layer(l).counts) {
                neurons += 1;
                if (*a == 0.0) != (*c == 0.0) {
                    mismatched += 1;
                }
            }
        }
    }
    outcome(
        mismatched == 0,
        format!(
            "100 images x {} ReLU layers, {neurons} neurons, {mismatched} zero-set mismatches",
            relus.len()
        ),
    )
}

fn criterion_trend(d: &Desk) -> Outcome {
    let kinds = [ReplacementKind::Identity, ReplacementKind::ScaledOnoff];
    let rep = sweep(&d.weights, &d.spec, &d.test, None, &kinds, &ClipConfig::none()).unwrap();
    let names = d.spec.layer_names();
    let relus = d.spec.relu_layers();
    let acc: Vec<f64> = relus
        .iter()
        .map(|&l| rep.row(&names[l], ReplacementKind::ScaledOnoff).unwrap().accuracy)
        .collect();
    let baseline = rep.rows[0].baseline_accuracy;
    let last = *acc.last().unwrap();
    let retained = last / baseline;
    let interior = if acc.len() >= 3 {
        &acc[1..acc.len() - 1]
    } else {
        &acc[..acc.len() - 1]
    };
    let mid_min = interior.iter().cloned().fold(f64::INFINITY, f64::min);
    let curve: Vec<String> = relus
        .iter()
        .zip(&acc)
        .map(|(&l, a)| format!("{}={a:.3}", names[l]))
        .collect();
    outcome(
        d.test_acc >= 0.95 && d.train_secs < 1800.0 && retained >= 0.85 && last > mid_min,
        format!(
            "test acc {:.4} (>= 0.95) trained in {:.0}s (< 1800s); scaled on-off {} ; last/baseline {retained:.3} (>= 0.85); rebound {last:.3} > mid-stack min {mid_min:.3}",
            d.test_acc,
            d.train_secs,
            curve.join(" ")
        ),
    )
}

fn criterion_degradation(d: &Desk) -> Outcome {
    let sample = subsample(&d.test, 200, 7).unwrap();
    let fill = d.train.mean_pixel();
    let clip = ClipConfig::none();
    let act = degradation_score(
        &d.weights,
        &d.spec,
        &sample,
        SaliencySource::Cam(CamVariant::Act),
        10,
        &clip,
        fill,
    )
    .unwrap();
    let rnd = degradation_score(
        &d.weights,
        &d.spec,
        &sample,
        SaliencySource::Random { seed: 7 },
        10,
        &clip,
        fill,
    )
    .unwrap();
    let n = act.fractions.len();
    let ends = act.morf[0] == act.lerf[0] && act.morf[n - 1] == act.lerf[n - 1];
    outcome(
        act.area > 0.0 && act.area >= rnd.area + 0.05 && ends,
        format!(
            "200 images: act area {:.4}, random area {:.4} (need > 0 and margin >= 0.05); endpoints equal: {ends}",
            act.area, rnd.area
        ),
    )
}

fn criterion_tiles(d: &Desk) -> Outcome {
    let tiled = make_tiled(&d.test, 500, 11, 2).unwrap();
    let clip = ClipConfig::none();
    let run = |src, mode| target_matching_accuracy(&d.weights, &d.spec, &tiled, src, mode, &clip).unwrap();
    let act = run(SaliencySource::Cam(CamVariant::Act), TargetMode::True);
    let on = run(SaliencySource::Cam(CamVariant::Onoff), TargetMode::True);
    let shuffled = run(SaliencySource::Cam(CamVariant::Act), TargetMode::Shuffled { seed: 11 });
    outcome(
        act >= 0.5 && on >= 0.5 && (shuffled - 0.25).abs() <= 0.07,
        format!("500 composites: act {act:.3}, onoff {on:.3} (>= 0.5); shuffled-label control {shuffled:.3} (0.25 +/- 0.07)"),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism and file formats through the CLI

fn npsc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_npsc"))
        .args(args)
        .output()
        .expect("spawn npsc");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn criterion_determinism(desk: Option<&Desk>) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let data = [
        "--synthetic",
        "--synthetic-n",
        "240",
        "--synthetic-classes",
        "4",
        "--synthetic-size",
        "12",
        "--seed",
        "5",
    ];
    let mut problems = Vec::new();
    let mut compared = 0;
    for workers in ["1", "4"] {
        let out = p(&format!("w{workers}"));
        let mut a = vec!["train", "--epochs", "2", "--workers", workers, "--out", &out];
        a.extend(data);
        let (code, err) = npsc(&a);
        if code != 0 {
            problems.push(format!("train failed: {err}"));
            continue;
        }
        let model = format!("{out}/model.npsc");
        let runs: [(&str, Vec<&str>); 6] = [
            ("pathcount", vec!["--image-index", "3"]),
            ("replace-sweep", vec!["--sample", "40"]),
            ("correlate", vec!["--sample", "20"]),
            ("cam", vec!["--image-index", "2"]),
            ("degrade", vec!["--sample", "30", "--steps", "5"]),
            ("tilematch", vec!["--tiles", "20"]),
        ];
        for (cmd, extra) in runs {
            let mut a = vec![cmd, "--model", &model, "--workers", workers, "--out", &out];
            a.extend(&data);
            a.extend(extra);
            let (code, err) = npsc(&a);
            if code != 0 {
                problems.push(format!("{cmd} failed: {err}"));
            }
        }
    }
    let files = [
        "model.npsc",
        "pathcount.csv",
        "sweep.csv",
        "tau.csv",
        "saliency.csv",
        "degradation.csv",
        "tilematch.csv",
    ];
    for f in files {
        let a = std::fs::read(p(&format!("w1/{f}")));
        let b = std::fs::read(p(&format!("w4/{f}")));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => compared += 1,
            (Ok(_), Ok(_)) => problems.push(format!("{f} differs between 1 and 4 workers")),
            _ => problems.push(format!("{f} missing")),
        }
    }

    // Round trip.
    let round_trip = match desk {
        Some(d) => {
            let path = p("desk.npsc");
            save_model(&d.weights, &d.spec, &path).unwrap();
            let (spec, w) = load_model(&path).unwrap();
            let same_bits = w.params().iter().zip(d.weights.params()).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (None, None) => true,
                _ => false,
            });
            let bytes = model_to_bytes(&d.weights, &d.spec).unwrap();
            let again = model_from_bytes(&bytes)
                .and_then(|(s, w)| model_to_bytes(&w, &s))
                .unwrap();
            spec == d.spec && same_bits && bytes == again
        }
        None => false,
    };
    if !round_trip {
        problems.push("model round trip not bitwise exact".into());
    }

    // Malformed inputs.
    let good_model = p("w1/model.npsc");
    let bytes = std::fs::read(&good_model).unwrap_or_default();
    std::fs::write(p("garbage.npsc"), b"not a model at all").unwrap();
    std::fs::write(p("truncated.npsc"), &bytes[..bytes.len() / 2]).unwrap();
    let mut trailing = bytes.clone();
    trailing.push(0);
    std::fs::write(p("trailing.npsc"), trailing).unwrap();
    std::fs::write(
        p("bad-magic-idx"),
        [0u8, 0, 9, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4],
    )
    .unwrap();
    std::fs::write(p("short-idx"), [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2]).unwrap();
    std::fs::write(p("labels-idx"), [0u8, 0, 8, 1, 0, 0, 0, 1, 0]).unwrap();
    let cases: Vec<(&str, Vec<String>)> = vec![
        ("garbage model", vec!["--model".into(), p("garbage.npsc")]),
        ("truncated model", vec!["--model".into(), p("truncated.npsc")]),
        ("trailing bytes", vec!["--model".into(), p("trailing.npsc")]),
        (
            "bad IDX magic",
            vec![
                "--model".into(),
                good_model.clone(),
                "--data-images".into(),
                p("bad-magic-idx"),
                "--data-labels".into(),
                p("labels-idx"),
            ],
        ),
        (
            "truncated IDX",
            vec![
                "--model".into(),
                good_model.clone(),
                "--data-images".into(),
                p("short-idx"),
                "--data-labels".into(),
                p("labels-idx"),
            ],
        ),
    ];
    let mut rejected = 0;
    for (name, extra) in &cases {
        let mut a: Vec<String> = vec!["eval".into(), "--out".into(), p("bad")];
        if !extra.iter().any(|e| e == "--data-images") {
            a.extend(data.iter().map(|s| s.to_string()));
        }
        a.extend(extra.iter().cloned());
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let (code, _) = npsc(&refs);
        if code == 2 {
            rejected += 1;
        } else {
            problems.push(format!("{name}: exit code {code}, expected 2"));
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "{compared}/{} artifacts byte-identical across 1 and 4 workers; round trip exact: {round_trip}; {rejected}/{} malformed files exit 2{}",
            files.len(),
            cases.len(),
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
        ),
    )
}

fn main() {
    // Cargo passes harness flags such as --nocapture; only a listing request needs handling.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut all = true;
    all &= report(1, "path counts equal explicit enumeration", &criterion_pathcount());
    all &= report(2, "Kendall tau-b matches pair enumeration", &criterion_tau());
    all &= report(3, "gradients match central differences", &criterion_gradients());
    let desk = train_desk();
    if let Err(e) = &desk {
        println!("desk model unavailable: {e}");
    }
    let desk = desk.ok();
    all &= report(
        4,
        "scale preservation and identity replacement",
        &criterion_scale(desk.as_ref()),
    );
    let needs = |f: &dyn Fn(&Desk) -> Outcome| desk.as_ref().map_or_else(|| outcome(false, "no desk model"), f);
    all &= report(
        5,
        "activation and path-count zero sets agree",
        &needs(&criterion_zero_sets),
    );
    all &= report(6, "desk training and replacement trend", &needs(&criterion_trend));
    all &= report(7, "degradation sanity", &needs(&criterion_degradation));
    all &= report(8, "tiled target matching", &needs(&criterion_tiles));
    all &= report(9, "determinism and file formats", &criterion_determinism(desk.as_ref()));
    if !all {
        std::process::exit(1);
    }
}

use std::fs;

use serde_json::json;

use npsc::cam::{degradation_score, make_tiled, saliency, target_matching_accuracy, SaliencySource, TargetMode};
use npsc::correlation::{aggregate_models, layerwise_tau};
use npsc::dataio::{load_idx, subsample, synthetic_blobs, BlobConfig, Dataset};
use npsc::model::{
    build_model, evaluate_accuracy, forward, load_model, model_hash, save_model, train_sgd, ModelSpec, ModelWeights,
    TrainConfig,
};
use npsc::pathcount::{pathcount_forward, ClipConfig};
use npsc::replacement::{sweep, ReplacementKind};
use npsc::report::{write_json, write_text, Csv};
use npsc::{Error, Result};

use crate::args::{
    CamArgs, Cli, ClipModeArg, Command, Common, DegradeArgs, PathcountArgs, Profile, SweepArgs, TilematchArgs,
    TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Train(a) => &a.common,
        Command::Eval(c) | Command::Correlate(c) => c,
        Command::Pathcount(a) => &a.common,
        Command::ReplaceSweep(a) => &a.common,
        Command::Cam(a) => &a.common,
        Command::Degrade(a) => &a.common,
        Command::Tilematch(a) => &a.common,
    };
    let workers = match common.workers {
        Some(0) => return Err(Error::arg("--workers must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write_json(common.out.join("config.json"), &cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(c) => eval(c),
        Command::Pathcount(a) => pathcount(a),
        Command::ReplaceSweep(a) => replace_sweep(a),
        Command::Correlate(c) => correlate(c),
        Command::Cam(a) => cam(a),
        Command::Degrade(a) => degrade(a),
        Command::Tilematch(a) => tilematch(a),
    })
}

fn clip(c: &Common) -> Result<ClipConfig> {
    let cfg = match c.clip_mode {
        ClipModeArg::Absolute => ClipConfig::absolute(c.clip_threshold),
        ClipModeArg::MeanAbs => ClipConfig::mean_abs(c.clip_threshold),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(c: &Common, seed_offset: u64) -> Result<Dataset> {
    if c.synthetic {
        let mut cfg = BlobConfig::new(
            c.synthetic_n,
            c.synthetic_classes,
            c.synthetic_size,
            c.seed.wrapping_add(seed_offset),
        );
        cfg.n = c.synthetic_n;
        return synthetic_blobs(&cfg);
    }
    match (&c.data_images, &c.data_labels) {
        (Some(i), Some(l)) => load_idx(i, l)?.with_num_classes(c.classes),
        _ => Err(Error::arg("pass --data-images and --data-labels, or --synthetic")),
    }
}

/// The analysis set: full data, or a seeded subsample of `--sample` images.
fn analysis_set(c: &Common) -> Result<Dataset> {
    let ds = dataset(c, 1)?;
    match c.sample {
        Some(0) => Err(Error::arg("--sample must be >= 1")),
        Some(n) if n < ds.len() => subsample(&ds, n, c.seed),
        _ => Ok(ds),
    }
}

fn model_paths(c: &Common) -> Result<Vec<&str>> {
    let m = c.model.as_deref().ok_or_else(|| Error::arg("--model is required"))?;
    let paths: Vec<&str> = m.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if paths.is_empty() {
        return Err(Error::arg("--model is empty"));
    }
    Ok(paths)
}

fn one_model(c: &Common) -> Result<(ModelSpec, ModelWeights)> {
    let paths = model_paths(c)?;
    if paths.len() != 1 {
        return Err(Error::arg("this command takes a single --model"));
    }
    load_model(paths[0])
}

fn parse_layers(spec: &ModelSpec, list: &Option<String>) -> Result<Option<Vec<usize>>> {
    list.as_deref()
        .map(|s| s.split(',').map(|n| spec.layer_index(n.trim())).collect())
        .transpose()
}

fn train(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    let mut train_set = dataset(c, 0)?;
    if let Some(n) = a.train_size {
        train_set = train_set.take(n.min(train_set.len()));
    }
    let test_set = if c.synthetic {
        Some(dataset(c, 1)?)
    } else {
        match (&a.test_images, &a.test_labels) {
            (Some(i), Some(l)) => Some(load_idx(i, l)?.with_num_classes(c.classes)?),
            (None, None) => None,
            _ => return Err(Error::arg("pass both --test-images and --test-labels")),
        }
    };
    let shape = train_set.image_shape().expect("nonempty").to_vec();
    if shape.len() != 3 {
        return Err(Error::arg("images must be [C, H, W]"));
    }
    let input = [shape[0], shape[1], shape[2]];
    let classes = train_set.num_classes();
    let (mut cfg, layers, channels) = match a.profile {
        Profile::Desk => (TrainConfig::desk(c.seed), 3, 8),
        Profile::Reference => (TrainConfig::reference(c.seed), 5, if input[0] == 3 { 64 } else { 32 }),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.dropout = !a.no_dropout;
    let spec = ModelSpec::conv_fc(
        input,
        a.conv_layers.unwrap_or(layers),
        a.channels.unwrap_or(channels),
        classes,
    );
    let init = build_model(&spec, c.seed)?;
    let (weights, log) = train_sgd(&init, &spec, &train_set, &cfg)?;
    let model_path = c.model.as_ref().map_or_else(|| c.out.join("model.npsc"), Into::into);
    save_model(&weights, &spec, &model_path)?;
    let train_acc = evaluate_accuracy(&weights, &spec, &train_set)?;
    let test_acc = test_set
        .as_ref()
        .map(|t| evaluate_accuracy(&weights, &spec, t))
        .transpose()?;
    let metrics = json!({
        "train_acc": train_acc,
        "test_acc": test_acc,
        "epochs": cfg.epochs,
        "seed": c.seed,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "epoch_losses": log.epoch_losses,
        "model_hash": model_hash(&weights, &spec)?,
        "model": model_path,
    });
    write_json(c.out.join("metrics.json"), &metrics)?;
    println!(
        "train_acc {train_acc:.4} test_acc {}",
        test_acc.map_or("n/a".into(), |t| format!("{t:.4}"))
    );
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let (spec, w) = one_model(c)?;
    let ds = analysis_set(c)?;
    let acc = evaluate_accuracy(&w, &spec, &ds)?;
    write_json(
        c.out.join("eval.json"),
        &json!({ "accuracy": acc, "images": ds.len(), "model_hash": model_hash(&w, &spec)? }),
    )?;
    println!("accuracy {acc:.4}");
    Ok(())
}

fn pathcount(a: &PathcountArgs) -> Result<()> {
    let c = &a.common;
    let (spec, w) = one_model(c)?;
    let ds = dataset(c, 1)?;
    if a.image_index >= ds.len() {
        return Err(Error::arg(format!(
            "image index {} out of range for {} images",
            a.image_index,
            ds.len()
        )));
    }
    let (image, _) = ds.get(a.image_index);
    let trace = forward(&w, &spec, image)?;
    let pc = pathcount_forward(&w, &spec, &trace, &clip(c)?)?;
    let layers = parse_layers(&spec, &a.layer)?.unwrap_or_else(|| (0..spec.layers.len()).collect());
    let names = spec.layer_names();
    let mut buf = Vec::new();
    pc.write_csv(&names, &layers, &mut buf)?;
    write_text(c.out.join("pathcount.csv"), &String::from_utf8(buf).expect("ascii csv"))?;
    write_json(c.out.join("pathcount.json"), &pc.to_json(&names, &layers))?;
    if !pc.exact {
        eprintln!("warning: some counts exceed 2^53 and are approximate");
    }
    Ok(())
}

fn replace_sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.common;
    let (spec, w) = one_model(c)?;
    let ds = analysis_set(c)?;
    let kinds: Vec<ReplacementKind> = a.kinds.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?;
    let layers = parse_layers(&spec, &a.layer)?;
    let report = sweep(&w, &spec, &ds, layers.as_deref(), &kinds, &clip(c)?)?;
    report.to_csv().write(c.out.join("sweep.csv"))?;
    write_json(c.out.join("sweep.json"), &report)?;
    Ok(())
}

fn correlate(c: &Common) -> Result<()> {
    let ds = analysis_set(c)?;
    let clip = clip(c)?;
    let mut reports = Vec::new();
    for p in model_paths(c)? {
        let (spec, w) = load_model(p)?;
        reports.push(layerwise_tau(&w, &spec, &ds, &clip)?);
    }
    if reports.len() == 1 {
        reports[0].to_csv().write(c.out.join("tau.csv"))?;
        write_json(c.out.join("tau.json"), &reports[0])?;
    } else {
        let agg = aggregate_models(&reports)?;
        agg.to_csv().write(c.out.join("tau.csv"))?;
        write_json(c.out.join("tau.json"), &json!({ "aggregate": agg, "models": reports }))?;
    }
    Ok(())
}

fn source(variant: &str, seed: u64) -> Result<SaliencySource> {
    match variant.parse::<SaliencySource>()? {
        SaliencySource::Random { .. } => Ok(SaliencySource::Random { seed }),
        s => Ok(s),
    }
}

fn cam(a: &CamArgs) -> Result<()> {
    let c = &a.common;
    let (spec, w) = one_model(c)?;
    let ds = dataset(c, 1)?;
    if a.image_index >= ds.len() {
        return Err(Error::arg(format!(
            "image index {} out of range for {} images",
            a.image_index,
            ds.len()
        )));
    }
    let (image, label) = ds.get(a.image_index);
    let target = a.target.unwrap_or(label);
    let src = source(&a.variant, c.seed)?;
    let sal = saliency(&w, &spec, image, target, src, &clip(c)?, a.image_index as u64)?;
    fs::write(c.out.join("saliency.pgm"), sal.to_pgm()).map_err(|e| Error::io(c.out.join("saliency.pgm"), e))?;
    let mut buf = Vec::new();
    sal.write_csv(&mut buf)?;
    write_text(c.out.join("saliency.csv"), &String::from_utf8(buf).expect("ascii csv"))?;
    let predicted = forward(&w, &spec, image)?.logits().argmax();
    write_json(
        c.out.join("cam.json"),
        &json!({ "source": src.to_string(), "image_index": a.image_index, "label": label, "target": target, "predicted": predicted }),
    )?;
    Ok(())
}

fn degrade(a: &DegradeArgs) -> Result<()> {
    let c = &a.common;
    let (spec, w) = one_model(c)?;
    let ds = analysis_set(c)?;
    let fill = a.fill.unwrap_or_else(|| ds.mean_pixel());
    let report = degradation_score(&w, &spec, &ds, source(&a.variant, c.seed)?, a.steps, &clip(c)?, fill)?;
    report.to_csv().write(c.out.join("degradation.csv"))?;
    write_json(
        c.out.join("degradation.json"),
        &json!({ "report": report, "fill": fill }),
    )?;
    println!("area {:.4}", report.area);
    Ok(())
}

fn tilematch(a: &TilematchArgs) -> Result<()> {
    let c = &a.common;
    let (spec, w) = one_model(c)?;
    let ds = dataset(c, 1)?;
    let tiled = make_tiled(&ds, a.tiles, c.seed, 2)?;
    let src = source(&a.variant, c.seed)?;
    let mode = if a.shuffle_labels {
        TargetMode::Shuffled { seed: c.seed }
    } else {
        TargetMode::True
    };
    let acc = target_matching_accuracy(&w, &spec, &tiled, src, mode, &clip(c)?)?;
    let targets = if a.shuffle_labels { "shuffled" } else { "true" };
    let mut csv = Csv::with_header(&["source", "targets", "composites", "accuracy"]);
    csv.row([
        src.to_string(),
        targets.to_string(),
        a.tiles.to_string(),
        acc.to_string(),
    ]);
    csv.write(c.out.join("tilematch.csv"))?;
    write_json(
        c.out.join("tilematch.json"),
        &json!({ "source": src.to_string(), "targets": targets, "composites": a.tiles, "accuracy": acc }),
    )?;
    println!("accuracy {acc:.4}");
    Ok(())
}

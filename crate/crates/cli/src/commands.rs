use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use apfcn_core::cluster::{select_k_from_matrix, DistanceMatrix};
use apfcn_core::datagen::{generate_dataset, GeneratorConfig};
use apfcn_core::dataset_io::{read_dataset, write_dataset};
use apfcn_core::fcn::{build_model, read_checkpoint, write_checkpoint, FcnModel, LayerSpec, ModelConfig, Variant};
use apfcn_core::signal::{default_lead_names, stratified_split, LabeledDataset, SplitIndices, SplitRatios};
use apfcn_core::stats::{
    dt_comparison, lead_importance, remap_region, ventricle_rank, Prediction, SampleSaliency, Scheme, ALPHA,
};
use apfcn_core::trainer::{fine_tune, fit, predict, ClassMetrics, OptimizerKind, TrainConfig};
use apfcn_core::xai::{gradcam_batch, gradcam_dims, guided_backprop_batch, guided_gradcam_batch, CombineOptions, Method};
use apfcn_core::Error;

use crate::config::RunConfig;
use crate::CliError;

pub const SPLIT_FILE: &str = "split.csv";
pub const MODEL_FILE: &str = "model.fcnw";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
const SALIENCY_BATCH: usize = 16;

pub fn dispatch(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command.as_str() {
        "gen" => gen(cfg),
        "train" => train(cfg),
        "explain" => explain(cfg),
        "cluster" => cluster(cfg),
        "lead-importance" => lead_importance_cmd(cfg),
        "compare" => compare(cfg),
        other => Err(CliError::Validation(format!("unknown command {other}"))),
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.path("out");
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn existing(cfg: &RunConfig, key: &str) -> Result<PathBuf, CliError> {
    let p = cfg.path(key);
    if !p.exists() {
        return Err(CliError::Validation(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// Lead given by name (case-insensitive) or index.
fn parse_lead(s: &str, names: &[String]) -> Result<usize, CliError> {
    if let Some(i) = names.iter().position(|n| n.eq_ignore_ascii_case(s)) {
        return Ok(i);
    }
    s.parse()
        .map_err(|_| CliError::Validation(format!("unknown lead {s:?}; expected one of {}", names.join(","))))
}

fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let l = cfg.usize("l")?;
    let names = default_lead_names(l);
    let active: Vec<usize> = cfg
        .list("active_leads")
        .iter()
        .map(|s| parse_lead(s, &names))
        .collect::<Result<_, _>>()?;
    let gcfg = GeneratorConfig {
        samples_per_class: cfg.usize("samples_per_class")?,
        class_count: cfg.usize("classes")?,
        t: cfg.usize("t")?,
        l,
        noise_std: cfg.f64("noise_std")?,
        jitter: cfg.usize("jitter")?,
        seed: cfg.u64("seed")?,
        active_leads: (!active.is_empty()).then_some(active),
        noise_on_inactive: cfg.bool("noise_on_inactive")?,
        min_row_distance: cfg.f64("min_row_distance")?,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&gcfg)?;
    let out = output_dir(cfg)?;
    write_dataset(&ds, &out)?;
    cfg.write(&out)?;
    println!(
        "generated {} signals ({} classes, T={}, L={}) in {}",
        ds.len(),
        ds.class_count(),
        ds.time_steps(),
        ds.leads(),
        out.display()
    );
    Ok(())
}

fn write_split(split: &SplitIndices, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "part"])?;
    for (part, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for i in idx {
            w.write_record([i.to_string().as_str(), part])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path, n: usize) -> Result<SplitIndices, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        let bad = || CliError::Validation(format!("{}: malformed row {:?}", path.display(), rec));
        let i: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        if i >= n {
            return Err(CliError::Validation(format!(
                "{}: sample {i} outside a dataset of {n}",
                path.display()
            )));
        }
        match rec.get(1).map(str::trim) {
            Some("train") => split.train.push(i),
            Some("val") => split.val.push(i),
            Some("test") => split.test.push(i),
            _ => return Err(bad()),
        }
    }
    Ok(split)
}

fn write_predictions(path: &Path, ds: &LabeledDataset, indices: &[usize], predicted: &[usize]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "label", "predicted"])?;
    for (&i, &p) in indices.iter().zip(predicted) {
        w.write_record([i.to_string(), ds.label(i).to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn layers(cfg: &RunConfig, variant: Variant) -> Result<Vec<LayerSpec>, CliError> {
    let mut layers = variant.default_layers();
    let filters = cfg.usize_list("filters")?;
    if filters.is_empty() {
        return Ok(layers);
    }
    if filters.len() != layers.len() {
        return Err(CliError::Validation(format!(
            "filters lists {} layers, the {variant} network has {}",
            filters.len(),
            layers.len()
        )));
    }
    for (layer, f) in layers.iter_mut().zip(filters) {
        layer.filters = f;
    }
    Ok(layers)
}

fn optimizer(cfg: &RunConfig) -> Result<OptimizerKind, CliError> {
    match cfg.str("optimizer").to_ascii_lowercase().as_str() {
        "adam" => Ok(OptimizerKind::adam()),
        "sgd" => Ok(OptimizerKind::Sgd {
            momentum: cfg.f64("momentum")?,
        }),
        other => Err(CliError::Validation(format!("unknown optimizer {other:?} (adam | sgd)"))),
    }
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let variant = Variant::parse(cfg.str("variant"))
        .ok_or_else(|| CliError::Validation(format!("unknown variant {:?}", cfg.str("variant"))))?;
    let model_layers = layers(cfg, variant)?;
    let ratios = match cfg.f64_list("split")?.as_slice() {
        &[train, val, test] => SplitRatios { train, val, test },
        _ => return Err(CliError::Validation("split must list three ratios".into())),
    };
    let patience = cfg.usize("patience")?;
    let seed = cfg.u64("seed")?;
    let tcfg = TrainConfig {
        epochs: cfg.usize("epochs")?,
        batch_size: cfg.usize("batch_size")?,
        learning_rate: cfg.f64("lr")?,
        optimizer: optimizer(cfg)?,
        patience: (patience > 0).then_some(patience),
        seed,
    };
    tcfg.validate()?;
    let ft_epochs = cfg.usize("fine_tune_epochs")?;
    let ft_cfg = TrainConfig {
        epochs: ft_epochs.max(1),
        learning_rate: cfg.f64("fine_tune_lr")?,
        ..tcfg.clone()
    };
    let ds = read_dataset(&existing(cfg, "data")?)?;
    let split = stratified_split(&ds, ratios, seed)?;
    let mcfg = ModelConfig::new(variant, ds.class_count(), ds.time_steps(), ds.leads()).with_layers(model_layers);
    let model = build_model::<f32>(mcfg, seed)?;
    let out = output_dir(cfg)?;

    let started = Instant::now();
    let (mut model, history) = fit(model, &ds, &split, &tcfg)?;
    history.write_csv(&out.join("history.csv"))?;
    if ft_epochs > 0 {
        let (tuned, ft_history) = fine_tune(model, &ds, &split, &ft_cfg)?;
        ft_history.write_csv(&out.join("history_finetune.csv"))?;
        model = tuned;
    }
    let elapsed = started.elapsed().as_secs_f64();

    let predicted = predict(&model, &ds, &split.test)?;
    let truth: Vec<usize> = split.test.iter().map(|&i| ds.label(i)).collect();
    let metrics = ClassMetrics::from_predictions(&truth, &predicted, ds.class_count())?;
    write_checkpoint(&model, &out.join(MODEL_FILE))?;
    metrics.write_csv(&out.join("metrics.csv"))?;
    write_split(&split, &out.join(SPLIT_FILE))?;
    write_predictions(&out.join(PREDICTIONS_FILE), &ds, &split.test, &predicted)?;
    cfg.write(&out)?;
    println!(
        "{variant}: {} parameters, {} epochs (best {}), {elapsed:.1}s",
        model.count_params(),
        history.len(),
        history.best_epoch
    );
    println!(
        "test accuracy {:.2}% ({}/{}) -> {}",
        metrics.accuracy(),
        metrics.correct,
        metrics.total,
        out.display()
    );
    Ok(())
}

fn split_path(cfg: &RunConfig, model_path: &Path) -> PathBuf {
    if cfg.str("split").is_empty() {
        model_path.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE)
    } else {
        cfg.path("split")
    }
}

fn load_model_and_data(cfg: &RunConfig) -> Result<(FcnModel<f32>, LabeledDataset, SplitIndices), CliError> {
    let model_path = existing(cfg, "model")?;
    let ds = read_dataset(&existing(cfg, "data")?)?;
    let model = read_checkpoint(&model_path)?;
    let (t, l, c) = (model.config.t, model.config.l, model.class_count());
    if (t, l, c) != (ds.time_steps(), ds.leads(), ds.class_count()) {
        return Err(CliError::Validation(format!(
            "model expects T={t}, L={l}, C={c}; dataset has T={}, L={}, C={}",
            ds.time_steps(),
            ds.leads(),
            ds.class_count()
        )));
    }
    let sp = split_path(cfg, &model_path);
    if !sp.exists() {
        return Err(CliError::Validation(format!("split file {} does not exist", sp.display())));
    }
    let split = read_split(&sp, ds.len())?;
    Ok((model, ds, split))
}

/// Correctly classified samples among `indices`, with their labels.
fn correct_samples(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<Vec<(usize, usize)>, CliError> {
    let predicted = predict(model, ds, indices)?;
    Ok(indices
        .iter()
        .zip(predicted)
        .filter(|(&i, p)| ds.label(i) == *p)
        .map(|(&i, p)| (i, p))
        .collect())
}

fn explain(cfg: &RunConfig) -> Result<(), CliError> {
    let method = Method::parse(cfg.str("method")).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown method {:?} (guided-backprop | gradcam | guided-gradcam)",
            cfg.str("method")
        ))
    })?;
    let opts = CombineOptions {
        interpolate: cfg.bool("interpolate")?,
        abs: cfg.bool("abs")?,
    };
    let (model, ds, split) = load_model_and_data(cfg)?;
    let variant = model.variant();
    if method == Method::GuidedGradCam && !variant.is_2d() && !opts.interpolate {
        let layout = variant.layout();
        return Err(Error::DimensionMismatch {
            guided: apfcn_core::signal::layout_dims(layout, ds.time_steps(), ds.leads()),
            gradcam: gradcam_dims(&model),
        }
        .into());
    }
    let requested = cfg.usize_list("samples")?;
    let targets: Vec<(usize, usize)> = if requested.is_empty() {
        correct_samples(&model, &ds, &split.test)?
    } else {
        if let Some(&i) = requested.iter().find(|&&i| i >= ds.len()) {
            return Err(CliError::Validation(format!("sample {i} outside a dataset of {}", ds.len())));
        }
        requested.iter().copied().zip(predict(&model, &ds, &requested)?).collect()
    };
    let out = output_dir(cfg)?;
    let maps_dir = out.join("saliency");
    std::fs::create_dir_all(&maps_dir)?;
    let model64 = model.cast::<f64>();
    let layout = variant.layout();
    let names = ds.lead_names();
    for chunk in targets.chunks(SALIENCY_BATCH) {
        let inputs: Vec<_> = chunk.iter().map(|&(i, _)| ds.signal(i).reshape(layout)).collect();
        let refs: Vec<_> = inputs.iter().collect();
        let classes: Vec<usize> = chunk.iter().map(|&(_, c)| c).collect();
        let maps = match method {
            Method::GuidedBackprop => guided_backprop_batch(&model64, &refs, &classes)?,
            Method::GradCam => gradcam_batch(&model64, &refs, &classes)?,
            Method::GuidedGradCam => guided_gradcam_batch(&model64, &refs, &classes, opts)?,
        };
        for (&(i, c), map) in chunk.iter().zip(&maps) {
            map.write_csv(&maps_dir.join(format!("sample_{i}_class_{c}_{method}.csv")), &names)?;
        }
    }
    cfg.write(&out)?;
    println!("{method}: {} saliency maps in {}", targets.len(), maps_dir.display());
    Ok(())
}

fn cluster(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = read_dataset(&existing(cfg, "data")?)?;
    let mut classes = cfg.usize_list("classes")?;
    if classes.is_empty() {
        classes = (0..ds.class_count()).collect();
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= ds.class_count()) {
        return Err(Error::ClassOutOfRange {
            class: c,
            class_count: ds.class_count(),
        }
        .into());
    }
    let candidates = cfg.usize_list("k")?;
    if candidates.is_empty() || candidates.iter().any(|&k| k < 2) {
        return Err(CliError::Validation("k must list cluster counts of at least 2".into()));
    }
    let max_k = *candidates.iter().max().expect("non-empty");
    let window = if cfg.str("window").is_empty() {
        None
    } else {
        Some(cfg.usize("window")?)
    };
    let seed = cfg.u64("seed")?;
    let out = output_dir(cfg)?;
    let by_class = ds.class_indices();
    let mut summary = csv::Writer::from_path(out.join("cluster_summary.csv"))?;
    summary.write_record(["class", "samples", "status", "k", "silhouette", "cost", "medoids"])?;
    for &c in &classes {
        let ids = &by_class[c];
        if ids.len() < max_k + 1 {
            eprintln!(
                "warning: class {c} has {} samples, fewer than {}; skipped",
                ids.len(),
                max_k + 1
            );
            summary.write_record([c.to_string(), ids.len().to_string(), "skipped".into(), String::new(), String::new(), String::new(), String::new()])?;
            continue;
        }
        let signals: Vec<_> = ids.iter().map(|&i| ds.signal(i)).collect();
        let dist = DistanceMatrix::dtw(&signals, window)?;
        let result = select_k_from_matrix(&dist, &candidates, seed)?;
        result.write_csv(&out.join(format!("cluster_class_{c}.csv")), &dist, ids)?;
        let medoids: Vec<String> = result.medoids.iter().map(|&m| ids[m].to_string()).collect();
        let sil = result.silhouette.unwrap_or(f64::NAN);
        summary.write_record([
            c.to_string(),
            ids.len().to_string(),
            "ok".into(),
            result.k.to_string(),
            format!("{sil:.6}"),
            format!("{:.6}", result.cost),
            medoids.join(";"),
        ])?;
        println!("class {c}: k={} silhouette {sil:.4}", result.k);
    }
    summary.flush()?;
    cfg.write(&out)?;
    Ok(())
}

fn lead_importance_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, ds, split) = load_model_and_data(cfg)?;
    if model.variant() != Variant::Image2D {
        return Err(CliError::Validation(format!(
            "lead importance needs an image2d model, got {}",
            model.variant()
        )));
    }
    let targets = correct_samples(&model, &ds, &split.test)?;
    let model64 = model.cast::<f64>();
    let layout = model.variant().layout();
    let opts = CombineOptions {
        interpolate: false,
        abs: true,
    };
    let mut tables: Vec<(Vec<f64>, usize)> = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(SALIENCY_BATCH) {
        let inputs: Vec<_> = chunk.iter().map(|&(i, _)| ds.signal(i).reshape(layout)).collect();
        let refs: Vec<_> = inputs.iter().collect();
        let classes: Vec<usize> = chunk.iter().map(|&(_, c)| c).collect();
        for (map, &c) in guided_gradcam_batch(&model64, &refs, &classes, opts)?.into_iter().zip(&classes) {
            tables.push((map.lead_time_table().expect("image maps cover every lead"), c));
        }
    }
    let samples: Vec<SampleSaliency<'_>> = tables
        .iter()
        .map(|(t, c)| SampleSaliency {
            table: t,
            label: *c,
            predicted: *c,
        })
        .collect();
    let li = lead_importance(&samples, ds.class_count(), ds.time_steps(), ds.leads())?;
    let ranks = match ventricle_rank(&li, ds.ventricles()) {
        Err(Error::EmptyGroup(msg)) => {
            eprintln!("warning: {msg}; no ventricle ranking");
            Vec::new()
        }
        r => r?,
    };
    let names = ds.lead_names();
    let out = output_dir(cfg)?;
    li.write_csv(&out.join("lead_importance.csv"), &names, &ranks)?;
    let mut w = csv::Writer::from_path(out.join("ventricle_ranking.csv"))?;
    w.write_record(["ventricle", "rank", "lead", "importance"])?;
    for v in &ranks {
        for (r, &lead) in v.ranking.iter().enumerate() {
            w.write_record([
                v.ventricle.short().to_string(),
                (r + 1).to_string(),
                names[lead].clone(),
                format!("{:.9}", v.row[lead]),
            ])?;
        }
        let top: Vec<&str> = v.ranking.iter().take(3).map(|&k| names[k].as_str()).collect();
        println!("{}: {} samples, top leads {}", v.ventricle.short(), v.samples, top.join(", "));
    }
    w.flush()?;
    cfg.write(&out)?;
    Ok(())
}

/// One method's answers, keyed by sample.
#[derive(Debug)]
struct MethodFile {
    labels: BTreeMap<usize, usize>,
    predictions: BTreeMap<usize, Prediction>,
    scheme: Option<String>,
}

fn read_method_file(path: &Path) -> Result<MethodFile, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let sample = col("sample")
        .ok_or_else(|| CliError::Validation(format!("{}: no sample column", path.display())))?;
    let (kind_col, label_col, scheme_col) = match (col("predicted"), col("region")) {
        (Some(p), _) => (p, col("label"), None),
        (None, Some(reg)) => (reg, col("label"), col("scheme")),
        (None, None) => {
            return Err(CliError::Validation(format!(
                "{}: expected a predicted or region column",
                path.display()
            )))
        }
    };
    let is_region = col("predicted").is_none();
    let mut file = MethodFile {
        labels: BTreeMap::new(),
        predictions: BTreeMap::new(),
        scheme: None,
    };
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).map(str::trim).unwrap_or("");
        let bad = |what: &str| CliError::Validation(format!("{}: bad {what} in row {:?}", path.display(), rec));
        let i: usize = field(sample).parse().map_err(|_| bad("sample"))?;
        let pred = if is_region {
            Prediction::Region(field(kind_col).to_string())
        } else {
            Prediction::Class(field(kind_col).parse().map_err(|_| bad("predicted class"))?)
        };
        if file.predictions.insert(i, pred).is_some() {
            return Err(bad("duplicate sample"));
        }
        if let Some(lc) = label_col {
            file.labels.insert(i, field(lc).parse().map_err(|_| bad("label"))?);
        }
        if let Some(sc) = scheme_col {
            let s = field(sc).to_string();
            match &file.scheme {
                Some(prev) if *prev != s => return Err(bad("scheme (mixed schemes)")),
                _ => file.scheme = Some(s),
            }
        }
    }
    Ok(file)
}

fn compare(cfg: &RunConfig) -> Result<(), CliError> {
    let scheme = Scheme::parse(cfg.str("scheme"))?;
    let a = read_method_file(&existing(cfg, "predictions")?)?;
    let b = read_method_file(&existing(cfg, "baseline")?)?;
    for f in [&a, &b] {
        if let Some(s) = &f.scheme {
            if Scheme::parse(s)? != scheme {
                return Err(Error::SchemeMismatch(format!("baseline uses {s}, comparison uses {scheme}")).into());
            }
        }
    }
    if a.labels.len() != a.predictions.len() {
        return Err(CliError::Validation("the predictions file must carry a label for every sample".into()));
    }
    let samples: Vec<usize> = a.predictions.keys().copied().collect();
    let b_samples: Vec<usize> = b.predictions.keys().copied().collect();
    if samples != b_samples {
        return Err(CliError::Validation(format!(
            "the two files cover different samples ({} vs {})",
            samples.len(),
            b_samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(CliError::Validation("no samples to compare".into()));
    }
    for (i, l) in &b.labels {
        if a.labels[i] != *l {
            return Err(CliError::Validation(format!("sample {i} has label {} and {l} in the two files", a.labels[i])));
        }
    }
    let truth: Vec<usize> = samples.iter().map(|i| a.labels[i]).collect();
    let pa: Vec<Prediction> = samples.iter().map(|i| a.predictions[i].clone()).collect();
    let pb: Vec<Prediction> = samples.iter().map(|i| b.predictions[i].clone()).collect();
    let cmp = dt_comparison(&truth, &pa, &pb, scheme)?;

    let out = output_dir(cfg)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record(["sample", "label", "regions", "a", "a_correct", "b", "b_correct"])?;
    for (k, &i) in samples.iter().enumerate() {
        let regions: BTreeSet<&str> = remap_region(truth[k], scheme)?;
        w.write_record([
            i.to_string(),
            truth[k].to_string(),
            regions.into_iter().collect::<Vec<_>>().join(";"),
            pa[k].label(),
            u8::from(cmp.correct_a[k]).to_string(),
            pb[k].label(),
            u8::from(cmp.correct_b[k]).to_string(),
        ])?;
    }
    w.flush()?;
    let t = cmp.table;
    let mut s = String::new();
    let _ = writeln!(s, "scheme={scheme}");
    let _ = writeln!(s, "samples={}", samples.len());
    let _ = writeln!(s, "accuracy_a={:.4}", cmp.accuracy_a());
    let _ = writeln!(s, "accuracy_b={:.4}", cmp.accuracy_b());
    let _ = writeln!(s, "table={},{},{},{}", t.a, t.b, t.c, t.d);
    let _ = writeln!(s, "p_value={:.6e}", cmp.p_value);
    let _ = writeln!(s, "alpha={ALPHA}");
    let _ = writeln!(s, "significant={}", cmp.significant());
    std::fs::write(out.join("comparison_summary.txt"), &s)?;
    cfg.write(&out)?;
    println!(
        "{scheme}: A {}/{} correct, B {}/{} correct, one-sided Fisher p = {:.3e} ({})",
        t.a,
        t.a + t.b,
        t.c,
        t.c + t.d,
        cmp.p_value,
        if cmp.significant() { "A significantly better" } else { "not significant" }
    );
    Ok(())
}

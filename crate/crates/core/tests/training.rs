//! Training loop behaviour on small noiseless problems.

use apfcn_core::datagen::{generate_dataset, GeneratorConfig};
use apfcn_core::fcn::{build_model, FcnModel, LayerSpec, ModelConfig, Variant};
use apfcn_core::signal::{stratified_split, LabeledDataset, SplitIndices, SplitRatios};
use apfcn_core::trainer::{evaluate, fine_tune, fit, predict_proba, TrainConfig};

fn toy() -> (LabeledDataset, SplitIndices) {
    let cfg = GeneratorConfig {
        samples_per_class: 40,
        class_count: 3,
        t: 40,
        l: 2,
        noise_std: 0.0,
        jitter: 0,
        seed: 11,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let split = stratified_split(&ds, SplitRatios::default(), 0).unwrap();
    (ds, split)
}

fn small_model(variant: Variant, seed: u64) -> FcnModel<f32> {
    let layers = match variant {
        Variant::Stacked1D => vec![LayerSpec::new(8, 8, 2), LayerSpec::new(8, 5, 1), LayerSpec::new(8, 5, 2)],
        _ => vec![LayerSpec::new(8, 5, 1), LayerSpec::new(8, 5, 1), LayerSpec::new(8, 5, 1)],
    };
    build_model(ModelConfig::new(variant, 3, 40, 2).with_layers(layers), seed).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-2,
        patience: None,
        ..TrainConfig::default()
    }
}

fn val_loss(model: &FcnModel<f32>, ds: &LabeledDataset, split: &SplitIndices) -> f64 {
    let p = predict_proba(model, ds, &split.val).unwrap();
    split.val.iter().enumerate().map(|(k, &i)| -p[k * 3 + ds.label(i)].max(1e-12).ln()).sum::<f64>() / split.val.len() as f64
}

#[test]
fn noiseless_toy_set_is_fit_perfectly() {
    let (ds, split) = toy();
    for variant in Variant::ALL {
        let (model, history) = fit(small_model(variant, 1), &ds, &split, &cfg(20)).unwrap();
        assert_eq!(history.len(), 20);
        let m = evaluate(&model, &ds, &split.train).unwrap();
        eprintln!("{variant}: train accuracy {:.1}% (best epoch {})", m.accuracy(), history.best_epoch);
        assert_eq!(m.accuracy(), 100.0, "{variant}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (ds, split) = toy();
    let start = small_model(Variant::MultiChannel1D, 2);
    let config = TrainConfig { learning_rate: 0.0, ..cfg(3) };
    let (trained, history) = fit(start.clone(), &ds, &split, &config).unwrap();
    assert_eq!(history.len(), 3);
    assert_eq!(trained.all_arrays(), start.all_arrays());
}

#[test]
fn early_stopping_truncates_history() {
    let (ds, split) = toy();
    let config = TrainConfig { learning_rate: 0.05, patience: Some(2), ..cfg(40) };
    let (_, history) = fit(small_model(Variant::Image2D, 3), &ds, &split, &config).unwrap();
    eprintln!("stopped after {} epochs, best {}", history.len(), history.best_epoch);
    assert!(history.len() < 40);
    assert_eq!(history.len() - history.best_epoch, 2);
    assert_eq!(history.records.last().unwrap().epoch, history.len());
}

#[test]
fn fit_is_bit_reproducible() {
    let (ds, split) = toy();
    let a = fit(small_model(Variant::Stacked1D, 4), &ds, &split, &cfg(3)).unwrap();
    let b = fit(small_model(Variant::Stacked1D, 4), &ds, &split, &cfg(3)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn fine_tune_freezes_convolutional_blocks() {
    let (ds, split) = toy();
    let (base, _) = fit(small_model(Variant::MultiChannel1D, 5), &ds, &split, &cfg(3)).unwrap();
    let before = val_loss(&base, &ds, &split);
    let (tuned, history) = fine_tune(base.clone(), &ds, &split, &cfg(30)).unwrap();
    assert_eq!(tuned.blocks, base.blocks);
    assert_ne!(tuned.dense, base.dense);
    let after = val_loss(&tuned, &ds, &split);
    eprintln!("validation loss before/after fine-tuning: {before:.5} / {after:.5} (best epoch {})", history.best_epoch);
    assert!(after <= before + 1e-9);

    let frozen = TrainConfig { learning_rate: 0.0, ..cfg(2) };
    let (same, _) = fine_tune(base.clone(), &ds, &split, &frozen).unwrap();
    assert_eq!(same.dense, base.dense);
}

//! Nearest-neighbour oracle on generated data.

use apfcn_core::datagen::{generate_dataset, GeneratorConfig};
use apfcn_core::signal::{stratified_split, LabeledDataset, SplitRatios};

fn one_nn_accuracy(ds: &LabeledDataset, seed: u64) -> f64 {
    let split = stratified_split(ds, SplitRatios::default(), seed).unwrap();
    let mut correct = 0;
    for &q in &split.test {
        let qv = &ds.signal(q).values();
        let mut best = (f64::INFINITY, usize::MAX);
        for &r in &split.train {
            let d: f64 = qv
                .iter()
                .zip(ds.signal(r).values())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            if d < best.0 {
                best = (d, r);
            }
        }
        if ds.label(best.1) == ds.label(q) {
            correct += 1;
        }
    }
    correct as f64 / split.test.len() as f64
}

#[test]
fn default_config_is_nearest_neighbour_separable() {
    let ds = generate_dataset(&GeneratorConfig::default()).unwrap();
    assert_eq!(ds.len(), 2400);
    let acc = one_nn_accuracy(&ds, 0);
    eprintln!("1-NN held-out accuracy at default noise: {acc:.4}");
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn noiseless_unjittered_is_perfectly_separable() {
    let cfg = GeneratorConfig { samples_per_class: 10, noise_std: 0.0, jitter: 0, ..GeneratorConfig::default() };
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!(one_nn_accuracy(&ds, 1), 1.0);
}

#[test]
fn accuracy_degrades_with_noise() {
    let accs: Vec<f64> = [0.05, 0.5, 2.0]
        .iter()
        .map(|&noise_std| {
            let cfg = GeneratorConfig { samples_per_class: 40, noise_std, ..GeneratorConfig::default() };
            one_nn_accuracy(&generate_dataset(&cfg).unwrap(), 0)
        })
        .collect();
    eprintln!("1-NN accuracy at noise 0.05/0.5/2.0: {accs:?}");
    assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "{accs:?}");
}

//! Analytic gradients against central finite differences in f64.

use apfcn_core::fcn::network::{apply_running_stats, sample_in_layout};
use apfcn_core::fcn::{backward, build_model, forward, input_batch, FcnModel, LayerSpec, Mode, ModelConfig, Variant};
use apfcn_core::signal::{EcgSignal, ReshapedInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 8;
const L: usize = 2;
const C: usize = 3;

fn tiny_config(variant: Variant) -> ModelConfig {
    let layers = match variant {
        Variant::Stacked1D => vec![LayerSpec::new(2, 4, 2), LayerSpec::new(2, 3, 1), LayerSpec::new(2, 2, 2)],
        Variant::MultiChannel1D => vec![LayerSpec::new(2, 3, 1), LayerSpec::new(2, 2, 1), LayerSpec::new(2, 3, 1)],
        Variant::Image2D => vec![LayerSpec::new(2, 2, 1), LayerSpec::new(2, 3, 1), LayerSpec::new(2, 2, 1)],
    };
    ModelConfig::new(variant, C, T, L).with_layers(layers)
}

fn random_model(variant: Variant, seed: u64) -> (FcnModel<f64>, Vec<ReshapedInput>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(variant);
    let mut model = build_model::<f64>(cfg, seed).unwrap();
    // move away from the zero-bias/unit-scale initialization
    for arr in model.trainable_mut() {
        for v in arr.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = 3;
    let inputs: Vec<ReshapedInput> = (0..batch)
        .map(|_| {
            let v = (0..T * L).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EcgSignal::new(T, L, v).unwrap().reshape(variant.layout())
        })
        .collect();
    let labels = (0..batch).map(|_| rng.random_range(0..C)).collect();
    (model, inputs, labels)
}

fn loss(model: &FcnModel<f64>, inputs: &[&ReshapedInput], input_override: Option<&[f64]>, labels: &[usize]) -> f64 {
    let mut x = input_batch::<f64>(&model.config, inputs).unwrap();
    if let Some(data) = input_override {
        x.data.copy_from_slice(data);
    }
    let cache = forward(model, x, Mode::Train).unwrap();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        total -= cache.probs_row(b)[y].max(1e-12).ln();
    }
    total / labels.len() as f64
}

/// Relative error with a floor on the denominator: central differences at
/// h = 1e-5 carry round-off near 1e-11, so gradients below 1e-5 in
/// magnitude are compared on that absolute scale instead.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn check(variant: Variant, seed: u64) -> f64 {
    let (model, inputs, labels) = random_model(variant, seed);
    let refs: Vec<&ReshapedInput> = inputs.iter().collect();
    let x = input_batch::<f64>(&model.config, &refs).unwrap();
    let cache = forward(&model, x.clone(), Mode::Train).unwrap();
    let (grads, dx) = backward(&model, &cache, &labels).unwrap();

    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let base = model.trainable()[k][i];
            let h = 1e-5 * base.abs().max(1.0);
            let mut plus = model.clone();
            plus.trainable_mut()[k][i] = base + h;
            let mut minus = model.clone();
            minus.trainable_mut()[k][i] = base - h;
            let num = (loss(&plus, &refs, None, &labels) - loss(&minus, &refs, None, &labels)) / (2.0 * h);
            let e = rel_err(g[i], num);
            assert!(e < 1e-5, "{variant} seed {seed}: param array {k} index {i}: analytic {} vs numeric {num}", g[i]);
            worst = worst.max(e);
        }
    }
    for i in 0..x.data.len() {
        let h = 1e-5 * x.data[i].abs().max(1.0);
        let mut p = x.data.clone();
        p[i] += h;
        let mut m = x.data.clone();
        m[i] -= h;
        let num = (loss(&model, &refs, Some(&p), &labels) - loss(&model, &refs, Some(&m), &labels)) / (2.0 * h);
        let e = rel_err(dx.data[i], num);
        assert!(e < 1e-5, "{variant} seed {seed}: input {i}: analytic {} vs numeric {num}", dx.data[i]);
        worst = worst.max(e);
    }
    worst
}

#[test]
fn all_variants_match_finite_differences() {
    for variant in Variant::ALL {
        for seed in 0..5 {
            let worst = check(variant, 100 + seed);
            eprintln!("{variant} seed {}: worst relative error {worst:.2e}", 100 + seed);
            assert!(worst < 1e-5);
        }
    }
}

#[test]
fn confident_correct_prediction_has_zero_logit_gradient() {
    let (mut model, inputs, _) = random_model(Variant::MultiChannel1D, 1);
    // zero dense weights and a huge bias on class 1 saturate the softmax
    model.dense.weights.iter_mut().for_each(|w| *w = 0.0);
    model.dense.bias = vec![-1000.0, 1000.0, -1000.0];
    let refs: Vec<&ReshapedInput> = inputs.iter().collect();
    let cache = forward(&model, input_batch(&model.config, &refs).unwrap(), Mode::Train).unwrap();
    let (grads, _) = backward(&model, &cache, &vec![1; refs.len()]).unwrap();
    assert!(grads.dense_bias.iter().all(|&g| g == 0.0));
    assert!(grads.dense_weights.iter().all(|&g| g == 0.0));
}

#[test]
fn duplicating_the_batch_leaves_mean_gradients_unchanged() {
    let (model, inputs, labels) = random_model(Variant::Stacked1D, 4);
    let refs: Vec<&ReshapedInput> = inputs.iter().collect();
    let cache = forward(&model, input_batch(&model.config, &refs).unwrap(), Mode::Train).unwrap();
    let (g1, _) = backward(&model, &cache, &labels).unwrap();
    let doubled: Vec<&ReshapedInput> = refs.iter().chain(refs.iter()).copied().collect();
    let labels2: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
    let cache2 = forward(&model, input_batch(&model.config, &doubled).unwrap(), Mode::Train).unwrap();
    let (g2, _) = backward(&model, &cache2, &labels2).unwrap();
    for (a, b) in g1.slices().iter().zip(g2.slices()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn running_statistics_update_only_through_apply() {
    let (mut model, inputs, _) = random_model(Variant::Image2D, 2);
    let refs: Vec<&ReshapedInput> = inputs.iter().collect();
    let before = model.clone();
    let cache = forward(&model, input_batch(&model.config, &refs).unwrap(), Mode::Train).unwrap();
    assert_eq!(model, before);
    apply_running_stats(&mut model, &cache);
    assert_ne!(model.blocks[0].running_mean, before.blocks[0].running_mean);
    assert!(model.blocks.iter().all(|b| b.running_var.iter().all(|&v| v >= 0.0)));
    // layout conversion of input-shaped tensors is lossless
    let x = input_batch::<f64>(&model.config, &refs).unwrap();
    for (b, r) in refs.iter().enumerate() {
        let back: Vec<f32> = sample_in_layout(&model.config, &x, b).iter().map(|&v| v as f32).collect();
        assert_eq!(back, r.data);
    }
}

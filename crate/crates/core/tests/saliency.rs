//! Saliency maps on constructed and random models.

use apfcn_core::fcn::{build_model, logit_backward, forward, input_batch, Activation, FcnModel, LayerSpec, Mode, ModelConfig, ReluGate, Variant};
use apfcn_core::fcn::network::sample_in_layout;
use apfcn_core::signal::{EcgSignal, ReshapedInput};
use apfcn_core::xai::{gradcam, guided_backprop, guided_gradcam, guided_gradcam_combine, CombineOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One 1×1 convolution with unit weight and identity batch norm, so the
/// logit is `w · ReLU(x)`.
fn scalar_chain(w: f64) -> FcnModel<f64> {
    let cfg = ModelConfig::new(Variant::MultiChannel1D, 1, 1, 1).with_layers(vec![LayerSpec::new(1, 1, 1)]);
    let mut m = build_model::<f64>(cfg, 0).unwrap();
    let b = &mut m.blocks[0];
    b.weights = vec![1.0];
    b.bias = vec![0.0];
    b.gamma = vec![1.0];
    b.beta = vec![0.0];
    b.running_mean = vec![0.0];
    b.running_var = vec![1.0 - m.config.bn.epsilon];
    m.dense.weights = vec![w];
    m.dense.bias = vec![0.0];
    m
}

fn scalar_input(x: f32) -> ReshapedInput {
    EcgSignal::new(1, 1, vec![x]).unwrap().reshape(Variant::MultiChannel1D.layout())
}

#[test]
fn scalar_chains() {
    let neg = guided_backprop(&scalar_chain(-1.0), &scalar_input(0.7), 0).unwrap();
    assert_eq!(neg.scores, vec![0.0]);
    let pos = guided_backprop(&scalar_chain(2.5), &scalar_input(0.7), 0).unwrap();
    assert!((pos.scores[0] - 2.5).abs() < 1e-12, "{:?}", pos.scores);
}

const T: usize = 16;
const L: usize = 3;

fn random_model(variant: Variant, activation: Activation, seed: u64) -> (FcnModel<f64>, Vec<ReshapedInput>) {
    let layers = match variant {
        Variant::Stacked1D => vec![LayerSpec::new(4, 6, 3), LayerSpec::new(5, 3, 1), LayerSpec::new(4, 3, 2)],
        _ => vec![LayerSpec::new(4, 3, 1), LayerSpec::new(5, 3, 1), LayerSpec::new(4, 3, 1)],
    };
    let cfg = ModelConfig::new(variant, 4, T, L).with_layers(layers).with_activation(activation);
    let mut m = build_model::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut m.blocks {
        b.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        b.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        b.beta.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let inputs = (0..3)
        .map(|_| {
            let v = (0..T * L).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EcgSignal::new(T, L, v).unwrap().reshape(variant.layout())
        })
        .collect();
    (m, inputs)
}

#[test]
fn relu_free_model_gives_plain_gradient() {
    for variant in Variant::ALL {
        let (m, inputs) = random_model(variant, Activation::Identity, 7);
        for (k, x) in inputs.iter().enumerate() {
            let class = k % 4;
            let g = guided_backprop(&m, x, class).unwrap();
            let cache = forward(&m, input_batch(&m.config, &[x]).unwrap(), Mode::Inference).unwrap();
            let out = logit_backward(&m, &cache, class, ReluGate::Standard).unwrap();
            let plain = sample_in_layout(&m.config, out.input.as_ref().unwrap(), 0);
            for (a, b) in g.scores.iter().zip(&plain) {
                assert!((a - b).abs() <= 1e-10, "{variant}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn dimensions_follow_the_variant() {
    let expected_cam = |v: Variant, m: &FcnModel<f64>| match v {
        Variant::Stacked1D => vec![m.last_spatial().0],
        Variant::MultiChannel1D => vec![T],
        Variant::Image2D => vec![T, L, 1],
    };
    for variant in Variant::ALL {
        let (m, inputs) = random_model(variant, Activation::Relu, 3);
        for x in &inputs {
            for class in 0..4 {
                let g = guided_backprop(&m, x, class).unwrap();
                assert_eq!(g.dims, x.dims());
                assert_eq!(g.scores.len(), T * L);
                let c = gradcam(&m, x, class).unwrap();
                assert_eq!(c.dims, expected_cam(variant, &m));
                assert_eq!(c.scores.len(), c.dims.iter().product::<usize>());
                assert!(c.scores.iter().all(|&v| v >= 0.0));
                let plain = guided_gradcam(&m, x, class, CombineOptions::default());
                if variant == Variant::Image2D {
                    let gg = plain.unwrap();
                    for ((p, a), b) in gg.scores.iter().zip(&g.scores).zip(&c.scores) {
                        assert_eq!(*p, a * b);
                    }
                } else {
                    assert!(plain.is_err());
                    let opts = CombineOptions { interpolate: true, abs: true };
                    let gg = guided_gradcam(&m, x, class, opts).unwrap();
                    assert_eq!(gg.dims, x.dims());
                    assert_eq!(gg, guided_gradcam_combine(&g, &c, opts).unwrap());
                    assert!(gg.scores.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}

#[test]
fn out_of_range_class_is_rejected() {
    let (m, inputs) = random_model(Variant::Image2D, Activation::Relu, 1);
    assert!(guided_backprop(&m, &inputs[0], 4).is_err());
    assert!(gradcam(&m, &inputs[0], 9).is_err());
}

#[test]
fn default_image_model_gradcam_matches_signal_grid() {
    let m = build_model::<f32>(ModelConfig::new(Variant::Image2D, 24, 200, 12), 0).unwrap();
    let v = (0..2400).map(|k| ((k % 37) as f32 / 37.0) - 0.5).collect();
    let x = EcgSignal::new(200, 12, v).unwrap().reshape(Variant::Image2D.layout());
    let c = gradcam(&m, &x, 5).unwrap();
    assert_eq!(c.dims, vec![200, 12, 1]);
    assert_eq!(c.scores.len(), 2400);
}

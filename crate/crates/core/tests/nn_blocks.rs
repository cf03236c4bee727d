mod common;

use common::{check, randn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenegan::nn::*;
use scenegan::params::{NormMode, ParamSet};
use voxgrad::{backward, Tensor, Var};

fn conv_spec(kind: LayerKind, cin: usize, cout: usize, factor: [usize; 3]) -> LayerSpec {
    LayerSpec::resampling(kind, cin, cout, factor)
}

#[test]
fn unit_scale_layer_equals_plain_convolution() {
    // fan_in = 1 * 1 * 1 * 2 = 2, so c = 1.
    let spec = LayerSpec::pointwise(2, 3);
    let w = randn(&[1, 1, 1, 2, 3], 1);
    let params = EqualizedConvParams { raw_weight: Var::constant(w.clone()), bias: Var::constant(Tensor::zeros(&[3])), fan_in: spec.fan_in() };
    let x = Var::constant(randn(&[1, 2, 2, 2, 2], 2));
    let y = equalized_forward(&params, &x, &spec).unwrap();
    let plain = x.conv3d(&Var::constant(w), [1; 3], [0; 3]).unwrap();
    assert_eq!(y.value().max_abs_diff(plain.value()).unwrap(), 0.0);
}

#[test]
fn runtime_scaling_matches_prescaled_weights() {
    for (kind, factor) in [(LayerKind::Same, [1; 3]), (LayerKind::Downsample, [2, 2, 1]), (LayerKind::Upsample, [2, 3, 1])] {
        let spec = conv_spec(kind, 3, 4, factor);
        let w = randn(&spec.weight_shape(), 3);
        let b = randn(&[4], 4);
        let params = EqualizedConvParams { raw_weight: Var::constant(w.clone()), bias: Var::constant(b.clone()), fan_in: spec.fan_in() };
        let x = Var::constant(randn(&[2, 4, 4, 4, 3], 5));
        let y = equalized_forward(&params, &x, &spec).unwrap();
        let c = equalized_scale(spec.fan_in()).unwrap();
        let pre = Var::constant(w.map(|v| v / c));
        let conv = match kind {
            LayerKind::Upsample => x.conv3d_transpose(&pre, factor, spec.padding()).unwrap(),
            _ => x.conv3d(&pre, factor, spec.padding()).unwrap(),
        };
        let expected = conv.add_channel_bias(&Var::constant(b)).unwrap();
        assert!(y.value().max_abs_diff(expected.value()).unwrap() < 1e-12, "{kind:?}");
    }
}

#[test]
fn raw_weight_gradient_is_effective_gradient_over_c() {
    let spec = conv_spec(LayerKind::Downsample, 2, 3, [2; 3]);
    let w = randn(&spec.weight_shape(), 6);
    let c = equalized_scale(spec.fan_in()).unwrap();
    let x = Var::constant(randn(&[1, 4, 4, 4, 2], 7));
    let probe = randn(&[1, 2, 2, 2, 3], 8);

    let raw = Var::parameter(w.clone());
    let params = EqualizedConvParams { raw_weight: raw.clone(), bias: Var::constant(Tensor::zeros(&[3])), fan_in: spec.fan_in() };
    let loss = equalized_forward(&params, &x, &spec).unwrap().mul_const(&probe).unwrap().sum().unwrap();
    let g_raw = backward(&loss).unwrap().get(&raw).unwrap().clone();

    let eff = Var::parameter(w.map(|v| v / c));
    let loss = x.conv3d(&eff, [2; 3], spec.padding()).unwrap().mul_const(&probe).unwrap().sum().unwrap();
    let g_eff = backward(&loss).unwrap().get(&eff).unwrap().clone();

    for (a, e) in g_raw.data().iter().zip(g_eff.data()) {
        let expected = e / c;
        assert!((a - expected).abs() <= 1e-10 * expected.abs().max(1e-12), "{a} vs {expected}");
    }
}

#[test]
fn pixelwise_norm_scale_invariance() {
    let a = randn(&[3, 2, 2, 2, 8], 9);
    let n1 = pixelwise_norm(&Var::constant(a.clone()), 1e-8).unwrap();
    let n10 = pixelwise_norm(&Var::constant(a.map(|v| 10.0 * v)), 1e-8).unwrap();
    assert!(n1.value().max_abs_diff(n10.value()).unwrap() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixelwise_norm_mean_square_is_bounded(values in prop::collection::vec(-50.0f64..50.0, 1..24), eps in 1e-10f64..1e-2) {
        let n = values.len();
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let out = pixelwise_norm(&Var::constant(Tensor::new(&[1, n], values).unwrap()), eps).unwrap();
        let ms = out.value().data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!(ms <= 1.0 + 1e-12);
        if rms >= 1.0 {
            prop_assert!((ms - 1.0).abs() < 1e-6 + eps);
        }
    }

    #[test]
    fn pixelwise_norm_preserves_finiteness(values in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let n = values.len();
        let out = pixelwise_norm(&Var::constant(Tensor::new(&[1, n], values).unwrap()), 1e-8).unwrap();
        prop_assert!(out.value().all_finite());
    }
}

fn block_specs(channels: usize) -> (LayerSpec, LayerSpec) {
    let conv = LayerSpec { kernel: [3; 3], ..LayerSpec::pointwise(channels, channels) }.with_norm(NormKind::BatchNorm, 1e-5);
    (conv.clone().with_activation(Activation::LeakyRelu(0.2)), conv)
}

fn block_params(channels: usize, seed: u64) -> ParamSet {
    let (a, b) = block_specs(channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_layer(&a, "blk.a", &mut rng, &mut p).unwrap();
    init_layer(&b, "blk.b", &mut rng, &mut p).unwrap();
    p
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let (a, b) = block_specs(64);
    let mut p = block_params(64, 10);
    // Zero the final affine scale and shift so the branch outputs exactly 0.
    for e in p.iter_mut().filter(|e| e.name == "blk.b.gamma" || e.name == "blk.b.beta") {
        e.value = Tensor::zeros(e.value.shape());
    }
    let x = randn(&[1, 10, 6, 10, 64], 11);
    let bind = p.bind(false, NormMode::Train);
    let y = resnet_block(&Var::constant(x.clone()), "blk", &a, &b, &bind).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.value().bit_eq(&x));
}

#[test]
fn residual_block_gradient_matches_finite_differences() {
    let (a, b) = block_specs(2);
    let p = block_params(2, 12);
    let probe = randn(&[2, 3, 2, 3, 2], 13);
    let f = |x: &Var| {
        let bind = p.bind(false, NormMode::Train);
        Ok(resnet_block(x, "blk", &a, &b, &bind)?.mul_const(&probe)?.sum()?)
    };
    let report = check(f, &randn(&[2, 3, 2, 3, 2], 14), 1e-5, 1e-4);
    assert!(report.passed, "{report:?}");
}

#[test]
fn resnet_block_preserves_shape_and_finiteness() {
    let (a, b) = block_specs(4);
    let p = block_params(4, 15);
    let bind = p.bind(false, NormMode::Train);
    let x = Var::constant(randn(&[2, 3, 4, 5, 4], 16));
    let y = resnet_block(&x, "blk", &a, &b, &bind).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.value().all_finite());
}

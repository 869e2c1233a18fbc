use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference check of every parameter and every input entry of `net`
/// under the scalar loss `sum(proj * output)`.
fn grad_check(net: &Network, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamStore<f64> = net.init_params(&mut rng);
    // nonzero biases so relu kinks are not all at the same place
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for n in &names {
        if n.contains("bias") {
            for v in params.get_mut(n).unwrap().data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let input = random_tensor(&mut rng, net.input_shape().to_vec());
    let proj = random_tensor(&mut rng, net.output_shape().unwrap());
    let loss = |p: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let (y, _) = net.forward(p, x).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let (_, mut tape) = net.forward(&params, &input).unwrap();
    let back = net.backward(&params, &mut tape, &proj).unwrap();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for n in &names {
        let len = params.get(n).unwrap().len();
        for k in 0..len {
            let orig = params.get(n).unwrap().data()[k];
            params.get_mut(n).unwrap().data_mut()[k] = orig + eps;
            let up = loss(&params, &input);
            params.get_mut(n).unwrap().data_mut()[k] = orig - eps;
            let down = loss(&params, &input);
            params.get_mut(n).unwrap().data_mut()[k] = orig;
            check(back.grads.get(n).unwrap().data()[k], (up - down) / (2.0 * eps));
        }
    }
    let gin = back.input_grad.unwrap();
    for k in 0..input.len() {
        let mut x = input.clone();
        x.data_mut()[k] += eps;
        let up = loss(&params, &x);
        x.data_mut()[k] -= 2.0 * eps;
        let down = loss(&params, &x);
        check(gin.data()[k], (up - down) / (2.0 * eps));
    }
    worst
}

fn layer_cases() -> Vec<(&'static str, Network)> {
    vec![
        (
            "conv2d",
            Network::new(vec![2, 6, 5], vec![LayerSpec::conv3x3(2, 3)]).unwrap(),
        ),
        (
            "conv2d_strided",
            Network::new(
                vec![2, 7, 6],
                vec![LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }],
            )
            .unwrap(),
        ),
        (
            "dense",
            Network::new(vec![2, 2, 2], vec![LayerSpec::Dense { inputs: 8, units: 3 }]).unwrap(),
        ),
        ("relu", Network::new(vec![11], vec![LayerSpec::Relu]).unwrap()),
        ("sigmoid", Network::new(vec![7], vec![LayerSpec::Sigmoid]).unwrap()),
        (
            "maxpool2x2",
            Network::new(vec![2, 4, 5], vec![LayerSpec::MaxPool2x2]).unwrap(),
        ),
        (
            "globalavgpool",
            Network::new(vec![3, 3, 2], vec![LayerSpec::GlobalAvgPool]).unwrap(),
        ),
        (
            "residual_block",
            Network::new(vec![2, 4, 4], vec![LayerSpec::ResidualBlock { channels: 2, kernel: 3 }]).unwrap(),
        ),
        ("softmax", Network::new(vec![5], vec![LayerSpec::Softmax]).unwrap()),
    ]
}

#[test]
fn every_layer_kind_passes_gradient_check() {
    for (name, net) in layer_cases() {
        for seed in 0..10 {
            let err = grad_check(&net, seed);
            assert!(err <= 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn two_layer_net_gradient_check() {
    let net = Network::new(
        vec![6],
        vec![
            LayerSpec::Dense { inputs: 6, units: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 5, units: 3 },
            LayerSpec::Softmax,
        ],
    )
    .unwrap();
    for seed in 0..10 {
        assert!(grad_check(&net, 100 + seed) <= 1e-4);
    }
}

#[test]
fn identity_and_relu_forward() {
    let net = Network::new(vec![3], vec![]).unwrap();
    let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let params = ParamStore::<f64>::new();
    assert_eq!(net.forward(&params, &x).unwrap().0, x);

    let relu = Network::new(vec![3], vec![LayerSpec::Relu]).unwrap();
    let (y, tape) = relu.forward(&params, &x).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.len(), 1);
}

#[test]
fn relu_gradient_is_zero_for_negative_input() {
    let relu = Network::new(vec![2], vec![LayerSpec::Relu]).unwrap();
    let params = ParamStore::<f64>::new();
    let x = Tensor::new(vec![2], vec![-3.0, 4.0]).unwrap();
    let (_, mut tape) = relu.forward(&params, &x).unwrap();
    let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let back = relu.backward(&params, &mut tape, &g).unwrap();
    assert_eq!(back.input_grad.unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn dense_sum_loss_gradient_is_outer_product() {
    let net = Network::new(vec![3], vec![LayerSpec::Dense { inputs: 3, units: 2 }]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: ParamStore<f64> = net.init_params(&mut rng);
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let (_, mut tape) = net.forward(&params, &x).unwrap();
    let ones = Tensor::full(vec![2], 1.0);
    let back = net.backward(&params, &mut tape, &ones).unwrap();
    assert_eq!(
        back.grads.get("0.weight").unwrap().data(),
        &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]
    );
    assert_eq!(back.grads.get("0.bias").unwrap().data(), &[1.0, 1.0]);
}

/// Straightforward nested-loop convolution with explicit bounds checks.
#[allow(clippy::needless_range_loop)]
fn conv_oracle(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[((o * ci + c) * k + ky) * k + kx];
                            s += wv * input.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn all_ones_conv_matches_sliding_window_sums() {
    let net = Network::new(
        vec![1, 5, 5],
        vec![LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        }],
    )
    .unwrap();
    let mut params = ParamStore::new();
    params.insert("0.weight", Tensor::full(vec![1, 1, 3, 3], 1.0));
    params.insert("0.bias", Tensor::zeros(vec![1]));
    let x = Tensor::from_fn(vec![1, 5, 5], |i| i as f64);
    let (y, _) = net.forward(&params, &x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3]);
    let expected = conv_oracle(&x, params.get("0.weight").unwrap(), &[0.0], 1, 0);
    assert_eq!(y.data(), &expected[..]);
    // top-left window: 0+1+2+5+6+7+10+11+12
    assert_eq!(y.data()[0], 54.0);
}

#[test]
fn conv_matches_nested_loop_oracle_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k..k + 6);
        let w = rng.random_range(k..k + 6);
        let net = Network::new(
            vec![ci, h, w],
            vec![LayerSpec::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride,
                padding: pad,
            }],
        )
        .unwrap();
        let mut params: ParamStore<f64> = net.init_params(&mut rng);
        let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        *params.get_mut("0.bias").unwrap() = Tensor::new(vec![co], bias.clone()).unwrap();
        let x = random_tensor(&mut rng, vec![ci, h, w]);
        let (y, _) = net.forward(&params, &x).unwrap();
        let expected = conv_oracle(&x, params.get("0.weight").unwrap(), &bias, stride, pad);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let (_, net) = layer_cases().swap_remove(7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: ParamStore<f32> = net.init_params(&mut rng);
    let x = Tensor::from_fn(net.input_shape().to_vec(), |i| (i as f32 * 0.37).sin());
    let a = net.forward(&params, &x).unwrap().0;
    let b = net.forward(&params, &x).unwrap().0;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn tape_cannot_be_reused() {
    let net = Network::new(vec![2], vec![LayerSpec::Relu]).unwrap();
    let params = ParamStore::<f64>::new();
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let (y, mut tape) = net.forward(&params, &x).unwrap();
    net.backward(&params, &mut tape, &y).unwrap();
    assert!(tape.is_consumed());
    assert!(matches!(net.backward(&params, &mut tape, &y), Err(Error::State(_))));
}

#[test]
fn shape_errors_are_configuration_errors() {
    assert!(matches!(
        Network::new(vec![3, 8, 8], vec![LayerSpec::conv3x3(2, 4)]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Network::new(
            vec![1, 4, 4],
            vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: 1,
                padding: 0
            }]
        ),
        Err(Error::Config(_))
    ));
    let net = Network::new(vec![4], vec![LayerSpec::Relu]).unwrap();
    let x = Tensor::<f64>::zeros(vec![5]);
    assert!(matches!(net.forward(&ParamStore::new(), &x), Err(Error::Config(_))));
}

#[test]
fn non_finite_activation_reports_layer() {
    let net = Network::new(vec![2], vec![LayerSpec::Relu, LayerSpec::Dense { inputs: 2, units: 1 }]).unwrap();
    let mut params = ParamStore::new();
    params.insert("1.weight", Tensor::new(vec![1, 2], vec![f64::MAX, f64::MAX]).unwrap());
    params.insert("1.bias", Tensor::zeros(vec![1]));
    let x = Tensor::new(vec![2], vec![10.0, 10.0]).unwrap();
    match net.forward(&params, &x) {
        Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 1),
        other => panic!("expected numeric error, got {other:?}"),
    }
    let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(
        net.forward(&params, &bad),
        Err(Error::NonFinite { layer: 0, .. })
    ));
}

#[test]
fn output_shape_is_derived_statically() {
    let net = Network::new(
        vec![3, 16, 16],
        vec![
            LayerSpec::conv3x3(3, 4),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::ResidualBlock { channels: 4, kernel: 3 },
            LayerSpec::MaxPool2x2,
        ],
    )
    .unwrap();
    assert_eq!(net.output_shape().unwrap(), vec![4, 4, 4]);
    let params: ParamStore<f64> = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let (y, _) = net.forward(&params, &Tensor::full(vec![3, 16, 16], 0.5)).unwrap();
    assert_eq!(y.shape(), &[4, 4, 4]);
}

#[test]
fn checkpoint_export_import_round_trip() {
    let net = layer_cases().swap_remove(0).1;
    let mut params: ParamStore<f32> = net.init_params(&mut ChaCha8Rng::seed_from_u64(9));
    let grads = Grads::zeros_like(&params);
    params.adam_step(&grads, &AdamConfig::default()).unwrap();
    let mut ckpt = Checkpoint::new();
    params.export("trunk/", &mut ckpt);
    let restored = ParamStore::import(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), "trunk/", &params).unwrap();
    assert_eq!(restored, params);

    let other = Network::new(vec![2, 6, 5], vec![LayerSpec::conv3x3(2, 4)]).unwrap();
    let template: ParamStore<f32> = other.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(
        ParamStore::import(&ckpt, "trunk/", &template),
        Err(Error::Checkpoint(_))
    ));
}

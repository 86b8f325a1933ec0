//! Backward passes checked against central finite differences in f64.

use orewatch::nn::gradcheck::{check_loss, check_network, Probe};
use orewatch::nn::{Layer, LayerSpec, Mode, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Non-zero biases and non-trivial normalisation state, so no instance sits
/// on a degenerate all-zero output.
fn randomise_state(net: &mut Sequential<f64>, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        match layer {
            Layer::Dense(d) => d.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
            Layer::Conv1d(c) => c.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
            _ => {}
        }
        if let Layer::BatchNorm(b) = layer {
            for g in &mut b.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for v in &mut b.beta {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in &mut b.running_mean {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in &mut b.running_var {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }
}

fn linear_probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Probe {
    let n: usize = shape.iter().product();
    Probe::Linear((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Runs `INSTANCES` seeded checks of `specs` on inputs of `shape`.
fn check(specs: &[LayerSpec], shape: &[usize], probe: impl Fn(&[usize], &mut ChaCha8Rng) -> Probe, frozen: bool) {
    check_within(specs, shape, probe, frozen, TOL);
}

fn check_within(
    specs: &[LayerSpec],
    shape: &[usize],
    probe: impl Fn(&[usize], &mut ChaCha8Rng) -> Probe,
    frozen: bool,
    tol: f64,
) {
    let (mut skipped, mut compared) = (0, 0);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::<f64>::build(specs, &mut rng).unwrap();
        randomise_state(&mut net, &mut rng);
        net.set_batchnorm_frozen(frozen);
        let input = random_tensor(shape, &mut rng);
        let out_shape = net.output_shape(shape).unwrap();
        let p = probe(&out_shape, &mut rng);
        let report = check_network(&net, &input, &p, EPS).unwrap();
        assert!(report.max() < tol, "seed {seed}: {specs:?} relative error {report:?}");
        skipped += report.skipped;
        compared += report.compared;
    }
    // kink crossings must stay rare or the check would be vacuous
    assert!(skipped * 20 <= compared, "{skipped} skipped vs {compared} compared for {specs:?}");
}

#[test]
fn dense_gradients() {
    check(&[LayerSpec::dense(5, 3)], &[4, 5], linear_probe, false);
    check(
        &[LayerSpec::Dense { inputs: 6, outputs: 2, bias: false }],
        &[3, 6],
        linear_probe,
        false,
    );
}

#[test]
fn conv_gradients() {
    check(&[LayerSpec::conv1d(3, 2, 4)], &[2, 9, 2], linear_probe, false);
    check(
        &[LayerSpec::Conv1d { kernel: 4, in_channels: 1, out_channels: 3, stride: 2 }],
        &[3, 11],
        linear_probe,
        false,
    );
}

#[test]
fn batchnorm_gradients() {
    check(&[LayerSpec::batch_norm(3)], &[8, 3], linear_probe, false);
    check(&[LayerSpec::batch_norm(2)], &[3, 4, 2], linear_probe, false);
    check(&[LayerSpec::batch_norm(3)], &[5, 3], linear_probe, true);
}

#[test]
fn relu_gradients() {
    // Inputs within EPS of the kink make the difference quotient meaningless.
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Sequential::<f64>::build(&[LayerSpec::Relu], &mut rng).unwrap();
        let data = (0..12)
            .map(|_| {
                let v: f64 = rng.random_range(0.01..1.0);
                if rng.random::<bool>() { v } else { -v }
            })
            .collect();
        let input = Tensor::new(vec![3, 4], data).unwrap();
        let p = linear_probe(&[3, 4], &mut rng);
        assert!(check_network(&net, &input, &p, EPS).unwrap().max() < TOL);
    }
}

#[test]
fn relu_composition_gradients() {
    let specs = [LayerSpec::dense(6, 8), LayerSpec::Relu, LayerSpec::dense(8, 3)];
    check(&specs, &[5, 6], linear_probe, false);
}

#[test]
fn loss_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&[4, 5], &mut rng);
        let labels = (0..4).map(|_| rng.random_range(0..5)).collect();
        assert!(check_loss(&Probe::SoftmaxCrossEntropy(labels), &logits, EPS).unwrap() < TOL);

        let out = random_tensor(&[3, 6], &mut rng);
        let target = random_tensor(&[3, 6], &mut rng);
        assert!(check_loss(&Probe::CosineSa(target), &out, EPS).unwrap() < TOL);
    }
}

// Deep stacks put O(1) third derivatives behind gradient entries of
// O(1e-3), where the ε² truncation of a central difference at ε = 1e-3 alone
// is ~1e-4 relative. These end-to-end checks therefore use a looser bound.
const DEEP_TOL: f64 = 1e-3;

#[test]
fn composed_classifier_gradients() {
    let specs = [
        LayerSpec::conv1d(4, 1, 3),
        LayerSpec::batch_norm(3),
        LayerSpec::Relu,
        LayerSpec::conv1d(3, 3, 2),
        LayerSpec::batch_norm(2),
        LayerSpec::Relu,
        LayerSpec::dense(20, 4),
        LayerSpec::batch_norm(4),
        LayerSpec::Relu,
        LayerSpec::dense(4, 3),
    ];
    check_within(
        &specs,
        &[12, 15],
        |shape, rng| Probe::SoftmaxCrossEntropy((0..shape[0]).map(|_| rng.random_range(0..3)).collect()),
        false,
        DEEP_TOL,
    );
}

#[test]
fn composed_autoencoder_gradients() {
    let specs = [
        LayerSpec::dense(8, 5),
        LayerSpec::Relu,
        LayerSpec::dense(5, 3),
        LayerSpec::dense(3, 5),
        LayerSpec::Relu,
        LayerSpec::dense(5, 8),
    ];
    check_within(
        &specs,
        &[4, 8],
        |shape, rng| Probe::CosineSa(random_tensor(shape, rng)),
        false,
        DEEP_TOL,
    );
}

#[test]
fn batchnorm_training_output_is_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut layer = Layer::<f64>::build(LayerSpec::batch_norm(3), &mut rng).unwrap();
    let input = Tensor::new(
        vec![40, 3],
        (0..120).map(|i| 5.0 + 3.0 * ((i * 37 % 11) as f64)).collect(),
    )
    .unwrap();
    let (out, _) = layer.forward(&input, Mode::Train).unwrap();
    for ch in 0..3 {
        let col: Vec<f64> = out.data().iter().skip(ch).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / 40.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    // running stats moved one tenth of the way towards the batch stats
    if let Layer::BatchNorm(b) = &layer {
        let m = input.data().iter().step_by(3).sum::<f64>() / 40.0;
        assert!((b.running_mean[0] - 0.1 * m).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let specs = [LayerSpec::conv1d(3, 1, 2), LayerSpec::Relu, LayerSpec::dense(12, 2)];
    let a = Sequential::<f32>::build(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = Sequential::<f32>::build(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    let x = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
    assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
}

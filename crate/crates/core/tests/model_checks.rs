//! Gradient checks against finite differences, the pinned DeskNet size and an
//! overfitting sanity run.

mod common;

use rand::Rng;
use sevtrain::data::{batches, generate_synthetic, SyntheticSpec};
use sevtrain::metrics::evaluate;
use sevtrain::model::{
    build_reference_net, cross_entropy, forward, grad_input, grad_params, randomize_params, ArchDescriptor,
    Classifier, LabelDistribution, Network,
};
use sevtrain::objectives::{initial_state, train_step, Hyperparameters, Objective, TrainingStage};
use sevtrain::rng;


struct Case {
    net: Network<f64>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<LabelDistribution>,
}

fn random_label<R: Rng>(classes: usize, r: &mut R) -> LabelDistribution {
    let raw: Vec<f64> = (0..classes).map(|_| r.random::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    LabelDistribution::new(raw.iter().map(|v| v / sum).collect()).unwrap()
}

fn case(descriptor: ArchDescriptor, std: f64, seed: u64) -> Case {
    let mut r = rng::stream(seed);
    let mut net: Network<f64> = Network::from_descriptor(descriptor, seed).unwrap();
    randomize_params(net.params_mut(), std, &mut r);
    let classes = net.num_classes();
    let len = net.input_len();
    let inputs = (0..3).map(|_| (0..len).map(|_| r.random::<f64>()).collect()).collect();
    let targets = (0..3).map(|_| random_label(classes, &mut r)).collect();
    Case { net, inputs, targets }
}

/// Small smooth-enough nets checked at the nominal step.
fn small_cases() -> Vec<Case> {
    let mlp = |num_classes, input_shape, hidden| ArchDescriptor::Mlp {
        num_classes,
        input_shape,
        hidden,
    };
    vec![
        case(
            ArchDescriptor::Linear {
                num_classes: 3,
                input_shape: [3, 4, 4],
            },
            0.3,
            1,
        ),
        case(mlp(3, [3, 4, 4], 16), 0.3, 2),
        case(mlp(5, [1, 6, 6], 8), 0.3, 3),
        case(mlp(4, [2, 3, 3], 32), 0.3, 4),
    ]
}

/// DeskNet has hundreds of ReLU and max-pool switches; a ±1e-3 probe
/// crosses some of them, so these run with a step well inside every linear
/// region.
fn desknet_cases() -> Vec<Case> {
    let desk = |num_classes, channels, image_size| ArchDescriptor::DeskNet {
        num_classes,
        channels,
        image_size,
    };
    vec![case(desk(3, 3, 4), 0.15, 5), case(desk(5, 1, 8), 0.1, 6), case(desk(3, 3, 8), 0.15, 7)]
}

fn batch_loss(net: &Network<f64>, inputs: &[Vec<f64>], targets: &[LabelDistribution]) -> f64 {
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    cross_entropy(&forward(net, &refs).unwrap(), targets).unwrap()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn check_input_gradients(cases: Vec<Case>, h: f64) {
    for (ci, c) in cases.into_iter().enumerate() {
        let refs: Vec<&[f64]> = c.inputs.iter().map(Vec::as_slice).collect();
        let analytic = grad_input(&c.net, &refs, &c.targets).unwrap();
        assert_eq!(analytic[0].len(), c.inputs[0].len());
        for (s, grad) in analytic.iter().enumerate() {
            let numeric: Vec<f64> = (0..grad.len())
                .map(|i| {
                    let mut plus = c.inputs.clone();
                    plus[s][i] += h;
                    let mut minus = c.inputs.clone();
                    minus[s][i] -= h;
                    (batch_loss(&c.net, &plus, &c.targets) - batch_loss(&c.net, &minus, &c.targets)) / (2.0 * h)
                })
                .collect();
            let err = relative_error(grad, &numeric);
            assert!(err <= 1e-4, "case {ci} sample {s}: relative error {err:e}");
        }
    }
}

fn check_parameter_gradients(cases: Vec<Case>, h: f64) {
    for (ci, c) in cases.into_iter().enumerate() {
        let refs: Vec<&[f64]> = c.inputs.iter().map(Vec::as_slice).collect();
        let analytic = grad_params(&c.net, &refs, &c.targets).unwrap().param_grad;
        assert_eq!(analytic.len(), c.net.params().len());
        // Every tensor gets a few coordinates.
        let mut r = rng::stream(100 + ci as u64);
        let mut picked = Vec::new();
        for e in c.net.params().entries() {
            for _ in 0..12 {
                picked.push(e.offset + r.random_range(0..e.len()));
            }
        }
        let numeric: Vec<f64> = picked
            .iter()
            .map(|&i| {
                let mut plus = c.net.clone();
                plus.params_mut().data_mut()[i] += h;
                let mut minus = c.net.clone();
                minus.params_mut().data_mut()[i] -= h;
                (batch_loss(&plus, &c.inputs, &c.targets) - batch_loss(&minus, &c.inputs, &c.targets)) / (2.0 * h)
            })
            .collect();
        let sub: Vec<f64> = picked.iter().map(|&i| analytic[i]).collect();
        let err = relative_error(&sub, &numeric);
        assert!(err <= 1e-4, "case {ci}: relative error {err:e}");
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    check_input_gradients(small_cases(), 1e-3);
    check_input_gradients(desknet_cases(), 1e-6);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    check_parameter_gradients(small_cases(), 1e-3);
    check_parameter_gradients(desknet_cases(), 1e-6);
}

/// Parameter count from the layer shapes: four 3×3 convolutions, two 2×2
/// pools, a 256-unit hidden layer and the head.
fn desknet_params(classes: usize, image_size: usize) -> usize {
    let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
    let flat = 64 * (image_size / 4) * (image_size / 4);
    conv(3, 32) + conv(32, 32) + conv(32, 64) + conv(64, 64) + flat * 256 + 256 + 256 * classes + classes
}

#[test]
fn desknet_parameter_count_is_pinned() {
    assert_eq!(desknet_params(20, 32), 1_119_540);
    assert_eq!(desknet_params(100, 32), 1_140_100);
    for (classes, size) in [(20, 32), (100, 32), (10, 16)] {
        let net = build_reference_net(classes, size, 0).unwrap();
        assert_eq!(net.params().len(), desknet_params(classes, size));
    }
    let a = build_reference_net(20, 32, 7).unwrap();
    let b = build_reference_net(20, 32, 7).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
}

#[test]
fn untrained_net_is_at_chance() {
    let (ds, tax) = generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        images_per_class: 20,
        image_size: 16,
        seed: 5,
    })
    .unwrap();
    // A single untrained net tends to send whole classes to one output, so
    // its accuracy varies a lot; the mean over initialisations is at chance.
    let accs: Vec<f64> = (0..10)
        .map(|seed| {
            let net = build_reference_net(10, 16, seed).unwrap();
            let records = evaluate(&net, &ds, &tax).unwrap();
            records.iter().filter(|r| !r.is_mistake()).count() as f64 / records.len() as f64
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "mean accuracy {mean} over {accs:?}");
}

#[test]
fn fifty_samples_overfit_within_200_steps() {
    let (ds, _) = generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        images_per_class: 5,
        image_size: 16,
        seed: 11,
    })
    .unwrap();
    assert_eq!(ds.len(), 50);
    let hyper = Hyperparameters {
        lr: 0.01,
        batch_size: 10,
        augmentation: None,
        ..Hyperparameters::default()
    };
    let arch = ArchDescriptor::DeskNet {
        num_classes: 10,
        channels: 3,
        image_size: 16,
    };
    let mut state = initial_state(arch, &hyper, 3).unwrap();
    let stage = TrainingStage::new(Objective::Standard, 1);
    let mut steps = 0;
    let mut epoch = 0;
    while steps < 200 {
        for batch in batches(&ds, hyper.batch_size, epoch).unwrap() {
            train_step(&mut state, &batch, &stage, &hyper, None).unwrap();
            steps += 1;
        }
        epoch += 1;
    }
    let inputs: Vec<&[f32]> = ds.samples.iter().map(|s| s.image.pixels.as_slice()).collect();
    let labels: Vec<LabelDistribution> =
        ds.samples.iter().map(|s| LabelDistribution::one_hot(s.fine_label, 10).unwrap()).collect();
    let loss = cross_entropy(&forward(&state.model, &inputs).unwrap(), &labels).unwrap();
    assert!(loss < 0.05, "training loss {loss} after {steps} steps");
}

//! Finite-difference checks of every layer type on randomized small shapes.

use cxr_core::nn::gradcheck::check_gradients;
use cxr_core::nn::{LayerSpec, Network};
use cxr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Larger steps (1e-3) occasionally straddle a ReLU or max-pool switch in
// the deeper stacks, which breaks the finite-difference estimate.
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: &[usize]) -> (Tensor, Vec<usize>) {
    let per: usize = shape.iter().product();
    let data = (0..n * per).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    (Tensor::new(full, data).unwrap(), labels)
}

/// `body` followed by a small dense softmax head.
fn check(name: &str, seed: u64, input: Vec<usize>, body: Vec<LayerSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = body;
    layers.extend([LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax]);
    let mut net = Network::new(input.clone(), layers, seed).unwrap();
    // nonzero biases so that every bias path is exercised
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let (batch, labels) = random_batch(&mut rng, 3, &input);
    let report = check_gradients(&net, &batch, &labels, H).unwrap();
    assert!(report.max_error() <= TOL, "{name} seed {seed}: {report:?}");
}

#[test]
fn dense_and_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = rng.gen_range(2..12);
        let hidden = rng.gen_range(1..8);
        check("dense", seed, vec![n_in], vec![LayerSpec::Dense { units: hidden }]);
    }
}

#[test]
fn conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let kernel = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let side = kernel + rng.gen_range(0..5);
        let channels = rng.gen_range(1..4);
        let filters = rng.gen_range(1..4);
        check(
            "conv",
            seed,
            vec![side, side + 1, channels],
            vec![LayerSpec::Conv2d { filters, kernel, stride }],
        );
    }
}

#[test]
fn relu() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.gen_range(2..10);
        check("relu", seed, vec![n], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu]);
    }
}

#[test]
fn maxpool() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let size = rng.gen_range(1..4);
        let side = size * rng.gen_range(1..4) + rng.gen_range(0..size);
        let channels = rng.gen_range(1..3);
        check("maxpool", seed, vec![side, side, channels], vec![LayerSpec::MaxPool2d { size }]);
    }
}

#[test]
fn full_stack_like_reference() {
    for seed in 0..SEEDS {
        check(
            "stack",
            seed,
            vec![10, 10, 1],
            vec![
                LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Conv2d { filters: 2, kernel: 2, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 4 },
                LayerSpec::Relu,
            ],
        );
    }
}

#[test]
fn three_layer_toy() {
    for seed in 0..SEEDS {
        check("toy", seed, vec![5], vec![LayerSpec::Dense { units: 4 }, LayerSpec::Relu, LayerSpec::Dense { units: 3 }]);
    }
}

#[test]
fn zero_loss_batch_has_vanishing_gradient() {
    let layers = vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax];
    let mut net = Network::new(vec![3], layers, 1).unwrap();
    net.params_mut()[1] = Tensor::new(vec![2], vec![-40.0, 40.0]).unwrap();
    let batch = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.2]).unwrap();
    let targets = cxr_core::nn::onehot(&[1, 1], 2);
    let (loss, grads) = net.loss_and_gradients(&batch, &targets, cxr_core::par::Exec::Sequential).unwrap();
    assert!(loss < 1e-6);
    assert!(grads.0.iter().flat_map(|g| g.data()).all(|v| v.abs() < 1e-6));
}

#[test]
fn parallel_and_sequential_gradients_are_bit_identical() {
    use cxr_core::par::Exec;
    let layers = vec![
        LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 2 },
        LayerSpec::Softmax,
    ];
    let net = Network::new(vec![10, 10, 1], layers, 3).unwrap();
    let (batch, labels) = random_batch(&mut ChaCha8Rng::seed_from_u64(3), 16, &[10, 10, 1]);
    let targets = cxr_core::nn::onehot(&labels, 2);
    let (ls, gs) = net.loss_and_gradients(&batch, &targets, Exec::Sequential).unwrap();
    let (lp, gp) = net.loss_and_gradients(&batch, &targets, Exec::Parallel).unwrap();
    assert_eq!(ls.to_bits(), lp.to_bits());
    for (a, b) in gs.0.iter().zip(&gp.0) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

mod common;

use common::{finite_difference_error, random_embedded, random_labels, random_matrix};
use ndarray::Array2;
use rand::Rng;
use vsg_core::embedding::EmbeddedGraph;
use vsg_core::model::{Architecture, Gate, ModelConfig, MpConv, Network};
use vsg_core::nn::{dropout, Gradients, Mlp, Mode, Params};
use vsg_core::rng::seeded;
use vsg_core::training::{focal_element, focal_loss, LossConfig};

const SEEDS: u64 = 20;
const TOLERANCE: f64 = 1e-4;

/// Biases start at exactly zero, which puts ReLU units with an all-zero input
/// row (e.g. after dropout) on the kink. Random biases move every check to a
/// differentiable point.
fn jitter_biases<R: Rng>(params: &mut Params, rng: &mut R) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.name(id).ends_with("bias") {
            params.get_mut(id).mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
    }
}

#[test]
fn mlp_parameter_gradients() {
    for seed in 0..SEEDS {
        let mut rng = seeded(seed, &[1]);
        let mut params = Params::new();
        let mlp = Mlp::new(&mut params, "m", &[4, 6, 5, 3], &mut rng).unwrap();
        jitter_biases(&mut params, &mut rng);
        let x = random_matrix(&mut rng, 5, 4);
        let r = random_matrix(&mut rng, 5, 3);
        let loss = |p: &Params| (mlp.forward(p, x.view()).unwrap().0 * &r).sum();
        let (_, cache) = mlp.forward(&params, x.view()).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        mlp.backward(&params, &mut grads, &cache, &r).unwrap();
        let err = finite_difference_error(&params, &grads, loss);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn mlp_input_gradient() {
    for seed in 0..SEEDS {
        let mut rng = seeded(seed, &[2]);
        let mut params = Params::new();
        let mlp = Mlp::new(&mut params, "m", &[3, 7, 2], &mut rng).unwrap();
        jitter_biases(&mut params, &mut rng);
        let x = random_matrix(&mut rng, 4, 3);
        let r = random_matrix(&mut rng, 4, 2);
        let (_, cache) = mlp.forward(&params, x.view()).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        let dx = mlp.backward(&params, &mut grads, &cache, &r).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = x.clone();
                up[[i, j]] += h;
                let mut down = x.clone();
                down[[i, j]] -= h;
                let f = |m: &Array2<f64>| (mlp.forward(&params, m.view()).unwrap().0 * &r).sum();
                let numeric = (f(&up) - f(&down)) / (2.0 * h);
                assert!((numeric - dx[[i, j]]).abs() < 1e-6, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn mp_conv_gradients() {
    for gate in [Gate::Elementwise, Gate::Scalar] {
        for seed in 0..SEEDS {
            let mut rng = seeded(seed, &[3]);
            let mut params = Params::new();
            let conv = MpConv::new(&mut params, "c", 4, 5, 6, gate, &mut rng).unwrap();
            jitter_biases(&mut params, &mut rng);
            let eg = random_embedded(&mut rng, 5, 4, 5, 0.5);
            let r = random_matrix(&mut rng, 5, 4);
            let loss = |p: &Params| {
                let (out, _) = conv.forward(p, &eg.node_features, &eg.edge_index, eg.edge_features.view()).unwrap();
                (out * &r).sum()
            };
            let (_, cache) = conv.forward(&params, &eg.node_features, &eg.edge_index, eg.edge_features.view()).unwrap();
            let mut grads = Gradients::zeros_like(&params);
            let dz = conv.backward(&params, &mut grads, &cache, &eg.edge_index, &r).unwrap();
            let err = finite_difference_error(&params, &grads, loss);
            assert!(err < TOLERANCE, "{gate:?} seed {seed}: relative error {err:e}");

            let h = 1e-6;
            for i in 0..5 {
                for j in 0..4 {
                    let f = |delta: f64| {
                        let mut z = eg.node_features.clone();
                        z[[i, j]] += delta;
                        let (out, _) = conv.forward(&params, &z, &eg.edge_index, eg.edge_features.view()).unwrap();
                        (out * &r).sum()
                    };
                    let numeric = (f(h) - f(-h)) / (2.0 * h);
                    assert!((numeric - dz[[i, j]]).abs() < 1e-6, "{gate:?} seed {seed} input ({i},{j})");
                }
            }
        }
    }
}

fn network_case(architecture: Architecture, gate: Gate, seed: u64) -> f64 {
    let mut rng = seeded(seed, &[4]);
    let cfg = ModelConfig {
        architecture,
        input_dim: 4,
        num_relations: 2,
        hidden_dim: 6,
        dropout_rate: 0.3,
        gate,
    };
    let mut params = Params::new();
    let net = Network::build(&cfg, &mut params, &mut rng).unwrap();
    jitter_biases(&mut params, &mut rng);
    let loss_cfg = LossConfig {
        gamma: 0.5,
        class_weights: std::array::from_fn(|_| [rng.random_range(0.5..2.0), rng.random_range(1.0..5.0)]),
    };
    // The same dropout stream for every evaluation keeps the mask fixed.
    let forward = |p: &Params, eg: &EmbeddedGraph| net.forward(p, eg, Mode::Train, &mut seeded(seed, &[5])).unwrap();
    // Within 1e-4 of 0 or 1, `ln(1 - p)` loses enough digits that central
    // differences are dominated by roundoff; draw another graph instead.
    let (eg, labels) = loop {
        let n = rng.random_range(2..=6);
        let eg = random_embedded(&mut rng, n, 4, cfg.edge_dim(), 0.5);
        let labels = random_labels(&mut rng, n);
        if forward(&params, &eg).0.iter().all(|&p| (1e-4..=1.0 - 1e-4).contains(&p)) {
            break (eg, labels);
        }
    };
    let (probs, cache) = forward(&params, &eg);
    let fl = focal_loss(probs.view(), &labels, &loss_cfg).unwrap();
    let mut grads = Gradients::zeros_like(&params);
    net.backward(&params, &mut grads, &cache, &fl.grad).unwrap();
    finite_difference_error(&params, &grads, |p| focal_loss(forward(p, &eg).0.view(), &labels, &loss_cfg).unwrap().loss)
}

#[test]
fn full_network_with_dropout_sigmoid_and_focal_loss() {
    for seed in 0..SEEDS {
        for gate in [Gate::Elementwise, Gate::Scalar] {
            let err = network_case(Architecture::DeltaVsg, gate, seed);
            assert!(err < TOLERANCE, "DeltaVsg {gate:?} seed {seed}: relative error {err:e}");
        }
        let err = network_case(Architecture::Mlp, Gate::Elementwise, seed);
        assert!(err < TOLERANCE, "Mlp seed {seed}: relative error {err:e}");
    }
}

#[test]
fn focal_element_derivative() {
    let mut rng = seeded(6, &[]);
    for _ in 0..1000 {
        let p = rng.random_range(0.01..0.99);
        let gamma = rng.random_range(0.0..3.0);
        let w = rng.random_range(0.1..5.0);
        let positive = rng.random_bool(0.5);
        let h = 1e-7;
        let numeric =
            (focal_element(p + h, positive, w, gamma).0 - focal_element(p - h, positive, w, gamma).0) / (2.0 * h);
        let analytic = focal_element(p, positive, w, gamma).1;
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
        assert!(rel < TOLERANCE, "p={p} gamma={gamma} positive={positive}: {analytic} vs {numeric}");
    }
}

#[test]
fn dropout_is_unbiased_and_its_mask_is_the_jacobian() {
    let x = Array2::from_shape_fn((4, 5), |(i, j)| 1.0 + i as f64 - 0.5 * j as f64);
    let draws = 20_000;
    let mut sum = Array2::<f64>::zeros(x.raw_dim());
    let mut rng = seeded(7, &[]);
    for _ in 0..draws {
        let (y, mask) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, &x * &mask);
        sum += &y;
    }
    let mean = sum / draws as f64;
    for (m, v) in mean.iter().zip(&x) {
        // Standard error is |v| / sqrt(draws); allow about five of them.
        assert!((m - v).abs() <= 5.0 * v.abs() / (draws as f64).sqrt() + 1e-12, "{m} vs {v}");
    }
}

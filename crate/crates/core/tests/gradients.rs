use mpsl_core::gradcheck::{random_small_network, relative_error, run_gradcheck};
use mpsl_core::neuron::LifConfig;
use mpsl_core::numerics::{DenseMatrix, SeededRng};
use mpsl_core::plasticity::DeltaMode;
use mpsl_core::reference::reference_gradients;
use mpsl_core::tape::{backward, record_forward, record_forward_with, GradientSet, RecordOptions, SpikeKind};

fn assert_close(fast: &GradientSet, slow: &GradientSet, tol: f64) {
    for ((_, name, a), (_, _, b)) in fast.entries().into_iter().zip(slow.entries()) {
        let err = relative_error(a, b);
        assert!(err <= tol, "{name}: tape {a} vs reference {b} (rel {err:.3e})");
    }
}

fn random_input(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
}

#[test]
fn single_sample_matches_reference() {
    let report = run_gradcheck(1000, 30, false).unwrap();
    assert!(report.passed(), "{:?}", report.first_failure);
}

#[test]
fn batched_matches_reference() {
    for seed in 0..10 {
        let mut rng = SeededRng::new(5000 + seed);
        let net = random_small_network(&mut rng);
        let x = random_input(&mut rng, 3, net.input_dim());
        let labels: Vec<usize> = (0..3).map(|_| rng.below(net.num_classes())).collect();
        let tape = record_forward(&net, &x, &labels, 4).unwrap();
        let fast = backward(&tape, 1.0);
        let slow = reference_gradients(&net, &x, &labels, 4).unwrap();
        assert_close(&fast, &slow, 1e-6);
    }
}

#[test]
fn increment_delta_matches_reference() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(7000 + seed);
        let mut net = random_small_network(&mut rng);
        net.delta_mode = DeltaMode::Increment;
        let x = random_input(&mut rng, 2, net.input_dim());
        let labels: Vec<usize> = (0..2).map(|_| rng.below(net.num_classes())).collect();
        let tape = record_forward(&net, &x, &labels, 3).unwrap();
        assert_close(&backward(&tape, 1.0), &reference_gradients(&net, &x, &labels, 3).unwrap(), 1e-6);
    }
}

#[test]
fn corrupted_surrogate_is_detected() {
    let report = run_gradcheck(1000, 30, true).unwrap();
    assert!(!report.passed());
}

#[test]
fn closed_window_gives_zero_gradient() {
    let mut rng = SeededRng::new(3);
    let mut net = random_small_network(&mut rng);
    // Narrow window around V_th; zero input keeps every U at 0, outside it.
    net.lif = LifConfig { a: 0.2, ..net.lif };
    let x = DenseMatrix::zeros(1, net.input_dim());
    let tape = record_forward(&net, &x, &[0], 3).unwrap();
    assert!(tape.loss() > 0.0);
    let g = backward(&tape, 1.0);
    for (_, name, v) in g.entries() {
        assert_eq!(v, 0.0, "{name}");
    }
}

#[test]
fn identity_spike_reduces_to_softmax_regression() {
    // One layer, one step, S = U: the loss is softmax cross-entropy on
    // U = Σ λ_k W_k x, so dL/dW1 = λ_1 (p − y) xᵀ and dL/dλ_k = (p − y)·W_k x.
    let mut rng = SeededRng::new(11);
    let mut net = random_small_network(&mut rng);
    net.layers.truncate(1);
    let classes = net.layers[0].fan_out();
    let x = random_input(&mut rng, 1, net.input_dim());
    let label = 1 % classes;
    let tape = record_forward_with(&net, &x, &[label], 1, RecordOptions { spike: SpikeKind::Identity }).unwrap();
    let g = backward(&tape, 1.0);

    let layer = &net.layers[0];
    let xs = x.row(0);
    let path_out = |w: &DenseMatrix| -> Vec<f64> {
        (0..classes).map(|j| w.row(j).iter().zip(xs).map(|(a, b)| a * b).sum()).collect()
    };
    let outs: Vec<Vec<f64>> = layer.weights().iter().map(|w| path_out(w)).collect();
    let u: Vec<f64> = (0..classes)
        .map(|j| (0..3).map(|k| layer.lambda[k] * outs[k][j]).sum())
        .collect();
    let z: f64 = u.iter().map(|v| v.exp()).sum();
    let err: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(j, v)| v.exp() / z - if j == label { 1.0 } else { 0.0 })
        .collect();

    for j in 0..classes {
        for i in 0..xs.len() {
            let want = layer.lambda[0] * err[j] * xs[i];
            assert!((g.layers[0].w1[(j, i)] - want).abs() < 1e-10);
        }
    }
    for k in 0..3 {
        let want: f64 = err.iter().zip(&outs[k]).map(|(e, o)| e * o).sum();
        assert!((g.layers[0].lambda[k] - want).abs() < 1e-10);
    }
    assert_eq!(g.layers[0].eta, 0.0);
    assert_eq!(g.lambda_f, 0.0);
}

#[test]
fn single_step_window_leaves_plasticity_parameters_untouched() {
    // With T = 1 every W2/W3 update lands after the last spike is counted.
    for seed in 0..5 {
        let mut rng = SeededRng::new(900 + seed);
        let net = random_small_network(&mut rng);
        let x = random_input(&mut rng, 2, net.input_dim());
        let tape = record_forward(&net, &x, &[0, 1], 1).unwrap();
        let g = backward(&tape, 1.0);
        for l in &g.layers {
            assert_eq!(l.eta, 0.0);
            assert_eq!(l.beta, 0.0);
        }
        assert_eq!(g.lambda_f, 0.0);
        assert_eq!(g.lambda_p, 0.0);
    }
}

#[test]
fn top_layer_hebbian_parameters_need_two_steps() {
    // The top layer's W2 only reaches the loss through its own later steps.
    let mut rng = SeededRng::new(4242);
    let net = random_small_network(&mut rng);
    let x = random_input(&mut rng, 1, net.input_dim());
    let tape = record_forward(&net, &x, &[0], 2).unwrap();
    let slow = reference_gradients(&net, &x, &[0], 2).unwrap();
    assert_close(&backward(&tape, 1.0), &slow, 1e-6);
}

#[test]
fn replay_is_bitwise() {
    let mut rng = SeededRng::new(8);
    let net = random_small_network(&mut rng);
    let x = random_input(&mut rng, 2, net.input_dim());
    let tape = record_forward(&net, &x, &[0, 1], 4).unwrap();
    let replayed = tape.replay();
    assert_eq!(replayed.len(), tape.values().len());
    for (a, b) in replayed.iter().zip(tape.values()) {
        assert_eq!(a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn recording_is_deterministic() {
    let mut rng = SeededRng::new(21);
    let net = random_small_network(&mut rng);
    let x = random_input(&mut rng, 3, net.input_dim());
    let a = backward(&record_forward(&net, &x, &[0, 1, 0], 5).unwrap(), 1.0);
    let b = backward(&record_forward(&net, &x, &[0, 1, 0], 5).unwrap(), 1.0);
    assert_eq!(a, b);
}

#[test]
fn plasticity_parameters_receive_gradient() {
    let mut seen = [false; 4];
    for seed in 0..20 {
        let mut rng = SeededRng::new(300 + seed);
        let net = random_small_network(&mut rng);
        let x = random_input(&mut rng, 1, net.input_dim());
        let g = backward(&record_forward(&net, &x, &[0], 4).unwrap(), 1.0);
        seen[0] |= g.layers[0].eta.abs() > 1e-6;
        seen[1] |= g.layers[0].beta.abs() > 1e-6;
        seen[2] |= g.lambda_f.abs() > 1e-6;
        seen[3] |= g.lambda_p.abs() > 1e-6;
    }
    assert_eq!(seen, [true; 4]);
}

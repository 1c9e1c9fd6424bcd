use mpsl_core::checkpoint::Checkpoint;
use mpsl_core::data::{synthetic_blobs, BlobSpec, Dataset};
use mpsl_core::network::{infer_batch, InitConfig, Network, PathMode};
use mpsl_core::neuron::LifConfig;
use mpsl_core::numerics::{DenseMatrix, SeededRng};
use mpsl_core::plasticity::SbpParams;
use mpsl_core::tape::{record_forward, Event};
use mpsl_core::trainer::{evaluate, TrainConfig, Trainer};

fn blobs(seed: u64, per_class: usize, classes: usize, dim: usize) -> Dataset {
    synthetic_blobs(&mut SeededRng::new(seed), per_class, classes, dim, &BlobSpec::default()).unwrap()
}

fn cfg(layers: Vec<usize>) -> TrainConfig {
    TrainConfig {
        timesteps: 4,
        batch_size: 16,
        lr: 5e-3,
        layers,
        ..TrainConfig::default()
    }
}

/// Expected schedule written out by hand from the update order: per step,
/// forward and Hebbian for layers bottom-up, then SBP top-down; one gradient
/// step per batch.
fn canonical(t_steps: usize, layers: usize) -> Vec<Event> {
    let mut out = Vec::new();
    for t in 0..t_steps {
        for layer in 0..layers {
            out.push(Event::Forward { t, layer });
            out.push(Event::Hebbian { t, layer });
        }
        for layer in (0..layers).rev() {
            out.push(Event::Sbp { t, layer });
        }
    }
    out.push(Event::GradientStep);
    out
}

#[test]
fn one_batch_follows_the_canonical_schedule() {
    let data = blobs(1, 8, 2, 9);
    let mut tr = Trainer::new(TrainConfig { batch_size: 16, ..cfg(vec![9, 6, 5, 2]) }).unwrap();
    tr.record_events();
    let (x, y) = data.batch(&(0..16).collect::<Vec<_>>());
    tr.train_batch(&x, &y, 0).unwrap();
    assert_eq!(tr.take_events(), canonical(4, 3));
}

#[test]
fn zero_network_loss_is_ln_classes() {
    let data = blobs(2, 10, 10, 16);
    let net = Network::zeroed(&[16, 12, 10], LifConfig::default(), SbpParams::default(), &InitConfig::default()).unwrap();
    let (x, y) = data.batch(&(0..100).collect::<Vec<_>>());
    let tape = record_forward(&net, &x, &y, 8).unwrap();
    assert!((tape.loss() - 10f64.ln()).abs() <= 1e-9);

    let c = TrainConfig { layers: vec![16, 12, 10], ..cfg(vec![16, 12, 10]) };
    let mut tr = Trainer::from_parts(c, net, None, 0, SeededRng::new(0)).unwrap();
    let (loss, _) = tr.train_batch(&x, &y, 0).unwrap();
    assert!((loss - 10f64.ln()).abs() <= 1e-9);
}

#[test]
fn zero_input_on_zero_network_is_ln_ten() {
    let net = Network::zeroed(&[4, 10], LifConfig::default(), SbpParams::default(), &InitConfig::default()).unwrap();
    let tape = record_forward(&net, &DenseMatrix::zeros(1, 4), &[3], 1).unwrap();
    assert!((tape.loss() - 10f64.ln()).abs() <= 1e-12);
    assert_eq!(tape.counts().sum(), 0.0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = blobs(3, 20, 3, 9);
    let c = cfg(vec![9, 8, 3]);
    let mut straight = Trainer::new(c.clone()).unwrap();
    let a1 = straight.train_epoch(&data).unwrap();
    let a2 = straight.train_epoch(&data).unwrap();

    let mut first = Trainer::new(c.clone()).unwrap();
    let b1 = first.train_epoch(&data).unwrap();
    let bytes = Checkpoint::from_trainer(&first, 42).to_bytes();
    drop(first);
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer(c).unwrap();
    let b2 = resumed.train_epoch(&data).unwrap();

    assert_eq!(a1, b1);
    assert_eq!(a2, b2);
    assert_eq!(straight.net, resumed.net);
    assert_eq!(straight.adam, resumed.adam);
}

#[test]
fn untrained_network_is_near_chance() {
    // Any one random network has its own class bias; the average over
    // initializations is what sits at chance.
    let data = blobs(4, 100, 10, 100);
    let acc = (0..20)
        .map(|seed| {
            let tr = Trainer::new(TrainConfig { seed, ..cfg(vec![100, 32, 10]) }).unwrap();
            evaluate(&tr.net, &data, 8, true).unwrap().accuracy
        })
        .sum::<f64>()
        / 20.0;
    assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
}

#[test]
fn single_sample_can_be_memorized() {
    let data = blobs(5, 1, 10, 16).truncated(1);
    let mut tr = Trainer::new(TrainConfig { batch_size: 1, lr: 1e-2, ..cfg(vec![16, 16, 10]) }).unwrap();
    for _ in 0..200 {
        tr.train_epoch(&data).unwrap();
    }
    assert_eq!(evaluate(&tr.net, &data, 4, true).unwrap().accuracy, 1.0);
}

#[test]
fn blobs_are_learned() {
    let data = blobs(6, 40, 4, 16);
    let mut tr = Trainer::new(cfg(vec![16, 16, 4])).unwrap();
    for _ in 0..10 {
        tr.train_epoch(&data).unwrap();
    }
    let acc = evaluate(&tr.net, &data, 4, true).unwrap().accuracy;
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn merged_and_three_path_inference_agree() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        let mut net =
            Network::init(&[20, 15, 6], LifConfig::default(), SbpParams::default(), &InitConfig::default(), &mut rng)
                .unwrap();
        for l in &mut net.layers {
            l.lambda = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            l.w2 = l.w2.scaled(10.0);
            l.w3 = l.w3.scaled(10.0);
        }
        let x = DenseMatrix::from_vec(200, 20, (0..4000).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let a = infer_batch(&net, &x, 8, PathMode::Merged).unwrap();
        let b = infer_batch(&net, &x, 8, PathMode::ThreePath).unwrap();
        assert_eq!(a.predictions(), b.predictions());
        assert!(a.counts.max_abs_diff(&b.counts) <= 1e-9);
        assert!(a.u_sum.max_abs_diff(&b.u_sum) <= 1e-9);
    }
}

use pfedafm::autodiff::{cross_entropy, Activation, DenseLayer, LayeredModel, Parameterized};
use pfedafm::checkpoint::bitwise_equal;
use pfedafm::config::{Algorithm, ExperimentConfig, PartitionKind, ZooAssignment};
use pfedafm::data::{ClientSplit, LabeledDataset};
use pfedafm::gradcheck::{finite_diff_grad, max_relative_error};
use pfedafm::metrics::{alpha_trace, MetricSeries};
use pfedafm::protocol::*;
use pfedafm::zoo::{small_backward, small_forward, HomoExtractor, MixVector, MixedModel, SplitModel};
use pfedafm::{Error, Tensor};

fn small_config(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        num_clients: 4,
        rounds: 3,
        per_class: 40,
        ..ExperimentConfig::default()
    }
}

fn locals_equal(a: &ExperimentResult, b: &ExperimentResult) -> bool {
    a.federation
        .clients
        .iter()
        .zip(&b.federation.clients)
        .all(|(x, y)| bitwise_equal(&x.net.local, &y.net.local))
}

fn accuracies(r: &ExperimentResult) -> Vec<Vec<u64>> {
    r.records
        .iter()
        .map(|rec| rec.clients.iter().map(|c| c.test_accuracy.to_bits()).collect())
        .collect()
}

#[test]
fn zero_alpha_rate_reduces_to_standalone() {
    let mut config = small_config(Algorithm::PFedAfm);
    config.eta_alpha = 0.0;
    let mixed = run_experiment(&config).unwrap();
    let solo = baseline_standalone(&config).unwrap();
    assert!(locals_equal(&mixed, &solo));
    assert_eq!(accuracies(&mixed), accuracies(&solo));
    for rec in &mixed.records {
        assert!(rec.alpha_means.iter().all(|&a| a == 1.0));
    }
}

#[test]
fn end_to_end_with_alpha_pinned_at_one_reduces_to_standalone() {
    let mut config = small_config(Algorithm::PFedAfmEndToEnd);
    config.eta_alpha = 0.0;
    let e2e = variant_end_to_end(&config).unwrap();
    let solo = baseline_standalone(&config).unwrap();
    assert!(locals_equal(&e2e, &solo));
    // θ receives a zero gradient through (1 − α) = 0 and never moves.
    let data = load_dataset(&config).unwrap();
    let fresh = build_federation(&config, &data).unwrap();
    assert!(bitwise_equal(&e2e.federation.server.theta, &fresh.server.theta));
}

#[test]
fn single_client_fedavg_and_lg_reduce_to_standalone() {
    for algorithm in [Algorithm::FedAvg, Algorithm::LgFedAvg] {
        let config = ExperimentConfig {
            algorithm,
            num_clients: 1,
            classes_per_client: 3,
            zoo: ZooAssignment::Homogeneous(1),
            ..small_config(algorithm)
        };
        let fl = run_experiment(&config).unwrap();
        let solo = baseline_standalone(&config).unwrap();
        assert!(locals_equal(&fl, &solo), "{algorithm}");
        assert_eq!(accuracies(&fl), accuracies(&solo), "{algorithm}");
    }
}

#[test]
fn single_participant_round_adopts_its_upload() {
    let config = ExperimentConfig {
        participation: 0.25,
        rounds: 1,
        ..small_config(Algorithm::PFedAfm)
    };
    let result = run_experiment(&config).unwrap();
    let selected = &result.records[0].selected;
    assert_eq!(selected.len(), 1);
    let client = &result.federation.clients[selected[0]];
    assert!(bitwise_equal(&result.federation.server.theta, &client.net.homo));
    assert_eq!(result.records[0].delta_sq, Some(0.0));
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let config = ExperimentConfig {
        eta_omega: 0.0,
        eta_alpha: 0.0,
        ..small_config(Algorithm::PFedAfm)
    };
    let data = load_dataset(&config).unwrap();
    let fresh = build_federation(&config, &data).unwrap();
    let result = run_experiment(&config).unwrap();
    assert!(bitwise_equal(&result.federation.server.theta, &fresh.server.theta));
    for (a, b) in result.federation.clients.iter().zip(&fresh.clients) {
        assert!(bitwise_equal(&a.net, &b.net));
    }
    for rec in &result.records {
        assert!(rec.clients.iter().all(|c| c.train_loss.is_finite()));
    }
}

#[test]
fn zero_rounds_returns_initial_state() {
    let config = ExperimentConfig {
        rounds: 0,
        ..small_config(Algorithm::PFedAfm)
    };
    let result = run_experiment(&config).unwrap();
    assert!(result.records.is_empty());
    let data = load_dataset(&config).unwrap();
    assert_eq!(result.federation, build_federation(&config, &data).unwrap());
}

#[test]
fn heterogeneous_fedavg_is_rejected_before_any_work() {
    let config = small_config(Algorithm::FedAvg);
    match run_experiment(&config) {
        Err(Error::Config(p)) => assert!(p.iter().any(|m| m.contains("homogeneous"))),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn identical_clients_stay_identical() {
    let config = ExperimentConfig {
        zoo: ZooAssignment::Homogeneous(3),
        ..small_config(Algorithm::PFedAfm)
    };
    let data = load_dataset(&config).unwrap();
    let fed = build_federation(&config, &data).unwrap();
    let mut a = fed.clients[0].clone();
    let mut b = fed.clients[0].clone();
    let settings = TrainSettings { epochs: 2, batch_size: 16 };
    for round in 1..=3 {
        for c in [&mut a, &mut b] {
            phase1_train_hetero(c, settings, round, 9, &mut NoopObserver).unwrap();
            phase2_train_homo(c, settings, round, 9, &mut NoopObserver).unwrap();
        }
    }
    assert!(bitwise_equal(&a.net, &b.net));
    assert_eq!(
        evaluate(&a, Algorithm::PFedAfm).unwrap(),
        evaluate(&b, Algorithm::PFedAfm).unwrap()
    );
}

fn layer(w: &[f64], b: &[f64], out: usize, act: Activation) -> DenseLayer {
    let inp = w.len() / out;
    DenseLayer::new(
        Tensor::new(vec![out, inp], w.to_vec()).unwrap(),
        Tensor::vector(b.to_vec()).unwrap(),
        act,
    )
    .unwrap()
}

fn one_sample_client(x: f64, y: usize, lr_omega: f64, lr_alpha: f64) -> ClientState {
    let homo = HomoExtractor::new(LayeredModel::new(vec![layer(&[0.7], &[0.1], 1, Activation::Identity)]).unwrap())
        .unwrap();
    let local = SplitModel::new(
        0,
        LayeredModel::new(vec![layer(&[-0.4], &[0.3], 1, Activation::Identity)]).unwrap(),
        layer(&[0.5, -1.2], &[0.05, -0.02], 2, Activation::Identity),
    )
    .unwrap();
    let alpha = MixVector::from_values(Tensor::vector(vec![0.8]).unwrap(), lr_alpha).unwrap();
    let data = LabeledDataset::new(Tensor::new(vec![1, 1], vec![x]).unwrap(), vec![y], 2).unwrap();
    ClientState {
        id: 0,
        net: MixedModel::new(homo, local, alpha).unwrap(),
        split: ClientSplit {
            client_id: 0,
            train_indices: vec![0],
            test_indices: vec![0],
            train: data.clone(),
            test: data,
        },
        lrs: LearningRates::new(lr_omega, lr_alpha).unwrap(),
    }
}

#[test]
fn phase_one_matches_a_hand_computed_step() {
    let (x, y, lr, lr_a) = (1.5, 1usize, 0.1, 0.3);
    let mut client = one_sample_client(x, y, lr, lr_a);
    let settings = TrainSettings { epochs: 1, batch_size: 8 };
    phase1_train_hetero(&mut client, settings, 1, 0, &mut NoopObserver).unwrap();

    // scalar model written out by hand
    let (a, b, c, e, alpha) = (0.7, 0.1, -0.4, 0.3, 0.8);
    let (h, k) = ([0.5, -1.2], [0.05, -0.02]);
    let g = a * x + b;
    let f = c * x + e;
    let r = g * (1.0 - alpha) + f * alpha;
    let z = [h[0] * r + k[0], h[1] * r + k[1]];
    let m = z[0].max(z[1]);
    let s = (z[0] - m).exp() + (z[1] - m).exp();
    let p = [(z[0] - m).exp() / s, (z[1] - m).exp() / s];
    let dz = [p[0] - (y == 0) as u8 as f64, p[1] - (y == 1) as u8 as f64];
    let dr = dz[0] * h[0] + dz[1] * h[1];
    let expected_header = [h[0] - lr * dz[0] * r, h[1] - lr * dz[1] * r];
    let expected_bias = [k[0] - lr * dz[0], k[1] - lr * dz[1]];
    let expected_c = c - lr * dr * alpha * x;
    let expected_e = e - lr * dr * alpha;
    let expected_alpha = alpha - lr_a * dr * (f - g);

    let close = |got: f64, want: f64| assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    let net = &client.net;
    close(net.local.header().weights().value().data()[0], expected_header[0]);
    close(net.local.header().weights().value().data()[1], expected_header[1]);
    close(net.local.header().bias().value().data()[0], expected_bias[0]);
    close(net.local.header().bias().value().data()[1], expected_bias[1]);
    close(net.local.extractor().layers()[0].weights().value().data()[0], expected_c);
    close(net.local.extractor().layers()[0].bias().value().data()[0], expected_e);
    close(net.alpha.values().data()[0], expected_alpha);
    // θ untouched
    assert_eq!(net.homo.layers().layers()[0].weights().value().data()[0], a);
    assert_eq!(net.homo.layers().layers()[0].bias().value().data()[0], b);
}

#[test]
fn phase_two_gradient_matches_finite_differences() {
    let config = small_config(Algorithm::PFedAfm);
    let data = load_dataset(&config).unwrap();
    let fed = build_federation(&config, &data).unwrap();
    let client = &fed.clients[2];
    let rows: Vec<usize> = (0..6).collect();
    let x = client.split.train.features().select_rows(&rows).unwrap();
    let labels: Vec<usize> = rows.iter().map(|&i| client.split.train.labels()[i]).collect();

    let mut homo = client.net.homo.clone();
    let mut local = client.net.local.clone();
    local.set_frozen(true);
    let (logits, tape) = small_forward(&x, &homo, &local).unwrap();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    small_backward(&mut homo, &mut local, &tape, &g).unwrap();
    let analytic: Vec<Tensor> = homo.parameters().iter().map(|p| p.grad().clone()).collect();
    assert!(local.parameters().iter().all(|p| p.grad().data().iter().all(|&v| v == 0.0)));

    let numeric = finite_diff_grad(&mut homo, 1e-6, |h| {
        let (logits, _) = small_forward(&x, h, &local)?;
        Ok(cross_entropy(&logits, &labels)?.0)
    })
    .unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_rates_leave_phases_as_no_ops() {
    let mut client = one_sample_client(0.3, 0, 0.0, 0.0);
    let before = client.net.clone();
    let settings = TrainSettings { epochs: 3, batch_size: 1 };
    let loss = phase1_train_hetero(&mut client, settings, 1, 0, &mut NoopObserver).unwrap();
    assert!(loss.is_finite());
    phase2_train_homo(&mut client, settings, 1, 0, &mut NoopObserver).unwrap();
    assert!(bitwise_equal(&client.net, &before));
}

#[test]
fn communication_accounting() {
    let config = small_config(Algorithm::PFedAfm);
    let data = load_dataset(&config).unwrap();
    let fed = build_federation(&config, &data).unwrap();
    let homo = fed.server.theta.param_count() as u64;
    let header = fed.clients[0].net.local.header().param_count() as u64;
    let k = config.clients_per_round() as u64;

    let r = run_experiment(&config).unwrap();
    assert!(r.records.iter().all(|rec| rec.uplink_params + rec.downlink_params == 2 * k * homo));
    let r = variant_end_to_end(&config).unwrap();
    assert!(r.records.iter().all(|rec| rec.uplink_params + rec.downlink_params == 2 * k * homo));
    let r = baseline_lg_fedavg(&config).unwrap();
    assert!(r.records.iter().all(|rec| rec.uplink_params + rec.downlink_params == 2 * k * header));
    let r = baseline_standalone(&config).unwrap();
    assert_eq!(MetricSeries::from_records(&r.records).total_communication(), 0);

    // the shared extractor is cheaper to exchange than any full zoo model
    for c in &fed.clients {
        assert!(homo < c.net.local.param_count() as u64);
    }
}

#[test]
fn metric_series_is_consistent_and_flops_are_reproducible() {
    let config = small_config(Algorithm::PFedAfm);
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    let series = MetricSeries::from_records(&a.records);
    assert!(series.is_consistent());
    assert_eq!(series.total_flops(), MetricSeries::from_records(&b.records).total_flops());
    assert!(series.total_flops() > 0);
}

#[test]
fn alpha_trace_behaviour() {
    let mut config = ExperimentConfig {
        rounds: 20,
        ..small_config(Algorithm::PFedAfm)
    };
    config.eta_alpha = 0.0;
    let frozen = run_experiment(&config).unwrap();
    assert!(alpha_trace(&frozen.records).iter().flatten().all(|&a| a == 1.0));

    config.eta_alpha = 0.1;
    let moving = run_experiment(&config).unwrap();
    let trace = alpha_trace(&moving.records);
    assert_eq!(trace.len(), 4);
    assert_ne!(trace[0], trace[1]);
}

#[test]
fn dirichlet_runs_end_to_end() {
    let config = ExperimentConfig {
        partition: PartitionKind::Dirichlet,
        gamma: 0.5,
        ..small_config(Algorithm::PFedAfm)
    };
    let r = run_experiment(&config).unwrap();
    assert_eq!(r.records.len(), 3);
    assert!(r.records.iter().all(|rec| rec.delta_sq.is_some_and(f64::is_finite)));
}

#[test]
fn fedavg_beats_standalone_on_iid_data() {
    let mut wins = 0;
    for seed in 0..3 {
        let config = ExperimentConfig {
            algorithm: Algorithm::FedAvg,
            num_clients: 4,
            classes_per_client: 10,
            zoo: ZooAssignment::Homogeneous(0),
            seed,
            ..ExperimentConfig::default()
        };
        let fed = baseline_fedavg(&config).unwrap().best_mean_accuracy().unwrap();
        let solo = baseline_standalone(&config).unwrap().best_mean_accuracy().unwrap();
        wins += (fed >= solo) as usize;
    }
    assert!(wins >= 2, "FedAvg ≥ Standalone in only {wins}/3 seeds");
}

/// First-run snapshots; a change here means training numerics changed.
#[test]
fn regression_fixtures() {
    let config = ExperimentConfig {
        rounds: 30,
        ..small_config(Algorithm::Standalone)
    };
    let solo = baseline_standalone(&config).unwrap();
    let lg = baseline_lg_fedavg(&config).unwrap();
    let last = |r: &ExperimentResult| r.records.last().unwrap().mean_accuracy;
    assert_eq!(format!("{:.6}", last(&solo)), "0.703125");
    assert_eq!(format!("{:.6}", last(&lg)), "0.656250");
}

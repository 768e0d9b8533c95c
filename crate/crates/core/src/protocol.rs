//! Round engine for pFedAFM, its end-to-end ablation and the baselines.
//!
//! A pFedAFM round:
//!
//! 1. the server samples `K = round(C·N)` clients and broadcasts θ;
//! 2. each selected client, in ascending id order,
//!    - freezes θ and trains its local model and α on the mixed
//!      representation (one SGD step per batch updates both), then
//!    - freezes its local model and α and trains θ through its header;
//! 3. the server replaces θ with the size-weighted mean of the uploads.
//!
//! Client batch orders come from per-(seed, client, round, phase) streams and
//! aggregation sums in ascending client id, so a run is a pure function of its
//! configuration.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, sgd_step, DenseLayer, Parameterized};
use crate::config::{Algorithm, DataSource, ExperimentConfig, PartitionKind};
use crate::data::{
    dirichlet_partition, generate_synthetic, load_external, pathological_partition, split_train_test,
    split_train_test_lenient, ClientSplit, ExternalFormat, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_accuracy, mixing_flops, training_flops};
use crate::rng::{derive_seed, rng_from_seed, stream, SimRng};
use crate::tensor::Tensor;
use crate::zoo::{
    build_homo_extractor, build_zoo_model, small_backward, small_forward, HomoExtractor, MixVector, MixedModel,
    SplitModel,
};

/// `η_θ` always equals `η_ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    omega: f64,
    alpha: f64,
}

impl LearningRates {
    pub fn new(omega: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("η_ω", omega), ("η_α", alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(Self { omega, alpha })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> f64 {
        self.omega
    }
}

/// Everything one client owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Local copy of θ, the local model and α. θ goes stale while the client
    /// is not selected.
    pub net: MixedModel,
    pub split: ClientSplit,
    pub lrs: LearningRates,
}

impl ClientState {
    pub fn train_size(&self) -> usize {
        self.split.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: HomoExtractor,
    /// Global full model (FedAvg only).
    pub global_model: Option<SplitModel>,
    /// Global header (LG-FedAvg only).
    pub global_header: Option<DenseLayer>,
    pub round: usize,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// θ frozen; local model and α trained on the mixed representation.
    Hetero,
    /// Local model and α frozen; θ trained through the header.
    Homo,
    /// Everything trained jointly on the mixed representation.
    EndToEnd,
    /// Local model alone (Standalone, FedAvg, LG-FedAvg).
    Local,
}

impl Phase {
    fn stream_tag(self) -> u64 {
        match self {
            Phase::Hetero | Phase::EndToEnd | Phase::Local => 1,
            Phase::Homo => 2,
        }
    }
}

/// Hooks around every training batch. Used by tests to check freeze
/// contracts batch by batch.
pub trait TrainObserver {
    fn before_batch(&mut self, _phase: Phase, _client: &ClientState) {}
    fn after_batch(&mut self, _phase: Phase, _client: &ClientState) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
}

/// Client sample for one round: `round(C·N)` distinct ids, ascending.
pub fn select_clients(num_clients: usize, participation: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(Error::invalid(format!("participation must be in (0, 1], got {participation}")));
    }
    let k = (participation * num_clients as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "participation {participation} of {num_clients} clients selects nobody"
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::SELECT, round as u64]));
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn batch_rng(seed: u64, client: usize, round: usize, phase: Phase) -> SimRng {
    rng_from_seed(derive_seed(
        seed,
        &[stream::CLIENT, client as u64, round as u64, phase.stream_tag()],
    ))
}

/// Runs `epochs` passes over the client's training set in shuffled batches,
/// calling `step` on each. Returns the sample-weighted mean loss.
fn run_epochs<F>(
    client: &mut ClientState,
    phase: Phase,
    settings: TrainSettings,
    rng: &mut SimRng,
    observer: &mut dyn TrainObserver,
    mut step: F,
) -> Result<f64>
where
    F: FnMut(&mut ClientState, &Tensor, &[usize]) -> Result<f64>,
{
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be ≥ 1"));
    }
    let n = client.split.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut total, mut seen) = (0.0, 0usize);
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(settings.batch_size) {
            let x = client.split.train.features().select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| client.split.train.labels()[i]).collect();
            observer.before_batch(phase, client);
            let loss = step(client, &x, &labels)?;
            observer.after_batch(phase, client);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
    }
    Ok(total / seen as f64)
}

fn set_trainable(net: &mut MixedModel, homo: bool, local: bool, alpha: bool) {
    net.homo.set_frozen(!homo);
    net.local.set_frozen(!local);
    net.alpha.set_frozen(!alpha);
}

/// θ frozen; one SGD step per batch updates the local model (η_ω) and α (η_α).
pub fn phase1_train_hetero(
    client: &mut ClientState,
    settings: TrainSettings,
    round: usize,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    set_trainable(&mut client.net, false, true, true);
    let mut rng = batch_rng(seed, client.id, round, Phase::Hetero);
    let result = run_epochs(client, Phase::Hetero, settings, &mut rng, observer, |c, x, labels| {
        let (logits, tape) = c.net.forward(x)?;
        let (loss, grad) = cross_entropy(&logits, labels)?;
        c.net.backward(&tape, &grad)?;
        sgd_step(c.net.local.parameters_mut(), c.lrs.omega())?;
        sgd_step(c.net.alpha.parameters_mut(), c.lrs.alpha())?;
        Ok(loss)
    });
    set_trainable(&mut client.net, true, true, true);
    result
}

/// Local model and α frozen; θ trained on `header(θ(x))` without mixing.
pub fn phase2_train_homo(
    client: &mut ClientState,
    settings: TrainSettings,
    round: usize,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    set_trainable(&mut client.net, true, false, false);
    let mut rng = batch_rng(seed, client.id, round, Phase::Homo);
    let result = run_epochs(client, Phase::Homo, settings, &mut rng, observer, |c, x, labels| {
        let (logits, tape) = small_forward(x, &c.net.homo, &c.net.local)?;
        let (loss, grad) = cross_entropy(&logits, labels)?;
        small_backward(&mut c.net.homo, &mut c.net.local, &tape, &grad)?;
        sgd_step(c.net.homo.parameters_mut(), c.lrs.theta())?;
        Ok(loss)
    });
    set_trainable(&mut client.net, true, true, true);
    result
}

/// Ablation: θ, the local model and α all updated by one step per batch.
pub fn train_end_to_end(
    client: &mut ClientState,
    settings: TrainSettings,
    round: usize,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    set_trainable(&mut client.net, true, true, true);
    let mut rng = batch_rng(seed, client.id, round, Phase::EndToEnd);
    run_epochs(client, Phase::EndToEnd, settings, &mut rng, observer, |c, x, labels| {
        let (logits, tape) = c.net.forward(x)?;
        let (loss, grad) = cross_entropy(&logits, labels)?;
        c.net.backward(&tape, &grad)?;
        sgd_step(c.net.local.parameters_mut(), c.lrs.omega())?;
        sgd_step(c.net.alpha.parameters_mut(), c.lrs.alpha())?;
        sgd_step(c.net.homo.parameters_mut(), c.lrs.theta())?;
        Ok(loss)
    })
}

/// Trains the local model alone, `header(extractor(x))`.
pub fn train_local(
    client: &mut ClientState,
    settings: TrainSettings,
    round: usize,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    let mut rng = batch_rng(seed, client.id, round, Phase::Local);
    run_epochs(client, Phase::Local, settings, &mut rng, observer, |c, x, labels| {
        let (logits, tape) = c.net.local.forward(x)?;
        let (loss, grad) = cross_entropy(&logits, labels)?;
        c.net.local.backward(&tape, &grad)?;
        sgd_step(c.net.local.parameters_mut(), c.lrs.omega())?;
        Ok(loss)
    })
}

/// Coordinate-wise weighted mean with weights `n_k / Σ n_j`, summed in the
/// given order. The result is clamped into each coordinate's participant range
/// so identical inputs come back bit-identical and round-off can never leave
/// the convex hull.
pub fn aggregate(params: &[&[f64]], sizes: &[usize]) -> Result<Vec<f64>> {
    let Some(first) = params.first() else {
        return Err(Error::invalid("cannot aggregate an empty list"));
    };
    if params.len() != sizes.len() {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            expected: vec![params.len()],
            actual: vec![sizes.len()],
        });
    }
    if let Some(p) = params.iter().find(|p| p.len() != first.len()) {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            expected: vec![first.len()],
            actual: vec![p.len()],
        });
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("aggregation weights need positive dataset sizes"));
    }
    let total: usize = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let out = (0..first.len())
        .map(|c| {
            let mut acc = weights[0] * params[0][c];
            let (mut lo, mut hi) = (params[0][c], params[0][c]);
            for k in 1..params.len() {
                let v = params[k][c];
                acc += weights[k] * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            acc.clamp(lo, hi)
        })
        .collect();
    Ok(out)
}

/// Fraction of correctly classified rows.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let row = logits.row(r);
            // first maximal index
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            pred == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Test accuracies of a client: the model its algorithm deploys, plus the
/// small-only and large-only paths when a mixture is in play.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub small: Option<f64>,
    pub large: Option<f64>,
}

pub fn evaluate(client: &ClientState, algorithm: Algorithm) -> Result<Evaluation> {
    let test = &client.split.test;
    let x = test.features();
    let large = accuracy(&client.net.local.forward(x)?.0, test.labels());
    if !algorithm.uses_mixture() {
        return Ok(Evaluation {
            accuracy: large,
            small: None,
            large: None,
        });
    }
    let mixed = accuracy(&client.net.forward(x)?.0, test.labels());
    let small = accuracy(&small_forward(x, &client.net.homo, &client.net.local)?.0, test.labels());
    Ok(Evaluation {
        accuracy: mixed,
        small: Some(small),
        large: Some(large),
    })
}

/// Training FLOPs one client spends in a round.
pub fn client_round_flops(client: &ClientState, algorithm: Algorithm, epochs: usize) -> u64 {
    let samples = (client.train_size() * epochs) as u64;
    let homo = client.net.homo.layers().forward_flops();
    let ext = client.net.local.extractor().forward_flops();
    let hd = client.net.local.header().forward_flops();
    let mix = mixing_flops(client.net.local.rep_dim(), 1);
    let per_sample = match algorithm {
        Algorithm::PFedAfm => training_flops(homo + ext + hd + mix) + training_flops(homo + hd),
        Algorithm::PFedAfmEndToEnd => training_flops(homo + ext + hd + mix),
        Algorithm::Standalone | Algorithm::FedAvg | Algorithm::LgFedAvg => training_flops(ext + hd),
    };
    per_sample * samples
}

/// Number of parameters each participant downloads (and uploads) per round.
pub fn shared_param_count(server: &ServerState, clients: &[ClientState], algorithm: Algorithm) -> usize {
    match algorithm {
        Algorithm::PFedAfm | Algorithm::PFedAfmEndToEnd => server.theta.param_count(),
        Algorithm::Standalone => 0,
        Algorithm::FedAvg => server
            .global_model
            .as_ref()
            .map(|m| m.param_count())
            .unwrap_or_else(|| clients.first().map(|c| c.net.local.param_count()).unwrap_or(0)),
        Algorithm::LgFedAvg => server
            .global_header
            .as_ref()
            .map(|h| h.param_count())
            .unwrap_or_else(|| clients.first().map(|c| c.net.local.header().param_count()).unwrap_or(0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client: usize,
    pub train_samples: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub small_accuracy: Option<f64>,
    pub large_accuracy: Option<f64>,
    pub alpha_mean: Option<f64>,
    pub flops: u64,
}

/// One round's snapshot. Serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub algorithm: Algorithm,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundStats>,
    /// Unweighted mean test accuracy over the selected clients.
    pub mean_accuracy: f64,
    pub best_mean_accuracy: f64,
    /// Test accuracy of every client (participating or not), by id.
    pub all_client_accuracy: Vec<f64>,
    pub all_client_mean_accuracy: f64,
    /// mean(α) of every client, by id; empty without a mixture.
    pub alpha_means: Vec<f64>,
    /// FNV-1a over the bits of the aggregated parameters.
    pub aggregate_checksum: Option<String>,
    /// max over participants of ‖aggregate − upload‖².
    pub delta_sq: Option<f64>,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub cumulative_uplink: u64,
    pub cumulative_downlink: u64,
    pub round_flops: u64,
    pub cumulative_flops: u64,
}

pub fn checksum(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub algorithm: Algorithm,
    pub participation: f64,
    pub train: TrainSettings,
}

impl RoundSettings {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            algorithm: config.algorithm,
            participation: config.participation,
            train: TrainSettings {
                epochs: config.local_epochs,
                batch_size: config.batch_size,
            },
        }
    }
}

/// Carries running totals between rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningTotals {
    pub best_mean_accuracy: Option<f64>,
    pub uplink: u64,
    pub downlink: u64,
    pub flops: u64,
}

fn wrap_client(client: usize, round: usize) -> impl Fn(Error) -> Error {
    move |e| Error::ClientFailure {
        client,
        round,
        source: Box::new(e),
    }
}

/// Executes one communication round and advances `server.round`.
///
/// If any client fails, the error is returned before aggregation; the server
/// keeps its previous global state.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    settings: &RoundSettings,
    totals: &mut RunningTotals,
    observer: &mut dyn TrainObserver,
) -> Result<RoundRecord> {
    let round = server.round + 1;
    let seed = server.seed;
    let algorithm = settings.algorithm;
    let selected = select_clients(clients.len(), settings.participation, round, seed)?;
    let shared = shared_param_count(server, clients, algorithm);

    let mut losses = Vec::with_capacity(selected.len());
    let mut uploads: Vec<Vec<f64>> = Vec::with_capacity(selected.len());
    let mut sizes = Vec::with_capacity(selected.len());
    for &k in &selected {
        let client = &mut clients[k];
        let fail = wrap_client(k, round);
        let loss = match algorithm {
            Algorithm::PFedAfm => {
                client.net.homo = server.theta.clone();
                let loss = phase1_train_hetero(client, settings.train, round, seed, observer).map_err(&fail)?;
                phase2_train_homo(client, settings.train, round, seed, observer).map_err(&fail)?;
                uploads.push(client.net.homo.flat_values());
                loss
            }
            Algorithm::PFedAfmEndToEnd => {
                client.net.homo = server.theta.clone();
                let loss = train_end_to_end(client, settings.train, round, seed, observer).map_err(&fail)?;
                uploads.push(client.net.homo.flat_values());
                loss
            }
            Algorithm::Standalone => train_local(client, settings.train, round, seed, observer).map_err(&fail)?,
            Algorithm::FedAvg => {
                let global = server
                    .global_model
                    .as_ref()
                    .ok_or_else(|| Error::invalid("FedAvg server has no global model"))?;
                client.net.local.load_flat_values(&global.flat_values()).map_err(&fail)?;
                let loss = train_local(client, settings.train, round, seed, observer).map_err(&fail)?;
                uploads.push(client.net.local.flat_values());
                loss
            }
            Algorithm::LgFedAvg => {
                let global = server
                    .global_header
                    .as_ref()
                    .ok_or_else(|| Error::invalid("LG-FedAvg server has no global header"))?;
                client
                    .net
                    .local
                    .header_mut()
                    .load_flat_values(&global.flat_values())
                    .map_err(&fail)?;
                let loss = train_local(client, settings.train, round, seed, observer).map_err(&fail)?;
                uploads.push(client.net.local.header().flat_values());
                loss
            }
        };
        losses.push(loss);
        sizes.push(client.train_size());
    }

    let (aggregate_checksum, delta_sq) = if uploads.is_empty() {
        (None, None)
    } else {
        let refs: Vec<&[f64]> = uploads.iter().map(Vec::as_slice).collect();
        let merged = aggregate(&refs, &sizes)?;
        let delta_sq = uploads
            .iter()
            .map(|u| u.iter().zip(&merged).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(0.0, f64::max);
        if !delta_sq.is_finite() {
            return Err(Error::NonFinite(format!("parameter variation in round {round}")));
        }
        match algorithm {
            Algorithm::PFedAfm | Algorithm::PFedAfmEndToEnd => server.theta.load_flat_values(&merged)?,
            Algorithm::FedAvg => server
                .global_model
                .as_mut()
                .expect("checked above")
                .load_flat_values(&merged)?,
            Algorithm::LgFedAvg => server
                .global_header
                .as_mut()
                .expect("checked above")
                .load_flat_values(&merged)?,
            Algorithm::Standalone => unreachable!("standalone uploads nothing"),
        }
        (Some(checksum(&merged)), Some(delta_sq))
    };

    let mut stats = Vec::with_capacity(selected.len());
    let mut round_flops = 0;
    for (&k, &loss) in selected.iter().zip(&losses) {
        let client = &clients[k];
        let eval = evaluate(client, algorithm).map_err(wrap_client(k, round))?;
        let flops = client_round_flops(client, algorithm, settings.train.epochs);
        round_flops += flops;
        stats.push(ClientRoundStats {
            client: k,
            train_samples: client.train_size(),
            train_loss: loss,
            test_accuracy: eval.accuracy,
            small_accuracy: eval.small,
            large_accuracy: eval.large,
            alpha_mean: algorithm.uses_mixture().then(|| client.net.alpha.mean()),
            flops,
        });
    }
    let accs: Vec<f64> = stats.iter().map(|s| s.test_accuracy).collect();
    let mean = mean_accuracy(&accs)?;
    let all_client_accuracy = clients
        .iter()
        .map(|c| evaluate(c, algorithm).map(|e| e.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let alpha_means = if algorithm.uses_mixture() {
        clients.iter().map(|c| c.net.alpha.mean()).collect()
    } else {
        Vec::new()
    };

    let traffic = (selected.len() * shared) as u64;
    totals.uplink += traffic;
    totals.downlink += traffic;
    totals.flops += round_flops;
    let best = totals.best_mean_accuracy.map_or(mean, |b| b.max(mean));
    totals.best_mean_accuracy = Some(best);
    server.round = round;

    Ok(RoundRecord {
        round,
        algorithm,
        selected,
        clients: stats,
        mean_accuracy: mean,
        best_mean_accuracy: best,
        all_client_mean_accuracy: mean_accuracy(&all_client_accuracy)?,
        all_client_accuracy,
        alpha_means,
        aggregate_checksum,
        delta_sq,
        uplink_params: traffic,
        downlink_params: traffic,
        cumulative_uplink: totals.uplink,
        cumulative_downlink: totals.downlink,
        round_flops,
        cumulative_flops: totals.flops,
    })
}

/// The initial state of a federation, built from a validated config.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    match &config.data {
        DataSource::Synthetic => generate_synthetic(
            config.num_classes,
            config.input_dim,
            config.per_class,
            config.spread,
            derive_seed(config.seed, &[stream::DATA]),
        ),
        DataSource::Csv(path) => load_external(
            path,
            &ExternalFormat::Csv,
            Some(config.input_dim),
            Some(config.num_classes),
        ),
        DataSource::Idx { images, labels } => load_external(
            images,
            &ExternalFormat::Idx { labels: labels.clone() },
            Some(config.input_dim),
            Some(config.num_classes),
        ),
    }
}

/// Partitions the data, splits each client's share 8:2 and initializes every
/// model. α starts at all ones and every client's θ copy equals θ⁰.
pub fn build_federation(config: &ExperimentConfig, data: &LabeledDataset) -> Result<Federation> {
    config.validate()?;
    let seed = config.seed;
    let part_seed = derive_seed(seed, &[stream::PARTITION]);
    let parts = match config.partition {
        PartitionKind::Pathological => {
            pathological_partition(data, config.num_clients, config.classes_per_client, part_seed)?
        }
        PartitionKind::Dirichlet => dirichlet_partition(data, config.num_clients, config.gamma, part_seed)?,
    };
    let theta = build_homo_extractor(data.input_dim(), config.rep_dim, derive_seed(seed, &[stream::HOMO]))?;
    let lrs = LearningRates::new(config.eta_omega, config.eta_alpha)?;
    let mut clients = Vec::with_capacity(config.num_clients);
    for (k, part) in parts.iter().enumerate() {
        let split_seed = derive_seed(seed, &[stream::SPLIT, k as u64]);
        let split = match config.partition {
            PartitionKind::Pathological => split_train_test(data, k, part, config.train_ratio, split_seed)?,
            PartitionKind::Dirichlet => split_train_test_lenient(data, k, part, config.train_ratio, split_seed)?,
        };
        let local = build_zoo_model(
            config.zoo.variant_for(k),
            data.input_dim(),
            config.rep_dim,
            data.num_classes(),
            derive_seed(seed, &[stream::MODEL, k as u64]),
        )?;
        let alpha = MixVector::new(config.rep_dim, config.eta_alpha)?;
        clients.push(ClientState {
            id: k,
            net: MixedModel::new(theta.clone(), local, alpha)?,
            split,
            lrs,
        });
    }
    // FedAvg and LG-FedAvg start from the lowest-id client's initial weights.
    let global_model = (config.algorithm == Algorithm::FedAvg).then(|| clients[0].net.local.clone());
    let global_header = (config.algorithm == Algorithm::LgFedAvg).then(|| clients[0].net.local.header().clone());
    Ok(Federation {
        server: ServerState {
            theta,
            global_model,
            global_header,
            round: 0,
            num_clients: config.num_clients,
            seed,
        },
        clients,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub federation: Federation,
}

impl ExperimentResult {
    pub fn best_mean_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.best_mean_accuracy)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, &mut NoopObserver)
}

pub fn run_experiment_with(config: &ExperimentConfig, observer: &mut dyn TrainObserver) -> Result<ExperimentResult> {
    config.validate()?;
    let data = load_dataset(config)?;
    let mut federation = build_federation(config, &data)?;
    let settings = RoundSettings::from_config(config);
    let mut totals = RunningTotals::default();
    let mut records = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        records.push(run_round(
            &mut federation.server,
            &mut federation.clients,
            &settings,
            &mut totals,
            observer,
        )?);
    }
    Ok(ExperimentResult { records, federation })
}

fn with_algorithm(config: &ExperimentConfig, algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        ..config.clone()
    }
}

pub fn baseline_standalone(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment(&with_algorithm(config, Algorithm::Standalone))
}

pub fn baseline_fedavg(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment(&with_algorithm(config, Algorithm::FedAvg))
}

pub fn baseline_lg_fedavg(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment(&with_algorithm(config, Algorithm::LgFedAvg))
}

pub fn variant_end_to_end(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment(&with_algorithm(config, Algorithm::PFedAfmEndToEnd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_sizes_and_determinism() {
        assert_eq!(select_clients(10, 1.0, 1, 0).unwrap(), (0..10).collect::<Vec<_>>());
        let s = select_clients(100, 0.1, 3, 7).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_clients(100, 0.1, 3, 7).unwrap());
        assert_ne!(s, select_clients(100, 0.1, 4, 7).unwrap());
        assert!(select_clients(10, 0.01, 1, 0).is_err());
        assert!(select_clients(10, 0.0, 1, 0).is_err());
        assert!(select_clients(10, 1.5, 1, 0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[&[2.0], &[4.0]], &[5, 5]).unwrap(), vec![3.0]);
        assert_eq!(aggregate(&[&[0.0], &[4.0]], &[1, 3]).unwrap(), vec![3.0]);
        let single = [-0.0, 1e-300, 3.5];
        let out = aggregate(&[&single], &[17]).unwrap();
        assert_eq!(
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            single.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[&[1.0], &[1.0, 2.0]], &[1, 1]).is_err());
        assert!(aggregate(&[&[1.0]], &[0]).is_err());
        assert!(aggregate(&[&[1.0]], &[1, 2]).is_err());
    }

    #[test]
    fn accuracy_uses_first_argmax() {
        let logits = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn checksum_is_bit_sensitive() {
        assert_ne!(checksum(&[0.0]), checksum(&[-0.0]));
        assert_eq!(checksum(&[1.0, 2.0]), checksum(&[1.0, 2.0]));
    }
}

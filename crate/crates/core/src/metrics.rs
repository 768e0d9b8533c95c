//! Accuracy, communication and computation accounting.
//!
//! Communication is counted in parameters, not bytes. FLOPs follow a fixed
//! convention: a dense forward pass costs `2·in·out` per sample, a training
//! step costs three forward passes, and feature mixing costs `3·d` per sample.

use serde::{Deserialize, Serialize};

use crate::autodiff::LayeredModel;
use crate::error::{Error, Result};
use crate::protocol::RoundRecord;

pub fn mean_accuracy(per_client: &[f64]) -> Result<f64> {
    if per_client.is_empty() {
        return Err(Error::invalid("mean accuracy of an empty client list"));
    }
    Ok(per_client.iter().sum::<f64>() / per_client.len() as f64)
}

/// Rounds-to-target times parameters exchanged per round.
pub fn comm_cost(rounds_to_target: u64, per_round_params: u64) -> u64 {
    rounds_to_target * per_round_params
}

/// Parameters exchanged per round when `clients` participants each download
/// and upload `shared_params`.
pub fn per_round_params(clients: usize, shared_params: usize) -> u64 {
    2 * clients as u64 * shared_params as u64
}

/// Forward FLOPs of a dense stack on a batch.
pub fn flops_estimate(model: &LayeredModel, batch_size: usize) -> u64 {
    model.forward_flops() * batch_size as u64
}

/// Two multiplies and one add per representation coordinate.
pub fn mixing_flops(rep_dim: usize, batch_size: usize) -> u64 {
    3 * (rep_dim * batch_size) as u64
}

pub fn training_flops(forward: u64) -> u64 {
    3 * forward
}

/// 1-based index of the first round whose mean accuracy reaches `target`.
/// Uses the instantaneous per-round mean, not the running best.
pub fn rounds_to_target(mean_accuracies: &[f64], target: f64) -> Option<usize> {
    mean_accuracies.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// Running maximum.
pub fn best_so_far(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::NEG_INFINITY, |best, &v| {
            *best = best.max(v);
            Some(*best)
        })
        .collect()
}

/// Per-client series of mean(α), one entry per round, from the records.
pub fn alpha_trace(records: &[RoundRecord]) -> Vec<Vec<f64>> {
    let clients = records.first().map(|r| r.alpha_means.len()).unwrap_or(0);
    (0..clients)
        .map(|k| records.iter().map(|r| r.alpha_means[k]).collect())
        .collect()
}

/// Fraction of steps where a sliding `window`-mean of `series` does not
/// increase. `None` when the series is too short to form two windows.
pub fn descent_fraction(series: &[f64], window: usize) -> Option<(usize, usize)> {
    if window == 0 || series.len() <= window {
        return None;
    }
    let means: Vec<f64> = series
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let steps = means.len() - 1;
    let ok = means.windows(2).filter(|w| w[1] <= w[0]).count();
    Some((ok, steps))
}

/// Per-round metric snapshot derived from a record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub round: usize,
    pub mean_accuracy: f64,
    pub best_mean_accuracy: f64,
    pub client_accuracy: Vec<(usize, f64)>,
    pub cumulative_uplink: u64,
    pub cumulative_downlink: u64,
    pub cumulative_flops: u64,
    pub alpha_means: Vec<f64>,
    pub delta_sq: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub points: Vec<MetricPoint>,
}

impl MetricSeries {
    pub fn from_records(records: &[RoundRecord]) -> Self {
        let points = records
            .iter()
            .map(|r| MetricPoint {
                round: r.round,
                mean_accuracy: r.mean_accuracy,
                best_mean_accuracy: r.best_mean_accuracy,
                client_accuracy: r.clients.iter().map(|c| (c.client, c.test_accuracy)).collect(),
                cumulative_uplink: r.cumulative_uplink,
                cumulative_downlink: r.cumulative_downlink,
                cumulative_flops: r.cumulative_flops,
                alpha_means: r.alpha_means.clone(),
                delta_sq: r.delta_sq,
            })
            .collect();
        Self { points }
    }

    pub fn mean_accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_accuracy).collect()
    }

    pub fn best_mean_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.best_mean_accuracy)
    }

    pub fn rounds_to_target(&self, target: f64) -> Option<usize> {
        rounds_to_target(&self.mean_accuracies(), target)
    }

    pub fn total_communication(&self) -> u64 {
        self.points
            .last()
            .map(|p| p.cumulative_uplink + p.cumulative_downlink)
            .unwrap_or(0)
    }

    pub fn total_flops(&self) -> u64 {
        self.points.last().map(|p| p.cumulative_flops).unwrap_or(0)
    }

    /// Counters never decrease and the best accuracy is the running max.
    pub fn is_consistent(&self) -> bool {
        let best = best_so_far(&self.mean_accuracies());
        self.points.windows(2).all(|w| {
            w[1].cumulative_uplink >= w[0].cumulative_uplink
                && w[1].cumulative_downlink >= w[0].cumulative_downlink
                && w[1].cumulative_flops >= w[0].cumulative_flops
        }) && self
            .points
            .iter()
            .zip(best)
            .all(|(p, b)| p.best_mean_accuracy == b)
    }
}

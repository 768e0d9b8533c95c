//! Batch runner: executes a config once per seed repeat (or once per swept
//! value) and writes everything to disk.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.txt                 the effective configuration
//! summary.csv                one RunSummary row per seed
//! seed_<s>/records.jsonl     one RoundRecord per line
//! seed_<s>/accuracy.csv      AccuracyRow per round
//! seed_<s>/clients.csv       ClientRow per (round, participating client)
//! seed_<s>/alpha_trace.csv   AlphaRow per (round, client); empty without a mixture
//! seed_<s>/theta.ckpt        final shared extractor
//! seed_<s>/client_<k>.ckpt   final mixed model of client k
//! ```
//!
//! A sweep writes one such directory per value under `<key>_<value>/` and a
//! merged `sweep.csv` of SweepRow.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_mixed_model, save_stack};
use crate::config::{canonical_key, ExperimentConfig, SWEEPABLE};
use crate::error::{Error, Result};
use crate::metrics::MetricSeries;
use crate::protocol::{run_experiment, ExperimentResult, RoundRecord};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeat: usize,
    pub seed: u64,
    pub algorithm: String,
    pub best_mean_accuracy: f64,
    pub final_mean_accuracy: f64,
    /// First round whose mean accuracy reached the target.
    pub rounds_to_target: Option<usize>,
    pub total_communication: u64,
    pub total_flops: u64,
}

impl RunSummary {
    pub fn line(&self) -> String {
        let rtt = self
            .rounds_to_target
            .map_or_else(|| "never".to_string(), |r| r.to_string());
        format!(
            "seed {} ({}): best mean acc {:.4}, final {:.4}, rounds to target {rtt}, comm {} params, {} FLOPs",
            self.seed, self.algorithm, self.best_mean_accuracy, self.final_mean_accuracy, self.total_communication,
            self.total_flops
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub round: usize,
    pub mean_accuracy: f64,
    pub best_mean_accuracy: f64,
    pub all_client_mean_accuracy: f64,
    pub cumulative_uplink: u64,
    pub cumulative_downlink: u64,
    pub cumulative_flops: u64,
    pub delta_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub round: usize,
    pub client: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub small_accuracy: Option<f64>,
    pub large_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub round: usize,
    pub client: usize,
    pub alpha_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub value: String,
    pub repeat: usize,
    pub seed: u64,
    pub algorithm: String,
    pub best_mean_accuracy: f64,
    pub final_mean_accuracy: f64,
    pub rounds_to_target: Option<usize>,
    pub total_communication: u64,
    pub total_flops: u64,
}

/// Seed of repeat `r`, derived from the master seed.
pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    derive_seed(master, &[stream::REPEAT, repeat as u64])
}

/// Creates `dir`, refusing a non-empty existing one unless `force`, in which
/// case its contents are removed.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn write_records(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn summarize(repeat: usize, seed: u64, config: &ExperimentConfig, records: &[RoundRecord]) -> RunSummary {
    let series = MetricSeries::from_records(records);
    RunSummary {
        repeat,
        seed,
        algorithm: config.algorithm.to_string(),
        best_mean_accuracy: series.best_mean_accuracy().unwrap_or(f64::NAN),
        final_mean_accuracy: records.last().map_or(f64::NAN, |r| r.mean_accuracy),
        rounds_to_target: series.rounds_to_target(config.target_accuracy),
        total_communication: series.total_communication(),
        total_flops: series.total_flops(),
    }
}

/// Writes one seed's artifacts into `dir`.
pub fn write_seed_artifacts(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records = &result.records;
    write_records(&dir.join("records.jsonl"), records)?;
    let accuracy: Vec<AccuracyRow> = records
        .iter()
        .map(|r| AccuracyRow {
            round: r.round,
            mean_accuracy: r.mean_accuracy,
            best_mean_accuracy: r.best_mean_accuracy,
            all_client_mean_accuracy: r.all_client_mean_accuracy,
            cumulative_uplink: r.cumulative_uplink,
            cumulative_downlink: r.cumulative_downlink,
            cumulative_flops: r.cumulative_flops,
            delta_sq: r.delta_sq,
        })
        .collect();
    write_csv(&dir.join("accuracy.csv"), &accuracy)?;
    let clients: Vec<ClientRow> = records
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(|c| ClientRow {
                round: r.round,
                client: c.client,
                train_loss: c.train_loss,
                test_accuracy: c.test_accuracy,
                small_accuracy: c.small_accuracy,
                large_accuracy: c.large_accuracy,
            })
        })
        .collect();
    write_csv(&dir.join("clients.csv"), &clients)?;
    let alpha: Vec<AlphaRow> = records
        .iter()
        .flat_map(|r| {
            r.alpha_means.iter().enumerate().map(|(client, &alpha_mean)| AlphaRow {
                round: r.round,
                client,
                alpha_mean,
            })
        })
        .collect();
    write_csv(&dir.join("alpha_trace.csv"), &alpha)?;
    save_stack(&dir.join("theta.ckpt"), result.federation.server.theta.layers())?;
    for c in &result.federation.clients {
        save_mixed_model(&dir.join(format!("client_{}.ckpt", c.id)), &c.net)?;
    }
    Ok(())
}

/// Runs every seed repeat of `config` into `config.out_dir`. `on_seed` is
/// called after each repeat finishes.
pub fn run(config: &ExperimentConfig, force: bool, on_seed: &mut dyn FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    config.validate()?;
    prepare_out_dir(&config.out_dir, force)?;
    run_into(config, &config.out_dir, on_seed)
}

fn run_into(config: &ExperimentConfig, dir: &Path, on_seed: &mut dyn FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    fs::write(dir.join("config.txt"), config.to_text())?;
    let mut summaries = Vec::with_capacity(config.repeats);
    for repeat in 0..config.repeats {
        let seed = repeat_seed(config.seed, repeat);
        let seeded = ExperimentConfig {
            seed,
            ..config.clone()
        };
        let result = run_experiment(&seeded)?;
        write_seed_artifacts(&dir.join(format!("seed_{seed}")), &result)?;
        let summary = summarize(repeat, seed, config, &result.records);
        on_seed(&summary);
        summaries.push(summary);
    }
    write_csv(&dir.join("summary.csv"), &summaries)?;
    Ok(summaries)
}

/// Validates a sweep up front and returns one config per value.
pub fn sweep_configs(config: &ExperimentConfig, key: &str, values: &[String]) -> Result<Vec<ExperimentConfig>> {
    let mut problems = Vec::new();
    let canonical = canonical_key(key).filter(|k| SWEEPABLE.contains(k));
    if canonical.is_none() {
        problems.push(format!("{key:?} cannot be swept (sweepable: {})", SWEEPABLE.join(", ")));
    }
    if values.is_empty() {
        problems.push("sweep needs at least one value".to_string());
    }
    let mut configs = Vec::new();
    if let Some(k) = canonical {
        for v in values {
            let mut c = config.clone();
            match c.set(k, v) {
                Ok(()) => problems.extend(c.problems().into_iter().map(|p| format!("{key} = {v}: {p}"))),
                Err(e) => problems.push(e),
            }
            configs.push(c);
        }
    }
    if problems.is_empty() {
        Ok(configs)
    } else {
        Err(Error::Config(problems))
    }
}

pub fn sweep_dir_name(key: &str, value: &str) -> String {
    let key = canonical_key(key).unwrap_or(key);
    format!("{key}_{value}")
}

/// One run per value in `<out>/<key>_<value>/`, plus a merged `sweep.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
    force: bool,
    on_seed: &mut dyn FnMut(&str, &RunSummary),
) -> Result<Vec<SweepRow>> {
    let configs = sweep_configs(config, key, values)?;
    prepare_out_dir(&config.out_dir, force)?;
    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let dir: PathBuf = config.out_dir.join(sweep_dir_name(key, value));
        fs::create_dir_all(&dir)?;
        let summaries = run_into(c, &dir, &mut |s| on_seed(value, s))?;
        rows.extend(summaries.into_iter().map(|s| SweepRow {
            key: key.to_string(),
            value: value.clone(),
            repeat: s.repeat,
            seed: s.seed,
            algorithm: s.algorithm,
            best_mean_accuracy: s.best_mean_accuracy,
            final_mean_accuracy: s.final_mean_accuracy,
            rounds_to_target: s.rounds_to_target,
            total_communication: s.total_communication,
            total_flops: s.total_flops,
        }));
    }
    write_csv(&config.out_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algorithm;

    fn tiny(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            num_clients: 2,
            rounds: 2,
            per_class: 20,
            out_dir: out.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn refuses_non_empty_output_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        let err = prepare_out_dir(dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::OutputExists(_)));
        assert_eq!(err.exit_code(), 1);
        prepare_out_dir(dir.path(), true).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn run_writes_loadable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let config = tiny(&out);
        let mut lines = 0;
        let summaries = run(&config, false, &mut |_| lines += 1).unwrap();
        assert_eq!((summaries.len(), lines), (1, 1));
        let seed_dir = out.join(format!("seed_{}", summaries[0].seed));
        assert_eq!(read_records(&seed_dir.join("records.jsonl")).unwrap().len(), 2);
        assert_eq!(read_csv::<AccuracyRow>(&seed_dir.join("accuracy.csv")).unwrap().len(), 2);
        assert_eq!(read_csv::<ClientRow>(&seed_dir.join("clients.csv")).unwrap().len(), 4);
        assert_eq!(read_csv::<AlphaRow>(&seed_dir.join("alpha_trace.csv")).unwrap().len(), 4);
        assert_eq!(read_csv::<RunSummary>(&out.join("summary.csv")).unwrap(), summaries);
        let text = fs::read_to_string(out.join("config.txt")).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), config);
        crate::checkpoint::load_mixed_model(&seed_dir.join("client_1.ckpt")).unwrap();
        crate::checkpoint::load_stack(&seed_dir.join("theta.ckpt")).unwrap();
        assert!(run(&config, false, &mut |_| {}).is_err());
    }

    #[test]
    fn repeat_seeds_are_distinct() {
        assert_ne!(repeat_seed(0, 0), repeat_seed(0, 1));
        assert_eq!(repeat_seed(5, 2), repeat_seed(5, 2));
    }

    #[test]
    fn sweep_rejections() {
        let c = ExperimentConfig::default();
        assert!(matches!(sweep_configs(&c, "rounds", &["1".into()]), Err(Error::Config(_))));
        assert!(matches!(sweep_configs(&c, "gamma", &[]), Err(Error::Config(_))));
        assert!(matches!(
            sweep_configs(&c, "classes_per_client", &["11".into()]),
            Err(Error::Config(_))
        ));
        assert_eq!(sweep_configs(&c, "E", &["1".into(), "10".into()]).unwrap()[1].local_epochs, 10);
    }

    #[test]
    fn sweep_writes_one_dir_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            algorithm: Algorithm::PFedAfm,
            rounds: 1,
            ..tiny(dir.path())
        };
        let values: Vec<String> = ["0.001", "0.01", "0.1", "1"].iter().map(|s| s.to_string()).collect();
        let rows = sweep(&config, "eta_alpha", &values, true, &mut |_, _| {}).unwrap();
        assert_eq!(rows.len(), 4);
        for v in &values {
            assert!(dir.path().join(format!("eta_alpha_{v}")).join("summary.csv").exists());
        }
        assert_eq!(read_csv::<SweepRow>(&dir.path().join("sweep.csv")).unwrap(), rows);
    }
}

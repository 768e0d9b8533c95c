//! Experiment configuration: one `key = value` per line, `#` starts a comment.
//!
//! ```text
//! algorithm = pfedafm          # pfedafm | pfedafm_e2e | standalone | fedavg | lg_fedavg
//! num_clients = 10
//! participation = 1.0
//! rounds = 30
//! partition = pathological     # or dirichlet (uses `gamma`)
//! classes_per_client = 2
//! ```
//!
//! Every problem in a file is reported at once; unknown and repeated keys are
//! errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::ZOO_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "pfedafm")]
    PFedAfm,
    #[serde(rename = "pfedafm_e2e")]
    PFedAfmEndToEnd,
    Standalone,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "lg_fedavg")]
    LgFedAvg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::PFedAfm,
        Algorithm::PFedAfmEndToEnd,
        Algorithm::Standalone,
        Algorithm::FedAvg,
        Algorithm::LgFedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PFedAfm => "pfedafm",
            Algorithm::PFedAfmEndToEnd => "pfedafm_e2e",
            Algorithm::Standalone => "standalone",
            Algorithm::FedAvg => "fedavg",
            Algorithm::LgFedAvg => "lg_fedavg",
        }
    }

    /// Whether clients carry a shared extractor and mix vector.
    pub fn uses_mixture(self) -> bool {
        matches!(self, Algorithm::PFedAfm | Algorithm::PFedAfmEndToEnd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Which zoo variant each client trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZooAssignment {
    /// Client `k` trains variant `k mod 5`.
    Heterogeneous,
    /// Every client trains the same variant.
    Homogeneous(usize),
}

impl ZooAssignment {
    pub fn variant_for(self, client: usize) -> usize {
        match self {
            ZooAssignment::Heterogeneous => client % ZOO_SIZE,
            ZooAssignment::Homogeneous(v) => v,
        }
    }
}

impl fmt::Display for ZooAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZooAssignment::Heterogeneous => f.write_str("heterogeneous"),
            ZooAssignment::Homogeneous(v) => write!(f, "homogeneous:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Csv(p) => write!(f, "csv:{}", p.display()),
            DataSource::Idx { images, labels } => write!(f, "idx:{},{}", images.display(), labels.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Pathological,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the local model; the shared extractor uses the same.
    pub eta_omega: f64,
    pub eta_alpha: f64,
    pub zoo: ZooAssignment,
    pub rep_dim: usize,
    pub data: DataSource,
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub partition: PartitionKind,
    pub classes_per_client: usize,
    pub gamma: f64,
    pub train_ratio: f64,
    pub target_accuracy: f64,
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::PFedAfm,
            num_clients: 10,
            participation: 1.0,
            rounds: 30,
            local_epochs: 1,
            batch_size: 64,
            eta_omega: 0.01,
            eta_alpha: 0.1,
            zoo: ZooAssignment::Heterogeneous,
            rep_dim: 32,
            data: DataSource::Synthetic,
            num_classes: 10,
            input_dim: 64,
            per_class: 200,
            spread: DEFAULT_SPREAD,
            partition: PartitionKind::Pathological,
            classes_per_client: 2,
            gamma: 0.5,
            train_ratio: 0.8,
            target_accuracy: 0.9,
            seed: 0,
            repeats: 1,
            out_dir: PathBuf::from("results"),
        }
    }
}

/// Cluster spread that puts standalone accuracy near 90% on the default task.
pub const DEFAULT_SPREAD: f64 = 2.75;

/// Keys a sweep may vary.
pub const SWEEPABLE: [&str; 5] = ["classes_per_client", "gamma", "eta_alpha", "batch_size", "local_epochs"];

/// Maps accepted aliases to canonical key names.
pub fn canonical_key(key: &str) -> Option<&'static str> {
    Some(match key {
        "algorithm" => "algorithm",
        "num_clients" | "N" => "num_clients",
        "participation" | "C" => "participation",
        "rounds" | "T" => "rounds",
        "local_epochs" | "E" => "local_epochs",
        "batch_size" => "batch_size",
        "eta_omega" | "lr" => "eta_omega",
        "eta_alpha" | "lr_alpha" => "eta_alpha",
        "zoo" => "zoo",
        "rep_dim" | "d" => "rep_dim",
        "data" => "data",
        "num_classes" => "num_classes",
        "input_dim" => "input_dim",
        "per_class" => "per_class",
        "spread" => "spread",
        "partition" => "partition",
        "classes_per_client" => "classes_per_client",
        "gamma" => "gamma",
        "target_accuracy" => "target_accuracy",
        "seed" => "seed",
        "repeats" => "repeats",
        "out" => "out",
        _ => return None,
    })
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?} as a number"))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut problems = Vec::new();
        let mut seen: Vec<&'static str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`, got {line:?}", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(canonical) = canonical_key(key) else {
                problems.push(format!("line {}: unknown key {key:?}", lineno + 1));
                continue;
            };
            if seen.contains(&canonical) {
                problems.push(format!("line {}: duplicate key {key:?}", lineno + 1));
                continue;
            }
            seen.push(canonical);
            if let Err(e) = config.set(canonical, value) {
                problems.push(format!("line {}: {e}", lineno + 1));
            }
        }
        if !seen.contains(&"algorithm") {
            problems.push("missing required key `algorithm`".into());
        }
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Assigns one key (canonical name or alias) without validating the whole
    /// config.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let key = canonical_key(key).ok_or_else(|| format!("unknown key {key:?}"))?;
        match key {
            "algorithm" => self.algorithm = value.parse()?,
            "num_clients" => self.num_clients = parse_num(key, value)?,
            "participation" => self.participation = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "local_epochs" => self.local_epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "eta_omega" => self.eta_omega = parse_num(key, value)?,
            "eta_alpha" => self.eta_alpha = parse_num(key, value)?,
            "rep_dim" => self.rep_dim = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "input_dim" => self.input_dim = parse_num(key, value)?,
            "per_class" => self.per_class = parse_num(key, value)?,
            "spread" => self.spread = parse_num(key, value)?,
            "classes_per_client" => self.classes_per_client = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "target_accuracy" => self.target_accuracy = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "repeats" => self.repeats = parse_num(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "zoo" => {
                self.zoo = match value.split_once(':') {
                    None if value == "heterogeneous" => ZooAssignment::Heterogeneous,
                    None if value == "homogeneous" => ZooAssignment::Homogeneous(0),
                    Some(("homogeneous", v)) => ZooAssignment::Homogeneous(parse_num(key, v)?),
                    _ => return Err(format!("zoo: expected `heterogeneous` or `homogeneous[:id]`, got {value:?}")),
                }
            }
            "data" => {
                self.data = match value.split_once(':') {
                    None if value == "synthetic" => DataSource::Synthetic,
                    Some(("csv", p)) if !p.is_empty() => DataSource::Csv(PathBuf::from(p)),
                    Some(("idx", rest)) => match rest.split_once(',') {
                        Some((i, l)) if !i.is_empty() && !l.is_empty() => DataSource::Idx {
                            images: PathBuf::from(i.trim()),
                            labels: PathBuf::from(l.trim()),
                        },
                        _ => return Err("data: idx needs `idx:<images>,<labels>`".into()),
                    },
                    _ => return Err(format!("data: expected synthetic, csv:<path> or idx:<images>,<labels>, got {value:?}")),
                }
            }
            "partition" => {
                self.partition = match value {
                    "pathological" => PartitionKind::Pathological,
                    "dirichlet" => PartitionKind::Dirichlet,
                    _ => return Err(format!("partition: expected pathological or dirichlet, got {value:?}")),
                }
            }
            _ => unreachable!("canonical keys are exhaustively matched"),
        }
        Ok(())
    }

    /// Number of clients selected per round.
    pub fn clients_per_round(&self) -> usize {
        (self.participation * self.num_clients as f64).round() as usize
    }

    /// Every violated constraint, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.num_clients == 0 {
            p.push("num_clients must be ≥ 1".to_string());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            p.push("participation fraction must be in (0,1]".to_string());
        } else if self.num_clients > 0 && self.clients_per_round() == 0 {
            p.push(format!(
                "participation {} selects no clients out of {}",
                self.participation, self.num_clients
            ));
        }
        if self.local_epochs == 0 {
            p.push("local_epochs must be ≥ 1".to_string());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be ≥ 1".to_string());
        }
        if !(self.eta_omega >= 0.0 && self.eta_omega.is_finite()) {
            p.push("eta_omega must be finite and ≥ 0".to_string());
        }
        if !(self.eta_alpha >= 0.0 && self.eta_alpha.is_finite()) {
            p.push("eta_alpha must be ≥ 0".to_string());
        }
        if self.rep_dim < 2 {
            p.push("rep_dim must be ≥ 2".to_string());
        }
        if self.num_classes < 2 {
            p.push("num_classes must be ≥ 2".to_string());
        }
        if self.input_dim == 0 {
            p.push("input_dim must be ≥ 1".to_string());
        }
        if self.data == DataSource::Synthetic {
            if self.per_class < 10 {
                p.push("per_class must be ≥ 10".to_string());
            }
            if !(self.spread >= 0.0 && self.spread.is_finite()) {
                p.push("spread must be ≥ 0".to_string());
            }
        }
        match self.partition {
            PartitionKind::Pathological => {
                if self.classes_per_client == 0 || self.classes_per_client > self.num_classes {
                    p.push(format!(
                        "classes_per_client must be in [1, {}], got {}",
                        self.num_classes, self.classes_per_client
                    ));
                }
            }
            PartitionKind::Dirichlet => {
                if !(self.gamma > 0.0 && self.gamma.is_finite()) {
                    p.push("gamma must be > 0".to_string());
                }
            }
        }
        if let ZooAssignment::Homogeneous(v) = self.zoo {
            if v >= ZOO_SIZE {
                p.push(format!("zoo variant must be in [0, {ZOO_SIZE}), got {v}"));
            }
        }
        if self.algorithm == Algorithm::FedAvg && self.zoo == ZooAssignment::Heterogeneous {
            p.push("fedavg requires a homogeneous zoo (zoo = homogeneous:<id>)".to_string());
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            p.push("target_accuracy must be in (0,1]".to_string());
        }
        if self.repeats == 0 {
            p.push("repeats must be ≥ 1".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Serializes back to the textual format; `parse(to_text())` reproduces
    /// the config.
    pub fn to_text(&self) -> String {
        let partition = match self.partition {
            PartitionKind::Pathological => "pathological",
            PartitionKind::Dirichlet => "dirichlet",
        };
        [
            format!("algorithm = {}", self.algorithm),
            format!("num_clients = {}", self.num_clients),
            format!("participation = {}", self.participation),
            format!("rounds = {}", self.rounds),
            format!("local_epochs = {}", self.local_epochs),
            format!("batch_size = {}", self.batch_size),
            format!("eta_omega = {}", self.eta_omega),
            format!("eta_alpha = {}", self.eta_alpha),
            format!("zoo = {}", self.zoo),
            format!("rep_dim = {}", self.rep_dim),
            format!("data = {}", self.data),
            format!("num_classes = {}", self.num_classes),
            format!("input_dim = {}", self.input_dim),
            format!("per_class = {}", self.per_class),
            format!("spread = {}", self.spread),
            format!("partition = {partition}"),
            format!("classes_per_client = {}", self.classes_per_client),
            format!("gamma = {}", self.gamma),
            format!("target_accuracy = {}", self.target_accuracy),
            format!("seed = {}", self.seed),
            format!("repeats = {}", self.repeats),
            format!("out = {}", self.out_dir.display()),
        ]
        .join("\n")
            + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problems(text: &str) -> Vec<String> {
        match ExperimentConfig::parse(text) {
            Err(Error::Config(p)) => p,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = ExperimentConfig::parse("algorithm = pfedafm\n").unwrap();
        assert_eq!((c.local_epochs, c.batch_size, c.rep_dim), (1, 64, 32));
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn comments_aliases_and_blank_lines() {
        let c = ExperimentConfig::parse(
            "# header\n\nalgorithm = standalone  # trailing\nN = 4\nC=0.5\nE = 10\nzoo = homogeneous:3\n",
        )
        .unwrap();
        assert_eq!(c.algorithm, Algorithm::Standalone);
        assert_eq!((c.num_clients, c.participation, c.local_epochs), (4, 0.5, 10));
        assert_eq!(c.zoo, ZooAssignment::Homogeneous(3));
        assert_eq!(c.clients_per_round(), 2);
    }

    #[test]
    fn zero_participation_rejected() {
        let p = problems("algorithm = pfedafm\nparticipation = 0\n");
        assert_eq!(p, vec!["participation fraction must be in (0,1]"]);
    }

    #[test]
    fn fedavg_needs_homogeneous_zoo() {
        let p = problems("algorithm = fedavg\n");
        assert!(p[0].contains("homogeneous"), "{p:?}");
        assert!(ExperimentConfig::parse("algorithm = fedavg\nzoo = homogeneous:0\n").is_ok());
    }

    #[test]
    fn all_problems_reported_in_one_pass() {
        let p = problems("algorithm = nope\nbogus = 1\nbatch_size = 0\nrounds = ten\nrounds = 3\nno equals sign\n");
        assert_eq!(p.len(), 6, "{p:#?}");
        assert!(p.iter().any(|m| m.contains("unknown algorithm")));
        assert!(p.iter().any(|m| m.contains("unknown key \"bogus\"")));
        assert!(p.iter().any(|m| m.contains("duplicate key")));
        assert!(p.iter().any(|m| m.contains("cannot parse")));
        assert!(p.iter().any(|m| m.contains("batch_size")));
        assert!(p.iter().any(|m| m.contains("key = value")));
    }

    #[test]
    fn missing_algorithm_is_reported() {
        assert_eq!(problems("rounds = 3\n"), vec!["missing required key `algorithm`"]);
    }

    #[test]
    fn data_sources_parse() {
        let c = ExperimentConfig::parse("algorithm = pfedafm\ndata = idx:a.idx, b.idx\n").unwrap();
        assert_eq!(
            c.data,
            DataSource::Idx {
                images: "a.idx".into(),
                labels: "b.idx".into()
            }
        );
        let c = ExperimentConfig::parse("algorithm = pfedafm\ndata = csv:x.csv\n").unwrap();
        assert_eq!(c.data, DataSource::Csv("x.csv".into()));
        assert!(ExperimentConfig::parse("algorithm = pfedafm\ndata = idx:a.idx\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = ExperimentConfig {
            algorithm: Algorithm::LgFedAvg,
            partition: PartitionKind::Dirichlet,
            gamma: 0.3,
            eta_alpha: 0.001,
            zoo: ZooAssignment::Homogeneous(2),
            data: DataSource::Csv("data/x.csv".into()),
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}

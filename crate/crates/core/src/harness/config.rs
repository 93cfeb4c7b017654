//! Run configuration: a flat `key=value` text format.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::LocalConfig;
use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::server::ServerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedmate,
    FedavgFt,
    LocalOnly,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedmate => "fedmate",
            Method::FedavgFt => "fedavg_ft",
            Method::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedmate" => Ok(Method::Fedmate),
            "fedavg_ft" => Ok(Method::FedavgFt),
            "local_only" => Ok(Method::LocalOnly),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Skew,
    Pathological,
}

impl FromStr for PartitionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skew" => Ok(PartitionKind::Skew),
            "pathological" => Ok(PartitionKind::Pathological),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionKind::Skew => "skew",
            PartitionKind::Pathological => "pathological",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub num_clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub server_lr: f64,
    pub finetune_steps: usize,
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub cft_multiplier: f64,
    pub batch_size: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    /// `None` picks a radius from the spread.
    pub sphere_radius: Option<f64>,
    pub test_samples_per_class: usize,
    pub partition: PartitionKind,
    pub skew_s: u32,
    pub dominant_classes: usize,
    pub classes_per_client: usize,
    pub baseline_finetune_epochs: usize,
    pub eval_every: usize,
    pub method: Method,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 150,
            num_clients: 20,
            participation: 1.0,
            local_epochs: 5,
            local_lr: 0.05,
            server_lr: 0.01,
            finetune_steps: 5,
            lambda_e: 0.8,
            lambda_c: 0.6,
            cft_multiplier: 1.0,
            batch_size: 32,
            num_classes: 10,
            input_dim: 16,
            hidden_dims: vec![32],
            feature_dim: 32,
            samples_per_class: 100,
            cluster_spread: 1.0,
            sphere_radius: None,
            test_samples_per_class: 50,
            partition: PartitionKind::Skew,
            skew_s: 30,
            dominant_classes: 2,
            classes_per_client: 3,
            baseline_finetune_epochs: 5,
            eval_every: 10,
            method: Method::Fedmate,
            seed: 0,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn positive_rate(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "rounds" => self.rounds = parse(key, value)?,
            "num_clients" => self.num_clients = parse(key, value)?,
            "participation" => self.participation = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            "local_lr" => self.local_lr = parse(key, value)?,
            "server_lr" => self.server_lr = parse(key, value)?,
            "finetune_steps" => self.finetune_steps = parse(key, value)?,
            "lambda_e" => self.lambda_e = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "cft_multiplier" => self.cft_multiplier = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "cluster_spread" => self.cluster_spread = parse(key, value)?,
            "sphere_radius" => {
                self.sphere_radius = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "test_samples_per_class" => self.test_samples_per_class = parse(key, value)?,
            "partition" => self.partition = parse(key, value)?,
            "skew_s" => self.skew_s = parse(key, value)?,
            "dominant_classes" => self.dominant_classes = parse(key, value)?,
            "classes_per_client" => self.classes_per_client = parse(key, value)?,
            "baseline_finetune_epochs" => self.baseline_finetune_epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "method" => self.method = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Renders the configuration in the same format [`FromStr`] accepts.
    pub fn to_kv_string(&self) -> String {
        let hidden: Vec<String> = self.hidden_dims.iter().map(usize::to_string).collect();
        let lines = [
            ("rounds", self.rounds.to_string()),
            ("num_clients", self.num_clients.to_string()),
            ("participation", self.participation.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("local_lr", self.local_lr.to_string()),
            ("server_lr", self.server_lr.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("lambda_e", self.lambda_e.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("cft_multiplier", self.cft_multiplier.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("hidden_dims", hidden.join(",")),
            ("feature_dim", self.feature_dim.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("cluster_spread", self.cluster_spread.to_string()),
            (
                "sphere_radius",
                self.sphere_radius.map_or("auto".into(), |r| r.to_string()),
            ),
            ("test_samples_per_class", self.test_samples_per_class.to_string()),
            ("partition", self.partition.to_string()),
            ("skew_s", self.skew_s.to_string()),
            ("dominant_classes", self.dominant_classes.to_string()),
            ("classes_per_client", self.classes_per_client.to_string()),
            ("baseline_finetune_epochs", self.baseline_finetune_epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            (
                "output_dir",
                self.output_dir
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        positive_rate("local_lr", self.local_lr)?;
        positive_rate("server_lr", self.server_lr)?;
        positive_rate("cft_multiplier", self.cft_multiplier)?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        for (name, v) in [("lambda_e", self.lambda_e), ("lambda_c", self.lambda_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config(format!(
                "cluster_spread must be nonnegative, got {}",
                self.cluster_spread
            )));
        }
        if let Some(r) = self.sphere_radius {
            positive_rate("sphere_radius", r)?;
        }
        let nonzero = [
            ("num_clients", self.num_clients),
            ("batch_size", self.batch_size),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if self.skew_s > 100 {
            return Err(Error::Config(format!("skew_s must be in 0..=100, got {}", self.skew_s)));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        let mode = match self.partition {
            PartitionKind::Skew => PartitionMode::Skew {
                s: self.skew_s,
                dominant_classes: self.dominant_classes,
            },
            PartitionKind::Pathological => PartitionMode::Pathological {
                classes_per_client: self.classes_per_client,
            },
        };
        PartitionSpec {
            mode,
            num_clients: self.num_clients,
            seed,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.local_lr,
            lambda_c: self.lambda_c,
            lambda_e: self.lambda_e,
            max_round: self.rounds,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            finetune_lr: self.server_lr,
            finetune_steps: self.finetune_steps,
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Lines are `key=value`; blank lines and `#` comments are ignored.
    /// Unknown and repeated keys are errors. Missing keys keep defaults.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

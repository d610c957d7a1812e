//! Experiment configuration: a sectioned `key = value` file (TOML syntax).
//!
//! ```toml
//! scenario = "compare"
//! seed = 7
//!
//! [data]
//! num_classes = 10
//! samples_per_class = 400
//! feature_dim = 16
//! separation = 1.2
//! num_clients = 20
//! alpha = 0.1
//!
//! [fed]
//! rounds = 100
//! lr = 0.05
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PoolSpec, DEFAULT_SPLIT};
use crate::datastore::Policy;
use crate::error::{FedError, Result};
use crate::federation::FedConfig;
use crate::personalize::{validate_grid, KernelConfig, DEFAULT_LAMBDA_GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Compare,
    Unseen,
    CapacitySweep,
    KernelSweep,
    QualitySweep,
    HwSplit,
    Drift,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Compare => "compare",
            Scenario::Unseen => "unseen",
            Scenario::CapacitySweep => "capacity_sweep",
            Scenario::KernelSweep => "kernel_sweep",
            Scenario::QualitySweep => "quality_sweep",
            Scenario::HwSplit => "hw_split",
            Scenario::Drift => "drift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioner {
    Dirichlet,
    Pachinko,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fedmem-out")
}
fn default_classes() -> usize {
    10
}
fn default_separation() -> f64 {
    1.5
}
fn default_partitioner() -> Partitioner {
    Partitioner::Dirichlet
}
fn default_beta() -> f64 {
    10.0
}
fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}
fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_batch() -> usize {
    16
}
fn default_finetune_epochs() -> usize {
    5
}
fn default_local_epochs() -> usize {
    20
}
fn default_k() -> usize {
    10
}
fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}
fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// 0 disables the coarse label structure.
    #[serde(default)]
    pub num_coarse: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_partitioner")]
    pub partitioner: Partitioner,
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub num_clients: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl DataSection {
    pub fn pool_spec(&self, seed: u64) -> PoolSpec {
        PoolSpec {
            num_classes: self.num_classes,
            num_coarse: self.num_coarse,
            samples_per_class: self.samples_per_class,
            feature_dim: self.feature_dim,
            separation: self.separation,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; the last one is the representation.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: default_hidden() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub rounds: usize,
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default = "one_usize")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    /// `[[round, factor], ...]`
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    /// Fine-tuning epochs of the FedAvg+ baseline.
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate; defaults to the last scheduled rate.
    #[serde(default)]
    pub finetune_lr: Option<f64>,
    /// Epochs of the Local baseline.
    #[serde(default = "default_local_epochs")]
    pub local_baseline_epochs: usize,
}

impl FedSection {
    pub fn fed_config(&self, seed: u64) -> FedConfig {
        FedConfig {
            rounds: self.rounds,
            participation: self.participation,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: self.lr_schedule.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizeSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    /// Build datastores from train + validation after tuning.
    #[serde(default)]
    pub retrain_on_train_val: bool,
}

impl Default for PersonalizeSection {
    fn default() -> Self {
        PersonalizeSection {
            k: default_k(),
            sigma: 1.0,
            lambda_grid: default_grid(),
            retrain_on_train_val: false,
        }
    }
}

impl PersonalizeSection {
    pub fn kernel(&self) -> KernelConfig {
        KernelConfig { k: self.k, sigma: self.sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnseenSection {
    /// Fraction of clients taking part in federated training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Which block of the seeded client order joins late. Running folds
    /// `0..ceil(M / newcomers)` makes every client a newcomer exactly once.
    #[serde(default)]
    pub fold: usize,
}

impl Default for UnseenSection {
    fn default() -> Self {
        UnseenSection { train_fraction: default_train_fraction(), fold: 0 }
    }
}

impl UnseenSection {
    /// Number of federation members and of newcomers among `m` clients.
    pub fn group_sizes(&self, m: usize) -> (usize, usize) {
        let members = ((self.train_fraction * m as f64).round() as usize).clamp(1, m.max(2) - 1);
        (members, m.saturating_sub(members))
    }

    pub fn num_folds(&self, m: usize) -> usize {
        let (_, new) = self.group_sizes(m);
        m.div_ceil(new.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    pub capacities: Vec<f64>,
    /// Dirichlet concentrations; defaults to `[data].alpha`.
    #[serde(default)]
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub k_grid: Vec<usize>,
    pub sigma_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualitySection {
    /// Centralized training epochs after which the model is evaluated
    /// (0 is the initialization).
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwSplitSection {
    pub delta_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub t0: usize,
    pub horizon: usize,
    pub policies: Vec<String>,
    /// Fixed mixing weight; tuned per client on pre-shift validation data
    /// when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Reuse the pre-shift partition after the shift (no actual drift).
    #[serde(default)]
    pub identical_shift: bool,
}

impl DriftSection {
    pub fn parsed_policies(&self) -> Result<Vec<Policy>> {
        self.policies.iter().map(|p| p.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub model: ModelSection,
    pub fed: Option<FedSection>,
    #[serde(default)]
    pub personalize: PersonalizeSection,
    #[serde(default)]
    pub unseen: UnseenSection,
    pub capacity: Option<CapacitySection>,
    pub kernel: Option<KernelSection>,
    pub quality: Option<QualitySection>,
    pub hw_split: Option<HwSplitSection>,
    pub drift: Option<DriftSection>,
}

/// 1-based line of byte offset `pos` in `text`.
fn line_of(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of a `[section]` header, if present.
fn section_line(text: &str, section: &str) -> Option<usize> {
    let header = format!("[{section}]");
    text.lines().position(|l| l.trim() == header).map(|i| i + 1)
}

fn require<'a, T>(value: &'a Option<T>, section: &str, scenario: Scenario) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| {
        FedError::Config(format!(
            "missing section [{section}] required by scenario '{}'",
            scenario.name()
        ))
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => FedError::Config(format!("line {}: {msg}", line_of(text, span.start))),
                None => FedError::Config(msg),
            }
        })?;
        cfg.validate().map_err(|e| match e {
            FedError::Config(msg) => {
                let section = msg
                    .strip_prefix('[')
                    .and_then(|m| m.split(']').next())
                    .and_then(|s| section_line(text, s));
                match section {
                    Some(line) => FedError::Config(format!("line {line}: {msg}")),
                    None => FedError::Config(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            FedError::Config(msg) => FedError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn data(&self) -> Result<&DataSection> {
        require(&self.data, "data", self.scenario)
    }

    pub fn fed(&self) -> Result<&FedSection> {
        require(&self.fed, "fed", self.scenario)
    }

    /// Checks that every section the scenario needs is present and sane.
    /// Messages start with the offending `[section]`.
    pub fn validate(&self) -> Result<()> {
        let bad = |section: &str, msg: String| Err(FedError::Config(format!("[{section}] {msg}")));
        let data = self.data()?;
        let fed = self.fed()?;

        if data.num_classes < 2 {
            return bad("data", "num_classes must be at least 2".into());
        }
        if data.num_clients == 0 || data.samples_per_class == 0 || data.feature_dim == 0 {
            return bad("data", "num_clients, samples_per_class and feature_dim must be positive".into());
        }
        if !(data.alpha > 0.0) || !(data.beta > 0.0) {
            return bad("data", "alpha and beta must be positive".into());
        }
        if data.partitioner == Partitioner::Pachinko && data.num_coarse == 0 {
            return bad("data", "pachinko partitioning needs num_coarse > 0".into());
        }
        if data.num_coarse > 0 && data.num_classes % data.num_coarse != 0 {
            return bad("data", "num_classes must be a multiple of num_coarse".into());
        }
        if data.split.iter().any(|r| !(*r >= 0.0)) || (data.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("data", "split ratios must be non-negative and sum to 1".into());
        }
        if data.split[1] == 0.0 || data.split[2] == 0.0 {
            return bad("data", "validation and test ratios must be positive".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model", "hidden must list at least one positive width".into());
        }
        if let Err(FedError::Config(msg)) = fed.fed_config(0).validate() {
            return bad("fed", msg);
        }
        if fed.finetune_lr.is_some_and(|lr| !(lr >= 0.0)) {
            return bad("fed", "finetune_lr must be non-negative".into());
        }
        if let Err(FedError::Config(msg)) = self.personalize.kernel().validate() {
            return bad("personalize", msg);
        }
        if let Err(FedError::Config(msg)) = validate_grid(&self.personalize.lambda_grid) {
            return bad("personalize", msg);
        }
        let tf = self.unseen.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return bad("unseen", "train_fraction must lie in (0, 1)".into());
        }
        if self.scenario == Scenario::Unseen {
            if data.num_clients < 2 {
                return bad("unseen", "needs at least two clients".into());
            }
            let folds = self.unseen.num_folds(data.num_clients);
            if self.unseen.fold >= folds {
                return bad("unseen", format!("fold must be below {folds}"));
            }
        }

        match self.scenario {
            Scenario::Compare | Scenario::Unseen => {}
            Scenario::CapacitySweep => {
                let c = require(&self.capacity, "capacity", self.scenario)?;
                if c.capacities.is_empty() || c.capacities.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad("capacity", "capacities must be a non-empty list in [0, 1]".into());
                }
                if c.alphas.iter().any(|a| !(*a > 0.0)) {
                    return bad("capacity", "alphas must be positive".into());
                }
            }
            Scenario::KernelSweep => {
                let k = require(&self.kernel, "kernel", self.scenario)?;
                if k.k_grid.is_empty() || k.k_grid.contains(&0) {
                    return bad("kernel", "k_grid must be a non-empty list of positive integers".into());
                }
                if k.sigma_grid.is_empty() || k.sigma_grid.iter().any(|s| !(*s > 0.0)) {
                    return bad("kernel", "sigma_grid must be a non-empty list of positive values".into());
                }
            }
            Scenario::QualitySweep => {
                let q = require(&self.quality, "quality", self.scenario)?;
                if q.checkpoints.is_empty() || q.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("quality", "checkpoints must be a non-empty increasing list".into());
                }
            }
            Scenario::HwSplit => {
                let h = require(&self.hw_split, "hw_split", self.scenario)?;
                if h.delta_c.is_empty() || h.delta_c.iter().any(|d| !(0.0..=0.5).contains(d)) {
                    return bad("hw_split", "delta_c values must lie in [0, 0.5]".into());
                }
            }
            Scenario::Drift => {
                let d = require(&self.drift, "drift", self.scenario)?;
                if d.t0 == 0 || d.t0 >= d.horizon {
                    return bad("drift", "need 0 < t0 < horizon".into());
                }
                if d.policies.is_empty() {
                    return bad("drift", "policies must not be empty".into());
                }
                if let Err(FedError::Config(msg)) = d.parsed_policies() {
                    return bad("drift", msg);
                }
                if d.lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) {
                    return bad("drift", "lambda must lie in [0, 1]".into());
                }
            }
        }
        Ok(())
    }

    /// `section.key=value` lines of the resolved configuration.
    pub fn flattened(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
scenario = "compare"
seed = 3

[data]
samples_per_class = 40
feature_dim = 4
num_clients = 3
alpha = 0.5

[fed]
rounds = 2
lr = 0.1
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.scenario, Scenario::Compare);
        assert_eq!(cfg.personalize.k, 10);
        assert_eq!(cfg.personalize.lambda_grid, DEFAULT_LAMBDA_GRID.to_vec());
        assert_eq!(cfg.data().unwrap().split, DEFAULT_SPLIT);
        assert!(cfg.flattened().iter().any(|(k, v)| k == "data.alpha" && v == "0.5"));
    }

    #[test]
    fn missing_section_is_named() {
        let text = BASE.replace("scenario = \"compare\"", "scenario = \"capacity_sweep\"");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("[capacity]"), "{err}");

        let no_fed = &BASE[..BASE.find("[fed]").unwrap()];
        let err = ExperimentConfig::parse(no_fed).unwrap_err().to_string();
        assert!(err.contains("[fed]"), "{err}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = BASE.replace("alpha = 0.5", "alpha = \"high\"");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 9"), "{err}");

        let text = BASE.replace("lr = 0.1", "lr = 0.1\nparticipation = 2.0");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 11") && err.contains("[fed]"), "{err}");

        let text = BASE.replace("seed = 3", "seed = 3\nbogus = 1");
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PartitionSpec;
use crate::distiller::DistillConfig;
use crate::ensemble::WeightUpdateConfig;
use crate::error::{Error, Result};
use crate::local_trainer::LocalTrainConfig;
use crate::model_zoo::Arch;
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Fedens,
    PlainDistill,
    CoBoosting,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fedavg, Method::Fedens, Method::PlainDistill, Method::CoBoosting];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Fedens => "fedens",
            Method::PlainDistill => "plain_distill",
            Method::CoBoosting => "co_boosting",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Ablation switches: hard-sample generator loss, diversification, and
/// ensemble weight search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub ghs: bool,
    pub dhs: bool,
    pub ee: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles { ghs: true, dhs: true, ee: true };
    pub const ALL_OFF: Toggles = Toggles { ghs: false, dhs: false, ee: false };

    /// `ghs-dhs-ee` style tag of the enabled switches, `none` if all are off.
    pub fn tag(self) -> String {
        let on: Vec<&str> = [(self.ghs, "ghs"), (self.dhs, "dhs"), (self.ee, "ee")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("-")
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL_ON
    }
}

/// A named set of overrides applied on top of the base config in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Table columns, in order. Empty means the config's `method`.
    pub methods: Vec<Method>,
    /// Table rows. Empty means one row for the base config.
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    #[serde(default = "default_root")]
    pub dataset_root: PathBuf,
    pub partition: PartitionSpec,
    /// Client architectures, assigned to clients cyclically.
    pub client_specs: Vec<Arch>,
    pub server_spec: Arch,
    #[serde(default)]
    pub local: LocalTrainConfig,
    #[serde(default)]
    pub synth: SynthesisConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub weight_update: WeightUpdateConfig,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Server evaluation period in epochs; the last epoch is always evaluated.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Sample grid period in epochs; 0 disables grids.
    #[serde(default)]
    pub grid_every: usize,
    #[serde(default = "default_grid_rows")]
    pub grid_rows: usize,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_root() -> PathBuf {
    PathBuf::from("data")
}
fn default_method() -> Method {
    Method::CoBoosting
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("outputs")
}
fn one() -> usize {
    1
}
fn default_grid_rows() -> usize {
    4
}
fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Small blobs federation that runs in seconds on one core.
    pub fn desk() -> Self {
        Self {
            dataset: "synthetic_blobs".into(),
            dataset_root: default_root(),
            partition: PartitionSpec::dirichlet(0.1, 10, 0),
            client_specs: vec![Arch::MlpTiny],
            server_spec: Arch::MlpTiny,
            local: LocalTrainConfig {
                epochs: 100,
                batch_size: 32,
                ..LocalTrainConfig::default()
            },
            synth: SynthesisConfig {
                generator_iters: 10,
                batch_size: 64,
                noise_dim: 32,
                ..SynthesisConfig::default()
            },
            distill: DistillConfig {
                epochs: 60,
                batch_size: 64,
                ..DistillConfig::default()
            },
            weight_update: WeightUpdateConfig::default(),
            toggles: Toggles::ALL_ON,
            method: Method::CoBoosting,
            seeds: vec![0, 1, 2],
            output_dir: default_output(),
            eval_every: 1,
            grid_every: 0,
            grid_rows: 4,
            save_checkpoints: true,
            sweep: SweepSpec::default(),
        }
    }

    /// MNIST, LeNet-5 clients and server, appendix hyperparameters.
    pub fn paper_mnist() -> Self {
        Self {
            dataset: "MNIST".into(),
            client_specs: vec![Arch::Lenet5],
            server_spec: Arch::Lenet5,
            local: LocalTrainConfig::default(),
            synth: SynthesisConfig::default(),
            distill: DistillConfig {
                epochs: 200,
                ..DistillConfig::default()
            },
            eval_every: 10,
            grid_every: 50,
            ..Self::desk()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_specs.is_empty() {
            return Err(Error::Config("client_specs is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.method == Method::Fedavg && !self.homogeneous() {
            return Err(Error::Config("fedavg requires identical client architectures".into()));
        }
        self.local.validate()?;
        self.synth.validate()?;
        self.distill.validate()?;
        self.weight_update.validate()?;
        Ok(())
    }

    /// Every client (and the server) shares one architecture.
    pub fn homogeneous(&self) -> bool {
        self.client_specs.iter().all(|a| *a == self.server_spec)
    }

    pub fn client_arch(&self, client: usize) -> Arch {
        self.client_specs[client % self.client_specs.len()]
    }

    /// Toggles actually used by `method`.
    pub fn effective_toggles(&self, method: Method) -> Toggles {
        match method {
            Method::PlainDistill => Toggles::ALL_OFF,
            _ => self.toggles,
        }
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper_mnist()] {
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::desk()
            .with_overrides(&[
                "partition.alpha=0.05",
                "synth.generator_iters=3",
                "toggles.ee=false",
                "method=fedens",
                "dataset=synthetic_blobs",
                "weight_update.step_size=0.02",
            ])
            .unwrap();
        assert_eq!(cfg.partition.alpha, Some(0.05));
        assert_eq!(cfg.synth.generator_iters, 3);
        assert!(!cfg.toggles.ee);
        assert_eq!(cfg.method, Method::Fedens);
        assert_eq!(cfg.weight_update.step_size, Some(0.02));
        assert!(ExperimentConfig::desk().with_overrides(&["nonsense"]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["no_such_field=1"]).is_err());
    }

    #[test]
    fn fedavg_needs_homogeneous_clients() {
        let mut cfg = ExperimentConfig::desk();
        cfg.method = Method::Fedavg;
        cfg.validate().unwrap();
        cfg.client_specs = vec![Arch::MlpTiny, Arch::Cnn2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toggle_tags() {
        assert_eq!(Toggles::ALL_ON.tag(), "ghs-dhs-ee");
        assert_eq!(Toggles::ALL_OFF.tag(), "none");
        assert_eq!(Toggles { ghs: false, dhs: true, ee: false }.tag(), "dhs");
    }
}

//! TOML run configuration with dotted `key=value` overrides.
//!
//! A config file must carry `schema_version = 1`; any key it omits takes
//! the value from [`RunConfig::default`]. Unknown keys, type mismatches and
//! failed invariants are all reported together.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::act::ActConfig;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file could not be read or is not TOML.
    #[error("config parse error: {0}")]
    Parse(String),
    /// The document is TOML but does not describe a valid run.
    #[error("config validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset CSV; when absent, puzzles are generated from the fields below.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub side: usize,
    pub count: usize,
    pub blanks: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Fresh random symmetry per training example per batch.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            side: 4,
            count: 64,
            blanks: 6,
            batch_size: 16,
            eval_batch_size: 256,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Checkpoint cadence in optimizer steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Full-train-set evaluation cadence in optimizer steps; 0 disables.
    pub eval_every: usize,
    /// Stop as soon as a periodic evaluation reaches exact accuracy 1.
    pub stop_when_solved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            eval_every: 25,
            stop_when_solved: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub act: ActConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The desk-scale 4×4 setup: 64 puzzles, hidden 64, `m_max` 4, 4+4 HRM.
    fn default() -> Self {
        let model = ModelConfig {
            vocab_size: 5,
            seq_len: 16,
            hidden_dim: 64,
            num_heads: 4,
            m_max: 4,
            ..ModelConfig::default()
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            model,
            act: ActConfig {
                m_max: 4,
                fixed_steps: 4,
                ..ActConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// The 4-layer-L plus 4-layer-H network at the given width.
    pub fn preset_hrm(mut self) -> Self {
        self.model.l_layers = 4;
        self.model.h_layers = 4;
        self.model.t = 2;
        self.model.cycles = 2;
        self
    }

    /// The L-module-only ablation with `layers` L layers.
    pub fn preset_l_only(mut self, layers: usize) -> Self {
        self.model = self.model.l_only(layers);
        self
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version {} is not supported; expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        out.extend(self.model.problems());
        out.extend(self.act.problems());
        out.extend(self.optimizer.problems());
        if self.model.m_max != self.act.m_max {
            out.push(format!(
                "model.m_max {} must equal act.m_max {}",
                self.model.m_max, self.act.m_max
            ));
        }
        let d = &self.data;
        if ![4, 9].contains(&d.side) {
            out.push(format!("data.side must be 4 or 9, got {}", d.side));
        } else {
            let cells = d.side * d.side;
            if self.model.seq_len != cells {
                out.push(format!("model.seq_len {} must equal data.side² = {cells}", self.model.seq_len));
            }
            if self.model.vocab_size != d.side + 1 {
                out.push(format!(
                    "model.vocab_size {} must equal data.side + 1 = {}",
                    self.model.vocab_size,
                    d.side + 1
                ));
            }
            if d.path.is_none() && d.blanks >= cells {
                out.push(format!("data.blanks {} must be below {cells}", d.blanks));
            }
        }
        if d.path.is_none() && d.count == 0 {
            out.push("data.count must be positive".into());
        }
        if d.batch_size == 0 {
            out.push("data.batch_size must be at least 1".into());
        }
        if d.eval_batch_size == 0 {
            out.push("data.eval_batch_size must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(p))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes `effective_config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("effective_config.toml");
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// 64-bit seed for a named subsystem: the leading bytes of
/// `SHA-256(seed as little-endian ‖ name)`.
pub fn derive_seed(seed: u64, subsystem: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(subsystem.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

/// Every settable dotted key.
pub fn known_keys() -> BTreeSet<String> {
    let mut full = RunConfig::default();
    full.output_dir = Some(PathBuf::new());
    full.data.path = Some(PathBuf::new());
    let table = Table::try_from(&full).expect("run config serializes");
    let mut keys = BTreeSet::new();
    flatten("", &table, &mut keys);
    keys
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("known keys only nest through tables");
    }
    cur.insert(last.to_string(), value);
}

/// Builds a config from TOML text plus `key=value` overrides.
pub fn config_from_str(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let known = known_keys();
    let mut problems = Vec::new();
    let mut present = BTreeSet::new();
    flatten("", &file, &mut present);
    for key in present.difference(&known) {
        problems.push(format!("unknown key {key}"));
    }
    match file.get("schema_version") {
        None => problems.push("missing schema_version".into()),
        Some(Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
        Some(v) => problems.push(format!("schema_version {v} is not supported; expected {SCHEMA_VERSION}")),
    }
    let mut table = Table::try_from(RunConfig::default()).expect("run config serializes");
    merge(&mut table, file);
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) if known.contains(k.trim()) => set_path(&mut table, k.trim(), parse_value(v.trim())),
            Some((k, _)) => problems.push(format!("unknown override key {}", k.trim())),
            None => problems.push(format!("override {o:?} is not key=value")),
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError::Validation(problems));
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Validation(vec![e.message().to_string()]))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    config_from_str(&text, overrides)
}

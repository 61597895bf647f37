//! Run configuration as flat `section.key = value` text.
//!
//! Every section is a serde struct; keys are its field names. Values are parsed
//! according to the type of the default value, so strings never need quoting and
//! floats written with `{:?}` read back bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pgsn::PgsnConfig;
use crate::samplers::SamplerConfig;
use crate::sde::VpSdeSchedule;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CommunitySmall,
    Er,
    EdgeList,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CommunitySmall => "community_small",
            Self::Er => "er",
            Self::EdgeList => "edge_list",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub er_nodes: usize,
    pub er_p: f64,
    /// Input file for `edge_list`.
    pub path: Option<PathBuf>,
    /// Reject duplicate edges instead of collapsing them.
    pub strict: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::CommunitySmall,
            count: 100,
            er_nodes: 16,
            er_p: 0.3,
            path: None,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub sde: VpSdeSchedule,
    pub pgsn: PgsnConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub run: RunSection,
}

/// Phase ids for [`RunConfig::phase_seed`].
#[derive(Debug, Clone, Copy)]
pub enum Phase {
    Data = 1,
    Train = 2,
    Sample = 3,
    Eval = 4,
}

const SECTIONS: [&str; 6] = ["data", "sde", "pgsn", "train", "sampler", "run"];

fn section_value(cfg: &RunConfig, name: &str) -> Result<Value> {
    Ok(match name {
        "data" => serde_json::to_value(&cfg.data)?,
        "sde" => serde_json::to_value(cfg.sde)?,
        "pgsn" => serde_json::to_value(&cfg.pgsn)?,
        "train" => serde_json::to_value(&cfg.train)?,
        "sampler" => serde_json::to_value(&cfg.sampler)?,
        "run" => serde_json::to_value(&cfg.run)?,
        _ => unreachable!("known section"),
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "none".into(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, raw: &str, key: &str) -> Result<Value> {
    let raw = raw.trim();
    match template {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null => {
            if raw.is_empty() || raw == "none" {
                Ok(Value::Null)
            } else {
                Ok(Value::String(raw.to_string()))
            }
        }
        _ => serde_json::from_str(raw).map_err(|_| Error::Config(format!("cannot parse `{raw}` for {key}"))),
    }
}

impl RunConfig {
    /// Serializes every field as `section.key = value` lines.
    pub fn to_kv(&self) -> Result<String> {
        let mut out = String::new();
        for name in SECTIONS {
            if let Value::Object(map) = section_value(self, name)? {
                for (k, v) in map {
                    out.push_str(&format!("{name}.{k} = {}\n", render(&v)));
                }
            }
        }
        Ok(out)
    }

    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` lacks a section prefix")))?;
        if !SECTIONS.contains(&section) {
            return Err(Error::Config(format!("unknown section `{section}` in `{key}`")));
        }
        let mut map: Map<String, Value> = match section_value(self, section)? {
            Value::Object(m) => m,
            _ => unreachable!("sections are structs"),
        };
        let template = map
            .get(field)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let parsed = parse_like(template, value, key)?;
        map.insert(field.to_string(), parsed);
        let v = Value::Object(map);
        let bad = |e: serde_json::Error| Error::Config(format!("invalid value `{value}` for {key}: {e}"));
        match section {
            "data" => self.data = serde_json::from_value(v).map_err(bad)?,
            "sde" => self.sde = serde_json::from_value(v).map_err(bad)?,
            "pgsn" => self.pgsn = serde_json::from_value(v).map_err(bad)?,
            "train" => self.train = serde_json::from_value(v).map_err(bad)?,
            "sampler" => self.sampler = serde_json::from_value(v).map_err(bad)?,
            "run" => self.run = serde_json::from_value(v).map_err(bad)?,
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Parses `key=value` (or `key = value`).
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config text on top of `self`; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str, path: &Path) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_assignment(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text, Path::new("<config>"))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::default();
        cfg.apply_kv(&std::fs::read_to_string(path).map_err(crate::error::file_err(path))?, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        self.pgsn.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.data.kind == DatasetKind::EdgeList && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for edge_list datasets".into()));
        }
        if !(0.0..=1.0).contains(&self.data.er_p) {
            return Err(Error::Config(format!("data.er_p {} outside [0, 1]", self.data.er_p)));
        }
        Ok(())
    }

    /// Seed of one phase, derived from the global seed.
    pub fn phase_seed(&self, phase: Phase) -> u64 {
        crate::derive_seed(self.run.seed, phase as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::SamplerMethod;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_kv().unwrap();
        assert_eq!(RunConfig::from_kv(&text).unwrap(), cfg);
        assert!(text.contains("train.learning_rate = 2e-5"));
        assert!(text.contains("sampler.method = pc"));
    }

    #[test]
    fn awkward_values_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 0.1 + 0.2;
        cfg.sde.beta_max = 1.0 / 3.0 * 60.0;
        cfg.sampler.method = SamplerMethod::OdeAdaptive;
        cfg.data.path = Some(PathBuf::from("12345"));
        cfg.run.out_dir = PathBuf::from("/tmp/with space");
        let back = RunConfig::from_kv(&cfg.to_kv().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.learning_rate.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn last_assignment_wins() {
        let cfg = RunConfig::from_kv("train.batch_size = 4\n# note\ntrain.batch_size = 8 # trailing\n").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn bad_keys_and_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("nope.x", "1").is_err());
        assert!(cfg.set("noprefix", "1").is_err());
        assert!(cfg.set("train.batch_size", "many").is_err());
        assert!(cfg.set("sampler.method", "rk45").is_err());
        let err = RunConfig::from_kv("train.batch_size = 1\nbogus\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn phase_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.phase_seed(Phase::Data), cfg.phase_seed(Phase::Train));
        assert_eq!(cfg.phase_seed(Phase::Sample), cfg.clone().phase_seed(Phase::Sample));
    }
}

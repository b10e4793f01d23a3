//! Run configuration: a JSON document with defaults for every key,
//! exhaustive unknown-key rejection and `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::data::SynthConfig;
use crate::error::{invalid, io_err, Result};
use crate::gating::GateConfig;
use crate::model::Architecture;
use crate::monitor::MonitorConfig;
use crate::regulate::{OptimizerConfig, RegulationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Joint,
    Redreg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Joint => "joint",
            Method::Redreg => "redreg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Method::Joint),
            "redreg" => Ok(Method::Redreg),
            other => Err(invalid(format!("unknown method {other:?} (expected joint or redreg)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic data parameters; `seed` defaults to the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub n: usize,
    pub k: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub snr_a: f64,
    pub snr_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let s = SynthConfig::default();
        SyntheticSource {
            n: s.n,
            k: s.k,
            d_a: s.d_a,
            d_v: s.d_v,
            snr_a: s.snr_a,
            snr_v: s.snr_v,
            seed: None,
        }
    }
}

impl SyntheticSource {
    pub fn synth_config(&self, run_seed: u64) -> SynthConfig {
        SynthConfig {
            n: self.n,
            k: self.k,
            d_a: self.d_a,
            d_v: self.d_v,
            snr_a: self.snr_a,
            snr_v: self.snr_v,
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub features_a: PathBuf,
    pub features_v: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// Weight of the summed branch cross-entropies added to the joint loss.
    pub unimodal_weight: f64,
    pub data: DataSource,
    pub model: Architecture,
    pub monitor: MonitorConfig,
    pub gate: GateConfig,
    pub regulation: RegulationConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Redreg,
            seed: 0,
            epochs: 30,
            batch_size: 64,
            train_fraction: 0.9,
            unimodal_weight: 0.0,
            data: DataSource::default(),
            model: Architecture::default(),
            monitor: MonitorConfig::default(),
            gate: GateConfig::default(),
            regulation: RegulationConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 3 {
            return Err(invalid(format!("epochs must be >= 3 (two warmup epochs), got {}", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if !(0.0..=1.0).contains(&self.unimodal_weight) {
            return Err(invalid(format!("unimodal_weight must lie in [0, 1], got {}", self.unimodal_weight)));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.synth_config(self.seed).validate()?;
        }
        self.model.validate()?;
        self.monitor.validate()?;
        self.gate.validate()?;
        self.regulation.validate()?;
        self.optimizer.validate()
    }

    /// Parses a JSON document layered over the defaults, then applies
    /// `key.path=value` overrides in order.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let file: Value = serde_json::from_str(text).map_err(|e| invalid(format!("config is not valid JSON: {e}")))?;
        if !file.is_object() {
            return Err(invalid("config must be a JSON object"));
        }
        let mut merged = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        merge(&mut merged, file);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RunConfig::from_json(&text, overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let text = serde_json::to_string(self).expect("config serializes");
        RunConfig::from_json(&text, overrides)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Deep merge; an object whose `kind` differs from the base replaces it.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && slot.get("kind") == v.get("kind").or(slot.get("kind")) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and used as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(invalid(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override key {key:?}: {:?} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override key has at least one part")
}

/// Accepts a JSON number or one of `"inf"`, `"+inf"`, `"infinity"`, `"-inf"`.
pub fn deserialize_extended_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            other => other
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        },
    }
}

pub fn serialize_extended_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

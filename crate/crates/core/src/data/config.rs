use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_timestamp, Instant};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: i64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyType {
    Wind,
    Solar,
}

/// Forecast-window boundaries: a sample belongs to the split whose period
/// fully contains `[t, t+T_f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_end: Instant,
    pub validation_end: Instant,
    pub test_end: Option<Instant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub energy_type: EnergyType,
    pub energy_files: Vec<PathBuf>,
    pub weather_files: Vec<PathBuf>,
    /// Declared weather variable names; the CSV header must match when given.
    pub variables: Option<Vec<String>>,
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub splits: SplitBoundaries,
    /// Installed capacity per site; sites listed here are divided by it.
    pub capacity: BTreeMap<String, f64>,
    pub max_interpolated_gap: usize,
}

/// Accumulates every problem found in a config table.
struct Checker<'a> {
    table: &'a toml::Table,
    errors: Vec<String>,
}

impl<'a> Checker<'a> {
    fn required(&mut self, key: &str) -> Option<&'a toml::Value> {
        let v = self.table.get(key);
        if v.is_none() {
            self.errors.push(format!("missing required key `{key}`"));
        }
        v
    }

    fn int(&mut self, key: &str, v: Option<&toml::Value>, min: i64) -> Option<usize> {
        match v? {
            toml::Value::Integer(i) if *i >= min => Some(*i as usize),
            toml::Value::Integer(i) => {
                self.errors.push(format!("`{key}` must be at least {min}, got {i}"));
                None
            }
            other => {
                self.errors.push(format!("`{key}` must be an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn instant(&mut self, key: &str, v: Option<&toml::Value>) -> Option<Instant> {
        let text = match v? {
            toml::Value::String(s) => s.clone(),
            toml::Value::Datetime(d) => d.to_string(),
            other => {
                self.errors.push(format!("`{key}` must be a timestamp, got {}", other.type_str()));
                return None;
            }
        };
        match parse_timestamp(&text) {
            Ok(t) => Some(t),
            Err(e) => {
                self.errors.push(format!("`{key}`: {e}"));
                None
            }
        }
    }

    fn paths(&mut self, key: &str, v: Option<&toml::Value>, base: &Path) -> Option<Vec<PathBuf>> {
        let strings = self.strings(key, v?)?;
        if strings.is_empty() {
            self.errors.push(format!("`{key}` must list at least one file"));
            return None;
        }
        Some(strings.into_iter().map(|s| base.join(s)).collect())
    }

    fn strings(&mut self, key: &str, v: &toml::Value) -> Option<Vec<String>> {
        let Some(arr) = v.as_array() else {
            self.errors.push(format!("`{key}` must be an array of strings"));
            return None;
        };
        let out: Option<Vec<String>> = arr.iter().map(|x| x.as_str().map(str::to_owned)).collect();
        if out.is_none() {
            self.errors.push(format!("`{key}` must be an array of strings"));
        }
        out
    }
}

const KNOWN_KEYS: &[&str] = &[
    "format",
    "energy_type",
    "energy_files",
    "weather_files",
    "variables",
    "T_h",
    "T_f",
    "stride",
    "train_end",
    "validation_end",
    "test_end",
    "capacity",
    "max_interpolated_gap",
];

impl DatasetConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parse and validate, reporting every problem at once. Relative file
    /// paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::ConfigList { count: 1, errors: vec![format!("dataset config: {e}")] })?;
        let mut c = Checker { table: &table, errors: Vec::new() };

        for key in table.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                c.errors.push(format!("unknown key `{key}`"));
            }
        }
        match c.required("format") {
            Some(toml::Value::Integer(DATASET_FORMAT)) => {}
            Some(v) => c.errors.push(format!("unsupported `format` {v}, expected {DATASET_FORMAT}")),
            None => {}
        }
        let energy_type = match c.required("energy_type").map(|v| v.as_str()) {
            Some(Some("wind")) => Some(EnergyType::Wind),
            Some(Some("solar")) => Some(EnergyType::Solar),
            Some(other) => {
                c.errors.push(format!("`energy_type` must be \"wind\" or \"solar\", got {other:?}"));
                None
            }
            None => None,
        };
        let v = c.required("energy_files");
        let energy_files = c.paths("energy_files", v, base);
        let v = c.required("weather_files");
        let weather_files = c.paths("weather_files", v, base);
        let variables = match table.get("variables") {
            Some(v) => c.strings("variables", v).map(Some),
            None => Some(None),
        };
        let v = c.required("T_h");
        let history = c.int("T_h", v, 1);
        let v = c.required("T_f");
        let horizon = c.int("T_f", v, 1);
        let stride = match table.get("stride") {
            Some(v) => c.int("stride", Some(v), 1),
            None => Some(24),
        };
        let v = c.required("train_end");
        let train_end = c.instant("train_end", v);
        let v = c.required("validation_end");
        let validation_end = c.instant("validation_end", v);
        let test_end = match table.get("test_end") {
            Some(v) => c.instant("test_end", Some(v)).map(Some),
            None => Some(None),
        };
        let max_interpolated_gap = match table.get("max_interpolated_gap") {
            Some(v) => c.int("max_interpolated_gap", Some(v), 0),
            None => Some(0),
        };
        let mut capacity = BTreeMap::new();
        if let Some(v) = table.get("capacity") {
            match v.as_table() {
                Some(t) => {
                    for (site, cap) in t {
                        match cap.as_float().or_else(|| cap.as_integer().map(|i| i as f64)) {
                            Some(x) if x > 0.0 && x.is_finite() => {
                                capacity.insert(site.clone(), x);
                            }
                            _ => c.errors.push(format!("capacity for `{site}` must be a positive number")),
                        }
                    }
                }
                None => c.errors.push("`capacity` must be a table of site = number".into()),
            }
        }
        if let (Some(a), Some(b)) = (train_end, validation_end) {
            if a >= b {
                c.errors.push("`train_end` must precede `validation_end`".into());
            }
        }
        if let (Some(b), Some(Some(t))) = (validation_end, test_end) {
            if b >= t {
                c.errors.push("`validation_end` must precede `test_end`".into());
            }
        }

        if !c.errors.is_empty() {
            return Err(Error::ConfigList { count: c.errors.len(), errors: c.errors });
        }
        Ok(Self {
            energy_type: energy_type.unwrap(),
            energy_files: energy_files.unwrap(),
            weather_files: weather_files.unwrap(),
            variables: variables.unwrap(),
            history: history.unwrap(),
            horizon: horizon.unwrap(),
            stride: stride.unwrap(),
            splits: SplitBoundaries {
                train_end: train_end.unwrap(),
                validation_end: validation_end.unwrap(),
                test_end: test_end.unwrap(),
            },
            capacity,
            max_interpolated_gap: max_interpolated_gap.unwrap(),
        })
    }
}

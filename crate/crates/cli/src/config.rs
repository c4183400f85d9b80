use std::path::Path;

use anyhow::{bail, Context, Result};
use pixeldyn_core::baseline_edlstm::EdLstmConfig;
use pixeldyn_core::dataset::DatasetConfig;
use pixeldyn_core::trainer::TrainConfig;
use serde::{de::DeserializeOwned, Serialize};
use toml::{Table, Value};

/// Merged configuration of one run: preset, then file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub baseline: EdLstmConfig,
}

const SECTIONS: [&str; 3] = ["dataset", "train", "baseline"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            preset: name.to_string(),
            dataset: DatasetConfig::preset(name)?,
            train: TrainConfig::preset(name)?,
            baseline: EdLstmConfig::preset(name)?,
        })
    }

    /// Resolve the preset (flag, else the file's `preset` key, else
    /// `desk32`) and overlay the file's `section.key = value` entries.
    pub fn load(preset: Option<&str>, file: Option<&Path>) -> Result<Self> {
        let table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Table::new(),
        };
        let from_file = match table.get("preset") {
            Some(Value::String(s)) => Some(s.as_str()),
            Some(_) => bail!("config key 'preset' must be a string"),
            None => None,
        };
        let mut config = Self::preset(preset.or(from_file).unwrap_or("desk32"))?;
        for (key, value) in &table {
            match (key.as_str(), value) {
                ("preset", _) => {}
                ("dataset", Value::Table(t)) => config.dataset = overlay("dataset", &config.dataset, t)?,
                ("train", Value::Table(t)) => config.train = overlay("train", &config.train, t)?,
                ("baseline", Value::Table(t)) => config.baseline = overlay("baseline", &config.baseline, t)?,
                (other, _) => bail!("invalid config key '{other}' (expected preset or one of {SECTIONS:?})"),
            }
        }
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.baseline.seed = seed;
    }
}

fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: &T, changes: &Table) -> Result<T> {
    let mut table = Table::try_from(base)?;
    for (key, value) in changes {
        let slot = table.get_mut(key).with_context(|| format!("invalid config key '{section}.{key}'"))?;
        *slot = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
            _ => value.clone(),
        };
    }
    Value::Table(table).try_into().with_context(|| format!("invalid value in section '{section}'"))
}

//! TOML run configuration with dotted-path overrides.
//!
//! ```toml
//! seed = 3
//!
//! [stream]              # synthetic embedding stream
//! tasks_per_cluster = [1, 5, 1, 7, 2]
//!
//! [world]               # toy segmentation data
//! tau_scale = 0.1
//!
//! [train]               # continual trainer
//! lambda = 5000.0
//!
//! [experiments]
//! seeds = 20
//! ```
//!
//! Every section is optional. The top-level `seed` is copied into the
//! stream, world and train sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::SyntheticStreamSpec;
use crate::error::{Error, Result};
use crate::eval::{default_prop1_grid, GridPoint, DEFAULT_READAPT_EPOCHS};
use crate::toy::ToyWorldConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of seeds (0, 1, ...) for multi-seed experiments.
    pub seeds: u64,
    pub trials: usize,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub readapt_epochs: usize,
    pub grid: Vec<GridPoint>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: 20,
            trials: 200,
            alphas: vec![2.0, 5.0, 7.0, 10.0],
            lambdas: vec![0.0, 50.0, 5000.0],
            readapt_epochs: DEFAULT_READAPT_EPOCHS,
            grid: default_prop1_grid(),
        }
    }
}

impl ExperimentConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: SyntheticStreamSpec,
    pub world: ToyWorldConfig,
    pub train: TrainConfig,
    pub experiments: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            stream: SyntheticStreamSpec::standard(0),
            world: ToyWorldConfig::default(),
            train: TrainConfig::desk(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Layers `path` and then the `key.path=value` overrides over the
    /// defaults, propagates the top-level seed and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    /// Same as [`RunConfig::load`] with the file contents given directly.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        let file = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn propagate_seed(&mut self) {
        self.stream.seed = self.seed;
        self.world.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.world.validate()?;
        self.train.validate()?;
        if self.experiments.seeds == 0 {
            return Err(Error::Config("experiments.seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }
}

/// Recursively overlays `top` on `base`; non-table values replace.
fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value
/// is parsed as a TOML value and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::load(
            None,
            &[
                "train.lambda=50".into(),
                "seed=9".into(),
                "stream.tasks_per_cluster=[2, 2, 2, 2, 2]".into(),
                "train.routing=single".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.lambda, 50.0);
        assert_eq!((c.stream.seed, c.world.seed, c.train.seed), (9, 9, 9));
        assert_eq!(c.stream.tasks_per_cluster, vec![2; 5]);
        assert_eq!(c.train.routing, crate::trainer::Routing::Single);
        assert_eq!(c.train.learning_rate, TrainConfig::desk().learning_rate);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            RunConfig::load(None, &["train.lambda=-1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["train.lamda=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["novalue".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["seed.x=1".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn string_and_file_sources_agree() {
        let text = "seed = 4\n[train]\nlambda = 50.0\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let a = RunConfig::from_toml_str(text, &[]).unwrap();
        assert_eq!(a, RunConfig::load(Some(&path), &[]).unwrap());
        assert_eq!((a.seed, a.train.lambda, a.train.seed), (4, 50.0, 4));
        assert!(matches!(
            RunConfig::from_toml_str("seed = ", &[]),
            Err(Error::Config(_))
        ));
        let missing = RunConfig::load(Some(&dir.path().join("absent.toml")), &[]);
        assert!(matches!(missing, Err(Error::Config(m)) if m.contains("absent.toml")));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), c);
    }
}

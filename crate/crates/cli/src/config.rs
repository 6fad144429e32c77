//! Experiment configuration: a JSON document deep-merged over protocol
//! defaults, then patched by `--set` overrides. Flags win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use softnce::distributions::GmmSpec;
use softnce::models::TrainConfig;

use crate::CliError;

/// Dataset sizes for the benchmark protocol: `n_unique` distinct mixture
/// draws resampled with replacement to `n_total` labeled rows, plus a fresh
/// `n_test` held-out set for accuracy and calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_unique: usize,
    pub n_total: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            n_unique: 1600,
            n_total: 32000,
            n_test: 4000,
        }
    }
}

/// Axes for `sweep`: empty lists fall back to the corresponding scalar in
/// the base config, so a sweep varies only the axes it names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alignment_percents: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub losses: Vec<softnce::losses::LossId>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.alignment_percents.is_empty()
            && self.epsilons.is_empty()
            && self.batch_sizes.is_empty()
            && self.losses.is_empty()
    }
}

/// Which probe set the estimation-error KL averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KlOver {
    /// The unique mixture draws (duplicates would only reweight by
    /// resampling noise).
    Unique,
    /// The full resampled training inputs.
    Full,
}

/// Logit scale of the conditional labeling model softmax(x . scale * theta).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LabelTheta {
    /// Unit mode directions; the logit scale is set by |x|.
    Unit,
    /// Modes scaled by `mean_scale`, matching the component means.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form id stamped on every result row; empty means the command
    /// name.
    pub experiment: String,
    pub gmm: GmmSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub kl_over: KlOver,
    pub label_theta: LabelTheta,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            experiment: String::new(),
            gmm: GmmSpec {
                n_modes: 20,
                dim: 20,
                alignment_percent: 0.0,
                mean_scale: 10.0,
                mixture_weights: None,
            },
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig {
                alignment_percents: (0..=8).map(|i| 10.0 * i as f64).collect(),
                ..SweepConfig::default()
            },
            seeds: (1..=10).collect(),
            output_dir: PathBuf::from("out"),
            kl_over: KlOver::Unique,
            label_theta: LabelTheta::Unit,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.gmm.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        if self.data.n_unique == 0 || self.data.n_test == 0 {
            return Err(CliError::Config(
                "n_unique and n_test must be positive".into(),
            ));
        }
        if self.data.n_total < self.data.n_unique {
            return Err(CliError::Config(format!(
                "n_total ({}) must be at least n_unique ({})",
                self.data.n_total, self.data.n_unique
            )));
        }
        Ok(())
    }

    /// Experiment id for rows, defaulting to the command name.
    pub fn experiment_id(&self, command: &str) -> String {
        if self.experiment.is_empty() {
            command.to_string()
        } else {
            self.experiment.clone()
        }
    }
}

/// Recursively merges `patch` over `base`: objects merge key by key,
/// anything else replaces.
fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base_map), Value::Object(patch_map)) => {
            for (key, value) in patch_map {
                deep_merge(base_map.entry(key).or_insert(Value::Null), value);
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Writes `value` at a dotted path like `train.batch_size`, creating
/// intermediate objects as needed.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cursor = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty segment in path {path:?}")));
        }
        let map = cursor.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("path {path:?} descends through a non-object"))
        })?;
        let slot = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        cursor = slot;
    }
    unreachable!("split yields at least one part");
}

/// Parses one `--set key=value` override. The value is JSON when it parses
/// as JSON, a bare string otherwise, so `--set train.loss_id=nll` and
/// `--set seeds=[1,2]` both work.
fn parse_set(spec: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value (got {spec:?})")))?;
    if key.is_empty() {
        return Err(CliError::Config(format!("--set has empty key in {spec:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Loads the resolved configuration: defaults, then the optional config
/// file, then `--set` overrides in order.
pub fn resolve(config_path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut merged = serde_json::to_value(ExperimentConfig::default())
        .expect("default config serializes");
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(CliError::Config(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        deep_merge(&mut merged, file);
    }
    for spec in sets {
        let (key, value) = parse_set(spec)?;
        set_path(&mut merged, &key, value)?;
    }
    let config: ExperimentConfig = serde_json::from_value(merged)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use softnce::losses::LossId;

    #[test]
    fn defaults_follow_the_benchmark_protocol() {
        let config = ExperimentConfig::default();
        assert_eq!(config.gmm.n_modes, 20);
        assert_eq!(config.gmm.dim, 20);
        assert_eq!(config.gmm.mean_scale, 10.0);
        assert_eq!(config.data.n_unique, 1600);
        assert_eq!(config.data.n_total, 32000);
        assert_eq!(config.train.batch_size, 1024);
        assert_eq!(config.train.learning_rate, 1e-3);
        assert_eq!(config.train.max_epochs, 500);
        assert_eq!(config.seeds.len(), 10);
        assert_eq!(
            config.sweep.alignment_percents,
            vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]
        );
        config.validate().unwrap();
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"experiment": "toy", "train": {"batch_size": 64}, "gmm": {"n_modes": 4, "dim": 6}}"#,
        )
        .unwrap();
        let config = resolve(Some(&path), &[]).unwrap();
        assert_eq!(config.experiment, "toy");
        assert_eq!(config.train.batch_size, 64);
        assert_eq!(config.train.max_epochs, 500);
        assert_eq!(config.gmm.n_modes, 4);
        assert_eq!(config.gmm.mean_scale, 10.0);
    }

    #[test]
    fn set_overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"train": {"batch_size": 64}}"#).unwrap();
        let config = resolve(
            Some(&path),
            &[
                "train.batch_size=128".to_string(),
                "train.loss_id=st_infonce".to_string(),
                "seeds=[3,4]".to_string(),
                "experiment=sweep-a".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.train.batch_size, 128);
        assert_eq!(config.train.loss_id, LossId::StInfoNce);
        assert_eq!(config.seeds, vec![3, 4]);
        assert_eq!(config.experiment, "sweep-a");
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(resolve(None, &["no-equals".to_string()]).is_err());
        assert!(resolve(None, &["seeds=[]".to_string()]).is_err());
        assert!(resolve(None, &["train.learning_rate=-1".to_string()]).is_err());
        assert!(resolve(None, &["data.n_total=10".to_string()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"bacth": 1}"#).unwrap();
        assert!(resolve(Some(&path), &[]).is_err());
    }

    #[test]
    fn experiment_id_falls_back_to_the_command() {
        let config = ExperimentConfig::default();
        assert_eq!(config.experiment_id("estimate"), "estimate");
        let named = ExperimentConfig {
            experiment: "fig1".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(named.experiment_id("estimate"), "fig1");
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let config = ExperimentConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}

//! Run configuration: one TOML file with a section per stage, plus `--set`
//! overrides. Every command writes the resolved file next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icm3d::infer::InferConfig;
use icm3d::train::TrainConfig;
use icm3d::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::exit::UsageError;

pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Csv,
    Ply,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Ply => "ply",
        }
    }

    pub fn cloud_format(self) -> icm3d::scene::CloudFormat {
        match self {
            DataFormat::Csv => icm3d::scene::CloudFormat::CsvPoints,
            DataFormat::Ply => icm3d::scene::CloudFormat::PlyAscii,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scenes written by `generate`.
    pub scenes: usize,
    pub format: DataFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 16, format: DataFormat::Csv }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bins of the distance histograms.
    pub bins: usize,
    /// Points sampled per scene for the distance analysis.
    pub sample_points: usize,
    pub sample_seed: u64,
    /// Grid sizes of the overlap sweep.
    pub sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bins: 100, sample_points: 1024, sample_seed: 0, sweep: (8..=28).step_by(2).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub points: usize,
    pub repeats: usize,
    /// Grid size of untrained benchmark models.
    pub n_s: usize,
    pub seed: u64,
    /// Cubes decoded before NMS when `infer.pre_nms_top_k` is unset. Untrained
    /// score heads pass almost every cube otherwise.
    pub pre_nms_top_k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { points: 4096, repeats: 21, n_s: 20, seed: 0, pre_nms_top_k: 64 }
    }
}

/// Input and output locations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub flatten_checkpoint: Option<PathBuf>,
    pub project_checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

/// Scalar type used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub paths: Paths,
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Reads `path` (or the defaults), then applies `key=value` overrides whose
    /// values are TOML literals; bare words are taken as strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: icm3d::Error| UsageError(e.to_string());
        self.scene.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.infer.validate().map_err(usage)?;
        if self.eval.bins == 0 || self.eval.sample_points < 2 {
            bail!(UsageError("eval.bins must be positive and eval.sample_points at least 2".into()));
        }
        if self.bench.repeats == 0 || self.bench.points == 0 || self.bench.pre_nms_top_k == 0 {
            bail!(UsageError("bench.repeats, bench.points and bench.pre_nms_top_k must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        icm3d::checkpoint::write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| UsageError(format!("missing {what}")).into())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| UsageError(format!("override `{item}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| UsageError(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
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
    fn overrides_and_round_trip() {
        let cfg = RunConfig::load(
            None,
            &["train.lr0=0.002".into(), "train.paradigm=project".into(), "eval.sweep=[8, 12]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.lr0, 0.002);
        assert_eq!(cfg.train.paradigm, icm3d::HeadKind::Project);
        assert_eq!(cfg.eval.sweep, vec![8, 12]);
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.learning_rate=0.1".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
        assert!(RunConfig::load(None, &["train.lr0=-1".into()]).is_err());
    }
}

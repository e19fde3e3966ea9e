//! JSON checkpoints: named tensors, the model configuration, and optionally the
//! optimizer state and training configuration needed to resume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Real;

pub const FORMAT: &str = "icm3d-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub first_moment: Vec<TensorRecord>,
    pub second_moment: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `f32` or `f64`.
    pub scalar: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
    /// Training configuration of the run that wrote the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

pub fn records<T: Real>(params: &ModelParams<T>) -> Vec<TensorRecord> {
    params
        .tensors()
        .into_iter()
        .map(|t| TensorRecord { name: t.name, shape: t.shape, data: t.data.iter().map(|v| v.to_f64_lossy()).collect() })
        .collect()
}

/// Copies records into a parameter set of the same layout, checking names and shapes.
pub fn fill_from_records<T: Real>(params: &mut ModelParams<T>, records: &[TensorRecord]) -> Result<()> {
    let layout: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if layout.len() != records.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model expects {}",
            records.len(),
            layout.len()
        )));
    }
    for ((name, shape), rec) in layout.iter().zip(records) {
        if *name != rec.name || *shape != rec.shape || rec.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                rec.name, rec.shape
            )));
        }
    }
    for (dst, rec) in params.tensors_mut().into_iter().zip(records) {
        for (d, &v) in dst.iter_mut().zip(&rec.data) {
            *d = T::of(v);
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ModelParams<T>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            scalar: T::NAME.into(),
            model: params.config.clone(),
            tensors: records(params),
            optimizer: None,
            training: None,
        }
    }

    /// Rebuilds the parameters. Fails when the scalar type differs or, if
    /// `expected` is given, when the model configuration differs.
    pub fn params<T: Real>(&self, expected: Option<&ModelConfig>) -> Result<ModelParams<T>> {
        self.check_header()?;
        if self.scalar != T::NAME {
            return Err(Error::Config(format!("checkpoint scalar is {}, requested {}", self.scalar, T::NAME)));
        }
        if let Some(cfg) = expected {
            if *cfg != self.model {
                return Err(Error::Config(format!(
                    "checkpoint model configuration {:?} does not match requested {:?}",
                    self.model, cfg
                )));
            }
        }
        let mut params = ModelParams::init(&self.model)?;
        fill_from_records(&mut params, &self.tensors)?;
        Ok(params)
    }

    fn check_header(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} version {}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        c.check_header()?;
        Ok(c)
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    fn config() -> ModelConfig {
        ModelConfig { head: HeadKind::Project, n_s: 4, point_widths: vec![3, 6], latent_width: 5, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = ModelParams::<f32>::init(&config()).unwrap();
        Checkpoint::from_params(&p).save(&path).unwrap();
        let back: ModelParams<f32> = Checkpoint::load(&path).unwrap().params(Some(&config())).unwrap();
        assert_eq!(back, p);
        assert!(!dir.path().join("m.json.tmp").exists());
    }

    #[test]
    fn mismatches_are_rejected() {
        let p = ModelParams::<f64>::init(&config()).unwrap();
        let c = Checkpoint::from_params(&p);
        assert!(c.params::<f32>(None).is_err());
        let other = ModelConfig { n_s: 5, ..config() };
        assert!(matches!(c.params::<f64>(Some(&other)), Err(Error::Config(_))));
        let mut bad = c.clone();
        bad.tensors[0].shape = vec![1, 1];
        assert!(bad.params::<f64>(None).is_err());
    }
}

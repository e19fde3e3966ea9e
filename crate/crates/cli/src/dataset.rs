//! Dataset directories: numbered scene files plus a checksummed manifest.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use icm3d::scene::{read_cloud, write_cloud};
use icm3d::{PointCloud, SceneSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataFormat;
use crate::exit::{UsageError, Violation};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub sha256: String,
    pub points: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: DataFormat,
    pub spec: SceneSpec,
    pub scenes: Vec<SceneEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scene_name(index: usize, format: DataFormat) -> String {
    format!("scene_{index:04}.{}", format.extension())
}

/// Writes `clouds` and the manifest into `dir`. A non-empty `dir` is only
/// reused with `force`.
pub fn write_dataset(
    dir: &Path,
    clouds: &[PointCloud<f64>],
    spec: &SceneSpec,
    format: DataFormat,
    force: bool,
) -> Result<Manifest> {
    if dir.exists() {
        let busy = fs::read_dir(dir)?.next().is_some();
        if busy && !force {
            bail!(UsageError(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut scenes = Vec::with_capacity(clouds.len());
    for (k, cloud) in clouds.iter().enumerate() {
        let file = scene_name(k, format);
        let text = write_cloud(cloud, format.cloud_format());
        icm3d::checkpoint::write_atomic(&dir.join(&file), text.as_bytes())?;
        scenes.push(SceneEntry {
            file,
            sha256: sha256_hex(text.as_bytes()),
            points: cloud.len(),
            instances: cloud.instances().len(),
        });
    }
    let manifest = Manifest { format, spec: spec.clone(), scenes };
    icm3d::checkpoint::write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loads every scene listed in the manifest, verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<PointCloud<f64>>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("bad manifest {}", path.display()))?;
    let mut clouds = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).with_context(|| format!("cannot read {}", file.display()))?;
        if sha256_hex(&bytes) != entry.sha256 {
            bail!(Violation(format!("checksum mismatch for {}", file.display())));
        }
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", file.display()))?;
        let (cloud, _) =
            read_cloud::<f64>(&text, manifest.format.cloud_format()).with_context(|| format!("in {}", file.display()))?;
        clouds.push(cloud);
    }
    if clouds.is_empty() {
        bail!(Violation(format!("dataset {} has no scenes", dir.display())));
    }
    Ok((manifest, clouds))
}

pub fn scene_stem(entry: &SceneEntry) -> &str {
    entry.file.rsplit_once('.').map_or(entry.file.as_str(), |(s, _)| s)
}

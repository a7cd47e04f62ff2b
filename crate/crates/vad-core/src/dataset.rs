//! Dataset directory layout and regeneration.
//!
//! Layout: `<root>/<split>/<scenario_id>/frames.vadt` (tensor stack
//! [T,3,H,W]), `gt.json` (boxes and flags), `masks.vadt` ([T,H,W] as 0/1
//! f32), with `manifest.json` at the root recording every scenario config so
//! the whole tree can be rebuilt byte-for-byte.

use crate::checkpoint;
use crate::error::{Result, VadError};
use crate::scenegen::{self, GroundTruth, Scenario, ScenarioConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub kind: SplitKind,
    pub configs: Vec<ScenarioConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub splits: Vec<SplitSpec>,
}

pub fn scenario_id(split: &str, index: usize) -> String {
    format!("{split}_{index:03}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| VadError::Other(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| VadError::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| VadError::Other(format!("parse {}: {e}", path.display())))
}

fn masks_to_tensor(masks: &[Vec<bool>], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for mask in masks {
        data.extend(mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    }
    Tensor::from_vec(vec![masks.len(), h, w], data).expect("mask dims")
}

fn tensor_to_masks(t: &Tensor<f32>) -> Vec<Vec<bool>> {
    let (frames, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..frames)
        .map(|i| {
            t.data()[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&v| v > 0.5)
                .collect()
        })
        .collect()
}

pub fn save_scenario(dir: &Path, scenario: &Scenario) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    checkpoint::save_single(&dir.join("frames.vadt"), "frames", &scenario.frames)?;
    let h = scenario.frames.shape()[2];
    let w = scenario.frames.shape()[3];
    checkpoint::save_single(
        &dir.join("masks.vadt"),
        "masks",
        &masks_to_tensor(&scenario.masks, h, w),
    )?;
    write_json(&dir.join("gt.json"), &scenario.truth)
}

pub struct LoadedScenario {
    pub frames: Tensor<f32>,
    pub truth: GroundTruth,
    pub masks: Vec<Vec<bool>>,
}

pub fn load_scenario(dir: &Path) -> Result<LoadedScenario> {
    let frames = checkpoint::load_single::<f32>(&dir.join("frames.vadt"), "frames")?;
    let masks = tensor_to_masks(&checkpoint::load_single::<f32>(&dir.join("masks.vadt"), "masks")?);
    let truth: GroundTruth = read_json(&dir.join("gt.json"))?;
    Ok(LoadedScenario {
        frames,
        truth,
        masks,
    })
}

fn validate_splits(splits: &[SplitSpec]) -> Result<()> {
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            if a.name == b.name {
                return Err(VadError::Config(format!("duplicate split name {}", a.name)));
            }
        }
    }
    for split in splits {
        match split.kind {
            SplitKind::Train => {
                if split
                    .configs
                    .iter()
                    .any(|c| !c.braking_events.is_empty())
                {
                    return Err(VadError::Config(format!(
                        "train split {} must have zero braking events",
                        split.name
                    )));
                }
            }
            SplitKind::Test => {
                if split.configs.iter().any(|c| c.braking_events.is_empty()) {
                    return Err(VadError::Config(format!(
                        "test split {} requires at least one braking event per scenario",
                        split.name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Generate and persist every scenario, then write the manifest.
pub fn build_dataset(root: &Path, splits: &[SplitSpec]) -> Result<()> {
    validate_splits(splits)?;
    fs::create_dir_all(root).map_err(|e| VadError::io(root.display().to_string(), e))?;
    for split in splits {
        for (i, cfg) in split.configs.iter().enumerate() {
            let scenario = scenegen::generate_scenario(cfg)?;
            let dir = root.join(&split.name).join(scenario_id(&split.name, i));
            save_scenario(&dir, &scenario)?;
        }
    }
    write_json(
        &root.join("manifest.json"),
        &DatasetManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            splits: splits.to_vec(),
        },
    )
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(VadError::Config(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Rebuild every scenario directory from the stored configs.
pub fn rebuild_from_manifest(root: &Path) -> Result<()> {
    let manifest = load_manifest(root)?;
    for split in &manifest.splits {
        for (i, cfg) in split.configs.iter().enumerate() {
            let scenario = scenegen::generate_scenario(cfg)?;
            let dir = root.join(&split.name).join(scenario_id(&split.name, i));
            save_scenario(&dir, &scenario)?;
        }
    }
    Ok(())
}

pub fn scenario_dirs(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(root)?;
    let spec = manifest
        .splits
        .iter()
        .find(|s| s.name == split)
        .ok_or_else(|| VadError::MissingPrerequisite(format!("split {split} in dataset manifest")))?;
    Ok((0..spec.configs.len())
        .map(|i| root.join(split).join(scenario_id(split, i)))
        .collect())
}

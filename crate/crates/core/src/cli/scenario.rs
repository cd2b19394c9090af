//! Synthetic transfer scenarios written as dataset directories.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, Scenario};
use crate::data::io::save_dataset;
use crate::data::phantoms::{phantom, Family};
use crate::error::{Error, Result};
use crate::mri::{add_noise, forward, make_cartesian_mask, Measurement};
use crate::tensor::{substream, ComplexImage};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetRole {
    Source,
    TargetTrain,
    TargetTest,
}

/// One dataset directory to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPlan {
    pub name: String,
    pub role: SetRole,
    pub family: Family,
    pub ratio: f64,
    /// Phantom indices `first..first + count` of `image_seed`.
    pub first: usize,
    pub count: usize,
    pub image_seed: u64,
    pub mask_seed: u64,
    /// Relative directory under the output root.
    pub dir: PathBuf,
}

fn ratio_tag(r: f64) -> String {
    format!("r{:02}", (r * 100.0).round() as u32)
}

fn derived(seed: u64, salt: u64) -> u64 {
    substream(seed, salt).random()
}

/// The sets of a scenario, sources first.
pub fn plan(cfg: &DataConfig) -> Vec<SetPlan> {
    let mut sets = Vec::new();
    let mut source = |name: String, family: Family, ratio: f64, salt: u64| {
        sets.push(SetPlan {
            dir: Path::new("source").join(&name),
            name,
            role: SetRole::Source,
            family,
            ratio,
            first: 0,
            count: cfg.source_count,
            image_seed: derived(cfg.seed, 100 + salt),
            mask_seed: derived(cfg.seed, 200 + salt),
        });
    };
    let targets: Vec<(String, Family, f64)> = match cfg.scenario {
        Scenario::CrossAnatomy | Scenario::CrossModality => {
            for (i, &f) in cfg.source_families.iter().enumerate() {
                source(f.name().to_string(), f, cfg.ratio, i as u64);
            }
            let default = if cfg.scenario == Scenario::CrossAnatomy {
                Family::GridTexture
            } else {
                Family::BlobField
            };
            let f = cfg.target_family.unwrap_or(default);
            vec![(f.name().to_string(), f, cfg.ratio)]
        }
        Scenario::CrossRatio => {
            let f = cfg.source_families[0];
            for (i, &r) in cfg.source_ratios.iter().enumerate() {
                source(format!("{}_{}", f.name(), ratio_tag(r)), f, r, i as u64);
            }
            let t = cfg.target_family.unwrap_or(f);
            cfg.target_ratios
                .iter()
                .map(|&r| (format!("{}_{}", t.name(), ratio_tag(r)), t, r))
                .collect()
        }
    };
    for (i, (name, family, ratio)) in targets.into_iter().enumerate() {
        let image_seed = derived(cfg.seed, 300 + i as u64);
        let mask_seed = derived(cfg.seed, 400 + i as u64);
        for (role, first, count, sub) in [
            (SetRole::TargetTrain, 0, cfg.target_count, "train"),
            (SetRole::TargetTest, cfg.target_count, cfg.test_count, "test"),
        ] {
            sets.push(SetPlan {
                name: name.clone(),
                role,
                family,
                ratio,
                first,
                count,
                image_seed,
                mask_seed,
                dir: Path::new("target").join(&name).join(sub),
            });
        }
    }
    sets
}

/// Images and measurements of one set. All images of a set share a mask.
pub fn build(set: &SetPlan, size: usize, noise_std: f64) -> Result<(Vec<ComplexImage>, Vec<Measurement>)> {
    let mask = make_cartesian_mask(size, set.ratio, set.mask_seed)?;
    let mut truths = Vec::with_capacity(set.count);
    let mut ms = Vec::with_capacity(set.count);
    for i in set.first..set.first + set.count {
        let truth = phantom(set.family, size, set.image_seed, i)?;
        let clean = forward(&truth, &mask)?;
        ms.push(add_noise(&clean, noise_std, set.image_seed ^ (i as u64).wrapping_mul(0x9E37_79B9))?);
        truths.push(truth);
    }
    Ok((truths, ms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEntry {
    pub name: String,
    pub role: SetRole,
    pub family: Family,
    pub ratio: f64,
    pub count: usize,
    pub dir: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: Scenario,
    pub size: usize,
    pub seed: u64,
    pub sets: Vec<SetEntry>,
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes every set of the scenario under `out` plus `manifest.json`.
pub fn gen_data(cfg: &DataConfig, out: &Path) -> Result<Manifest> {
    let mut sets = Vec::new();
    for set in plan(cfg) {
        let dir = out.join(&set.dir);
        let (truths, ms) = build(&set, cfg.size, cfg.noise_std)?;
        let files = save_dataset(&dir, &truths, Some(&ms))?;
        sets.push(SetEntry {
            name: set.name.clone(),
            role: set.role,
            family: set.family,
            ratio: set.ratio,
            count: set.count,
            dir: slash_path(&set.dir),
            files: files
                .iter()
                .map(|f| slash_path(f.strip_prefix(out).unwrap_or(f)))
                .collect(),
        });
    }
    let manifest = Manifest {
        scenario: cfg.scenario,
        size: cfg.size,
        seed: cfg.seed,
        sets,
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

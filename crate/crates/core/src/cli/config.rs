//! The run configuration file: TOML with one section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::phantoms::Family;
use crate::error::{Error, Result};
use crate::solver::SolverConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Two source families, one unseen target family, same ratio.
    CrossAnatomy,
    /// One family at several source ratios and two unseen target ratios.
    CrossRatio,
    /// Source families against the most dissimilar target family.
    CrossModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub size: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            size: 32,
            ratio: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenario: Scenario,
    pub size: usize,
    pub seed: u64,
    /// Images per source set.
    pub source_count: usize,
    /// Training images per target set.
    pub target_count: usize,
    /// Held-out images per target set.
    pub test_count: usize,
    /// Sampling ratio of every set whose ratio the scenario does not fix.
    pub ratio: f64,
    pub source_ratios: Vec<f64>,
    pub target_ratios: Vec<f64>,
    pub source_families: Vec<Family>,
    /// Unset picks the scenario's own: `grid_texture` across anatomy,
    /// `blob_field` across modality, the first source family across ratios.
    pub target_family: Option<Family>,
    /// Standard deviation of complex k-space noise.
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenario: Scenario::CrossAnatomy,
            size: 32,
            seed: 0,
            source_count: 200,
            target_count: 100,
            test_count: 20,
            ratio: 0.2,
            source_ratios: vec![0.10, 0.20, 0.30],
            target_ratios: vec![0.15, 0.25],
            source_families: vec![Family::SheppLogan, Family::RandomEllipses],
            target_family: None,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Scale both images by the ground truth's peak magnitude first.
    pub normalize: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

pub const CONFIG_ECHO: &str = "config.toml";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets every seed of the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
        self.mask.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (name, n) in [("mask.size", self.mask.size), ("data.size", self.data.size)] {
            if !crate::tensor::is_power_of_two(n) || n < 4 {
                return bad(format!("{name} = {n} must be a power of two, at least 4"));
            }
        }
        let ratios = [self.mask.ratio, self.data.ratio]
            .into_iter()
            .chain(self.data.source_ratios.iter().copied())
            .chain(self.data.target_ratios.iter().copied());
        for r in ratios {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("sampling ratio {r} must lie in (0, 1]"));
            }
        }
        if !(self.data.noise_std >= 0.0 && self.data.noise_std.is_finite()) {
            return bad(format!("data.noise_std = {} must be nonnegative", self.data.noise_std));
        }
        if self.data.source_families.is_empty() {
            return bad("data.source_families is empty".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

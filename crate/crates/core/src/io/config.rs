//! Pipeline configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::ForestParams;
use crate::backtest::{make_split, SplitPlan, YearSpan};
use crate::error::{Error, Result};
use crate::models::{Gender, ModelId};

/// Synthetic data settings, used when no rate file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub drift: f64,
    pub sigma: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            drift: -1.2,
            sigma: 1.0,
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Rate file in the HMD layout; synthetic data when absent.
    pub data: Option<PathBuf>,
    pub genders: Vec<Gender>,
    pub first_year: i32,
    pub last_year: i32,
    pub train_years: usize,
    pub validation_years: usize,
    pub test_years: usize,
    pub models: Vec<ModelId>,
    pub horizon: usize,
    pub alpha: f64,
    /// Permutations per attributed row.
    pub samples: usize,
    pub seed: u64,
    pub forest: ForestParams,
    pub output: PathBuf,
    pub gap_tolerant: bool,
    pub pooled_forest: bool,
    pub charts: bool,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
    pub synthetic: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: None,
            genders: Gender::BOTH.to_vec(),
            first_year: 1940,
            last_year: 2019,
            train_years: 60,
            validation_years: 10,
            test_years: 10,
            models: ModelId::ALL.to_vec(),
            horizon: 10,
            alpha: 0.2,
            samples: 2048,
            seed: 2024,
            forest: ForestParams::default(),
            output: PathBuf::from("report"),
            gap_tolerant: false,
            pooled_forest: false,
            charts: true,
            workers: 0,
            synthetic: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative `data` and `output` paths resolve against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = &cfg.data {
            if d.is_relative() {
                cfg.data = Some(base.join(d));
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn years(&self) -> YearSpan {
        YearSpan::new(self.first_year, self.last_year)
    }

    pub fn split(&self) -> Result<SplitPlan> {
        make_split(self.years(), self.train_years, self.validation_years, self.test_years)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.last_year < self.first_year {
            return bad(format!("year range {}-{} is empty", self.first_year, self.last_year));
        }
        self.split()?;
        if self.horizon == 0 || self.horizon > self.validation_years || self.horizon > self.test_years {
            return bad(format!(
                "horizon {} must be at least 1 and at most the validation and test lengths",
                self.horizon
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.models.len() < 2 {
            return bad("the roster needs at least two models".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return bad(format!("model {m} listed twice"));
            }
        }
        if self.genders.is_empty() {
            return bad("no genders selected".into());
        }
        for (i, g) in self.genders.iter().enumerate() {
            if self.genders[..i].contains(g) {
                return bad(format!("gender {} listed twice", g.as_str()));
            }
        }
        let f = &self.forest;
        if f.tree_count == 0 || f.max_depth == 0 || f.min_leaf_size == 0 || f.features_per_split == Some(0) {
            return bad("forest sizes must be positive".into());
        }
        Ok(())
    }
}

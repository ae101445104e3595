//! The hierarchical run configuration: one TOML document whose sections map
//! onto the module configs. Unknown keys are rejected; every section
//! validates before any work starts. Command-line flags override document
//! values, which override built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassTable, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{DiceConfig, OhemConfig};
use crate::metrics::UndefinedPolicy;
use crate::model::ModelConfig;
use crate::sampler::{AugConfig, SamplePolicy};
use crate::tiler::TileSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub undefined_policy: UndefinedPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            undefined_policy: UndefinedPolicy::Exclude,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_data_root")]
    pub data_root: PathBuf,
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
}

fn default_data_root() -> PathBuf {
    PathBuf::from("data")
}

fn default_run_root() -> PathBuf {
    PathBuf::from("run")
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_root: default_data_root(),
            run_root: default_run_root(),
        }
    }
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for synthesis and training (train.seed falls back to this).
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sampler/tiler parallelism; 1 pins deterministic single-threaded mode.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub classes: ClassTable,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub sample: SamplePolicy,
    #[serde(default)]
    pub augment: AugConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ohem: OhemConfig,
    #[serde(default)]
    pub dice: DiceConfig,
    #[serde(default)]
    pub tile: TileSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// A fully validated configuration with every optional section filled in.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub workers: usize,
    pub classes: ClassTable,
    pub synth: SynthSpec,
    pub sample: SamplePolicy,
    pub augment: AugConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ohem: OhemConfig,
    pub dice: DiceConfig,
    pub tile: TileSpec,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills defaults that depend on other sections and validates everything.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let classes = self.classes.clone();
        classes.validate()?;

        let seed = self.seed.unwrap_or(0);
        let mut train = self.train.clone();
        if self.train.seed == 0 {
            train.seed = seed;
        }

        let synth = match &self.synth {
            Some(s) => s.clone(),
            None => SynthSpec::default_11(256, 256),
        };
        synth.validate()?;
        synth.check_table(&classes)?;

        let mut sample = self.sample.clone();
        if sample.rare_set.is_empty() {
            sample.rare_set = classes.rare_set().into_iter().collect();
        }
        sample.validate()?;
        if sample.crop_size % 32 != 0 {
            return Err(Error::Config(format!(
                "sample.crop_size {} must be divisible by 32 (model input constraint)",
                sample.crop_size
            )));
        }
        for &id in &sample.rare_set {
            if !classes.is_valid_label(id) || id == classes.ignore_id {
                return Err(Error::Config(format!(
                    "sample.rare_set contains invalid class id {id}"
                )));
            }
        }

        let model = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::mit_nano(classes.num_classes()),
        };
        model.validate()?;
        if model.num_classes != classes.num_classes() {
            return Err(Error::Config(format!(
                "model.num_classes {} != class table size {}",
                model.num_classes,
                classes.num_classes()
            )));
        }

        self.augment.validate()?;
        train.validate()?;
        self.ohem.validate()?;
        self.dice.validate()?;
        self.tile.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }

        Ok(ResolvedConfig {
            seed,
            workers: self.workers,
            classes,
            synth,
            sample,
            augment: self.augment.clone(),
            model,
            train,
            ohem: self.ohem.clone(),
            dice: self.dice.clone(),
            tile: self.tile.clone(),
            eval: self.eval.clone(),
            paths: self.paths.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.classes.num_classes(), 11);
        assert_eq!(r.model.num_classes, 11);
        assert_eq!(r.sample.rare_set, vec![3, 4, 5]);
        assert_eq!(r.tile.tile_size, 1024);
        assert_eq!(r.train.lr0, 6e-5);
        assert_eq!(r.workers, 1);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml("unknown_field = 3").unwrap_err().to_string();
        assert!(err.contains("unknown_field"), "{err}");
        let err = RunConfig::from_toml("[train]\nlearning_rate = 0.1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn section_overrides_apply() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 9
[sample]
crop_size = 96
rare_fraction = 0.75
[train]
epochs = 3
lr0 = 2e-3
[tile]
tile_size = 128
stride = 96
"#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.seed, 9);
        assert_eq!(r.train.seed, 9);
        assert_eq!(r.sample.crop_size, 96);
        assert_eq!(r.sample.rare_fraction, 0.75);
        assert_eq!(r.tile.stride, 96);
    }

    #[test]
    fn cross_section_mismatches_rejected() {
        let cfg = RunConfig::from_toml(
            r#"
[model]
num_classes = 5
stage_depths = [1, 1, 1, 1]
stage_dims = [16, 32, 64, 128]
stage_heads = [1, 2, 4, 8]
sr_ratios = [8, 4, 2, 1]
mlp_ratio = 4
decoder_dim = 64
"#,
        )
        .unwrap();
        let err = cfg.resolve().unwrap_err().to_string();
        assert!(err.contains("num_classes"), "{err}");

        let cfg = RunConfig::from_toml("[sample]\ncrop_size = 100").unwrap();
        assert!(cfg.resolve().unwrap_err().to_string().contains("divisible by 32"));
    }
}

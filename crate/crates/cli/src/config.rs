//! Declarative run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use steerhoi::data::{SplitSpec, SynthConfig};
use steerhoi::evaluation::Setting;
use steerhoi::model::ModelConfig;
use steerhoi::objectives::LossWeights;
use steerhoi::train::TrainConfig;

/// Where images and annotations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedurally generated scenes; evaluation uses the same set unless
    /// `test_seed` asks for an independent one.
    Synth {
        #[serde(default)]
        synth: SynthConfig,
        #[serde(default)]
        test_seed: Option<u64>,
    },
    /// JSON-lines annotation files plus one-name-per-line vocabularies.
    Hico { train: PathBuf, test: PathBuf, verbs: PathBuf, objects: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synth { synth: SynthConfig::default(), test_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub max_per_image: usize,
    pub settings: Vec<Setting>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, max_per_image: 100, settings: vec![Setting::Default, Setting::KnownObject] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kernel_lengths: Vec<usize>,
    /// Names from [`crate::experiment::Toggle`].
    pub toggles: Vec<String>,
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kernel_lengths: vec![1, 4, 8, 16],
            toggles: ["-l_nce", "-l_gen", "-csc", "-l_logic", "classifier", "-f_global", "-v_k", "naive_fusion"]
                .map(String::from)
                .to_vec(),
            alphas: vec![0.0, 0.3, 0.6, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialisation and batch order; overrides the nested seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    /// Mutually exclusive verb pairs for the logic loss, by phrase.
    pub exclusions: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            exclusions: vec![("sit on".into(), "stand on".into()), ("push".into(), "pull".into())],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section before any compute happens.
    pub fn validate(&self) -> Result<()> {
        self.model.perception.validate()?;
        self.model.generator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if let DataConfig::Synth { synth, .. } = &self.data {
            synth.validate()?;
            if synth.cells != self.model.generator.raster_cells {
                bail!(
                    "synthetic raster has {} cells per side but the generator expects {}",
                    synth.cells,
                    self.model.generator.raster_cells
                );
            }
        }
        if self.model.max_decode_len == 0 {
            bail!("max_decode_len must be at least 1");
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            bail!("iou_threshold must lie in (0, 1]");
        }
        if self.eval.settings.is_empty() {
            bail!("at least one evaluation setting is required");
        }
        Ok(())
    }
}

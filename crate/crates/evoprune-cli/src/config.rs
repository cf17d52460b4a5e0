//! Run configuration: one JSON file per run, strict about unknown keys,
//! defaults filled from the toolkit's standard constants.

use evoprune::data::{AugmentPolicy, DataSource, Split};
use evoprune::distill::DistillConfig;
use evoprune::genetic::GaConfig;
use evoprune::net::{models, NetworkSpec};
use evoprune::optim::{seeded_stream, OptimizerConfig};
use evoprune::pruner::{FinetuneConfig, PruningPlan};
use evoprune::sampler::SampleConfig;
use evoprune::{container, Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Sensitivity,
    Prune,
    Finetune,
    Eval,
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    DeskCnn,
    Vgg16Cifar,
    Vgg16Imagenet,
    ToyResnet,
}

/// Either a model container on disk or a named architecture.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub path: Option<PathBuf>,
    pub arch: Option<ArchName>,
    pub classes: Option<usize>,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        match (&self.path, &self.arch) {
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "model: give either path or arch, not both".into(),
            )),
            (None, None) => Err(Error::InvalidArgument(
                "model: give a path or an arch".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self, seed: u64) -> Result<NetworkSpec> {
        if let Some(path) = &self.path {
            return container::load_model(path);
        }
        let classes = self.classes.unwrap_or(10);
        let mut rng = seeded_stream(seed, 10);
        Ok(match self.arch.expect("validated") {
            ArchName::DeskCnn => models::desk_cnn(classes, &mut rng),
            ArchName::Vgg16Cifar => models::vgg16_bn_gap(classes, &mut rng),
            ArchName::Vgg16Imagenet => models::vgg16_imagenet(),
            ArchName::ToyResnet => models::toy_resnet(classes, &mut rng),
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: Option<DataSource>,
    pub test: Option<DataSource>,
}

impl DatasetConfig {
    /// A synthetic train source doubles as the test source (the generator
    /// keys the split internally); file-backed sources need explicit paths.
    pub fn test_source(&self) -> Option<&DataSource> {
        self.test.as_ref().or(match &self.train {
            Some(src @ DataSource::Synthetic(_)) => Some(src),
            _ => None,
        })
    }

    fn check_paths(source: &DataSource) -> Result<()> {
        let missing = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "dataset path {} does not exist",
                    p.display()
                )))
            }
        };
        match source {
            DataSource::Idx { images, labels, .. } => {
                missing(images)?;
                missing(labels)
            }
            DataSource::CifarBinary { paths } => {
                for p in paths {
                    missing(p)?;
                }
                Ok(())
            }
            DataSource::Synthetic(spec) => spec.validate(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(src) = &self.train {
            Self::check_paths(src)?;
        }
        if let Some(src) = &self.test {
            Self::check_paths(src)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            optimizer: OptimizerConfig::default(),
            augment: AugmentPolicy::disabled(),
        }
    }
}

/// A whole run: command, inputs, and per-stage parameter blocks. Missing
/// blocks fall back to the standard constants (population 20, crossover and
/// mutation probability 0.1, budget 10x the channel count, 1% of images at
/// 10 volumes each).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub max_workers: Option<usize>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Frozen teacher for the finetune command.
    #[serde(default)]
    pub teacher: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub sampling: SampleConfig,
    /// Compression rates for the sensitivity command.
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default)]
    pub plan: PruningPlan,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        if let Some(t) = &self.teacher {
            t.validate()?;
        }
        self.ga.validate()?;
        self.sampling.validate()?;
        self.train.optimizer.validate()?;
        self.train.augment.validate()?;
        self.distill.validate()?;
        for &r in &self.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!(
                    "rate {r} outside [0, 1)"
                )));
            }
        }
        let needs_data = !matches!(self.command, Command::Stats);
        if needs_data && self.dataset.train.is_none() && self.dataset.test.is_none() {
            return Err(Error::InvalidArgument(
                "this command needs a dataset".into(),
            ));
        }
        if matches!(self.command, Command::Sensitivity) && self.rates.is_empty() {
            return Err(Error::InvalidArgument(
                "sensitivity needs a nonempty rates list".into(),
            ));
        }
        Ok(())
    }

    /// The serialized form of a parsed config: defaults made explicit, keys
    /// in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Reads, parses and validates a run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the train/test datasets a command needs. Test data is normalized
/// with the train split's statistics when both are present.
pub fn load_splits(
    cfg: &DatasetConfig,
) -> Result<(Option<evoprune::data::Dataset>, Option<evoprune::data::Dataset>)> {
    let train = cfg
        .train
        .as_ref()
        .map(|src| evoprune::data::load_dataset(src, Split::Train, None))
        .transpose()?;
    let stats = train.as_ref().map(|d| d.normalization.clone());
    let test = cfg
        .test_source()
        .map(|src| evoprune::data::load_dataset(src, Split::Test, stats))
        .transpose()?;
    Ok((train, test))
}

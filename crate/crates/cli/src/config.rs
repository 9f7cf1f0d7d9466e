use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chimera_core::data::{
    inject_asymmetric, inject_instance_dependent, inject_symmetric, read_dataset, BlobSpec, ClassPartition,
    NoisyDataset,
};
use chimera_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One experiment: where the data comes from, how labels are corrupted, how
/// to train and where outputs go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Synthetic Gaussian blobs. Exclusive with `path`.
    pub generator: Option<BlobSpec>,
    /// Test samples per class drawn alongside the generated training set.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Training set in the dataset text format.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

fn default_test_per_class() -> usize {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindConfig {
    None,
    Symmetric,
    Asymmetric,
    InstanceDependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionConfig {
    /// `"pairs"` or `"singletons"`.
    Named(String),
    Explicit(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKindConfig,
    #[serde(default)]
    pub ratio: f64,
    /// Required for asymmetric noise.
    pub partition: Option<PartitionConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: bool,
    pub jsonl: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("chimera-out"),
            csv: true,
            jsonl: true,
        }
    }
}

/// Fails on syntax errors, unknown keys and missing required keys, naming
/// the offending key path.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path == "." || path.is_empty() {
            anyhow::anyhow!("{msg}")
        } else {
            anyhow::anyhow!("at `{path}`: {msg}")
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.generator, &self.dataset.path) {
            (Some(g), None) => g.validate().context("dataset.generator")?,
            (None, Some(_)) => {}
            _ => bail!("dataset needs exactly one of `generator` or `path`"),
        }
        if !(0.0..=1.0).contains(&self.noise.ratio) {
            bail!("noise.ratio must be in [0,1], got {}", self.noise.ratio);
        }
        if self.noise.kind == NoiseKindConfig::Asymmetric && self.noise.partition.is_none() {
            bail!("noise.partition is required for asymmetric noise");
        }
        if let Some(PartitionConfig::Named(n)) = &self.noise.partition {
            if n != "pairs" && n != "singletons" {
                bail!("noise.partition must be \"pairs\", \"singletons\" or a list of class lists, got {n:?}");
            }
        }
        self.train.validate().context("train")?;
        Ok(())
    }

    /// Replaces every seed in the config.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.noise.seed = seed;
        if let Some(g) = &mut self.dataset.generator {
            g.seed = seed;
        }
    }

    /// SHA-256 of the canonical JSON form, which has sorted keys and every default filled in.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn partition(&self, num_classes: usize) -> Result<Option<ClassPartition>> {
        Ok(match &self.noise.partition {
            None => None,
            Some(PartitionConfig::Named(n)) if n == "pairs" => Some(ClassPartition::pairs(num_classes)),
            Some(PartitionConfig::Named(_)) => Some(ClassPartition::singletons(num_classes)),
            Some(PartitionConfig::Explicit(s)) => Some(ClassPartition::new(s.clone(), num_classes)?),
        })
    }

    /// Training set with noise injected, plus the clean test set if any.
    pub fn datasets(&self) -> Result<(NoisyDataset, Option<NoisyDataset>)> {
        let (clean, test) = match (&self.dataset.generator, &self.dataset.path) {
            (Some(g), _) if self.dataset.test_per_class > 0 => {
                let (tr, te) = g.generate_with_test(self.dataset.test_per_class)?;
                (tr, Some(te))
            }
            (Some(g), _) => (g.generate()?, None),
            (None, Some(p)) => {
                let test = self.dataset.test_path.as_deref().map(read_file).transpose()?;
                (read_file(p)?, test)
            }
            (None, None) => bail!("dataset needs exactly one of `generator` or `path`"),
        };
        let n = &self.noise;
        let train = match n.kind {
            NoiseKindConfig::None => clean,
            NoiseKindConfig::Symmetric => inject_symmetric(&clean, n.ratio, n.seed)?,
            NoiseKindConfig::Asymmetric => {
                let part = self.partition(clean.num_classes)?.expect("validated");
                inject_asymmetric(&clean, n.ratio, &part, n.seed)?
            }
            NoiseKindConfig::InstanceDependent => inject_instance_dependent(&clean, n.ratio, n.seed)?,
        };
        Ok((train, test))
    }
}

pub fn read_file(path: &Path) -> Result<NoisyDataset> {
    let f = std::fs::File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    read_dataset(std::io::BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

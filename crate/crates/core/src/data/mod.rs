//! Labeled datasets with hidden ground truth, synthetic generation, label
//! noise injection and augmentation.

mod augment;
mod io;
mod noise;

pub use augment::{augment, augment_rows, AugmentationSpec, Strength};
pub use io::{read_dataset, write_dataset};
pub use noise::{
    empirical_confusion, inject_asymmetric, inject_instance_dependent, inject_symmetric, ClassPartition,
    InstanceNoiseModel, TransitionMatrix, IDN_RATE_STD,
};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub features: Vec<f64>,
    /// Ground truth, used only for evaluation and auditing.
    pub true_label: usize,
    pub noisy_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
    InstanceDependent,
}

/// How the observed labels were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub partition: Option<ClassPartition>,
    pub seed: Option<u64>,
    /// Standard deviation of per-instance flip rates (instance-dependent only).
    pub rate_std: Option<f64>,
}

impl NoiseMeta {
    pub fn clean() -> Self {
        Self {
            kind: NoiseKind::None,
            ratio: 0.0,
            partition: None,
            seed: None,
            rate_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub prior: Vec<f64>,
    pub noise: NoiseMeta,
}

impl NoisyDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, prior: Vec<f64>, noise: NoiseMeta) -> Result<Self> {
        let ds = Self {
            samples,
            num_classes,
            prior,
            noise,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.prior.len() != self.num_classes {
            return Err(Error::invalid("prior length must equal the class count"));
        }
        if self.prior.iter().any(|&p| !(p >= 0.0)) || (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("prior must be a probability vector"));
        }
        let d = self.dim();
        for s in &self.samples {
            if s.true_label >= self.num_classes || s.noisy_label >= self.num_classes {
                return Err(Error::invalid(format!("sample {} has a label out of range", s.index)));
            }
            if s.features.len() != d || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {} has bad features", s.index)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn noisy_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.noisy_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.true_label).collect()
    }

    /// `true` where the observed label is wrong.
    pub fn noise_mask(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.noisy_label != s.true_label).collect()
    }

    pub fn noise_rate(&self) -> f64 {
        let flips = self.noise_mask().iter().filter(|&&b| b).count();
        flips as f64 / self.len().max(1) as f64
    }

    /// All features as an `[n, d]` matrix.
    pub fn features(&self) -> Tensor {
        Tensor::gather_rows(self.samples.iter().map(|s| s.features.as_slice()), self.dim()).expect("validated")
    }

    pub fn features_of(&self, idx: &[usize]) -> Tensor {
        Tensor::gather_rows(idx.iter().map(|&i| self.samples[i].features.as_slice()), self.dim()).expect("validated")
    }

    /// Root of the mean per-coordinate variance; the scale used by augmentation presets.
    pub fn feature_std(&self) -> f64 {
        let n = self.len() as f64;
        let d = self.dim();
        if self.len() < 2 || d == 0 {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 0..d {
            let mean = self.samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
            total += self.samples.iter().map(|s| (s.features[j] - mean).powi(2)).sum::<f64>() / n;
        }
        (total / d as f64).sqrt()
    }

    /// Labels reset to ground truth.
    pub(crate) fn cleaned(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .map(|s| Sample {
                noisy_label: s.true_label,
                ..s.clone()
            })
            .collect()
    }
}

/// Gaussian blobs: class `c` is centered at a random unit direction scaled by
/// `separation`, with identity covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    /// When set, each odd class sits this far from the preceding even class
    /// instead of at its own random center, making the pairs look alike.
    pub pair_distance: Option<f64>,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 250,
            dim: 32,
            separation: 3.0,
            seed: 0,
            pair_distance: None,
        }
    }
}

fn random_direction(dim: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!(
                "blob dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::invalid("class and per-class counts must be positive"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::invalid(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if let Some(d) = self.pair_distance {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("pair_distance must be positive, got {d}")));
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = derived(self.seed, &[0]);
        let mut centers: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                random_direction(self.dim, &mut rng)
                    .into_iter()
                    .map(|x| x * self.separation)
                    .collect()
            })
            .collect();
        if let Some(d) = self.pair_distance {
            let mut rng = derived(self.seed, &[3]);
            for c in (1..self.num_classes).step_by(2) {
                let u = random_direction(self.dim, &mut rng);
                centers[c] = centers[c - 1].iter().zip(&u).map(|(m, x)| m + d * x).collect();
            }
        }
        centers
    }

    fn draw(&self, centers: &[Vec<f64>], per_class: usize, stream: u64) -> NoisyDataset {
        let mut rng = derived(self.seed, &[stream]);
        let c = self.num_classes;
        let samples = (0..per_class * c)
            .map(|i| {
                let label = i % c;
                let features = centers[label]
                    .iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + e
                    })
                    .collect::<Vec<f64>>();
                Sample {
                    index: i,
                    features,
                    true_label: label,
                    noisy_label: label,
                }
            })
            .collect();
        NoisyDataset {
            samples,
            num_classes: c,
            prior: vec![1.0 / c as f64; c],
            noise: NoiseMeta::clean(),
        }
    }

    pub fn generate(&self) -> Result<NoisyDataset> {
        self.validate()?;
        Ok(self.draw(&self.centers(), self.per_class, 1))
    }

    /// Training set plus a clean test set drawn around the same centers.
    pub fn generate_with_test(&self, test_per_class: usize) -> Result<(NoisyDataset, NoisyDataset)> {
        self.validate()?;
        if test_per_class == 0 {
            return Err(Error::invalid("test_per_class must be positive"));
        }
        let centers = self.centers();
        Ok((
            self.draw(&centers, self.per_class, 1),
            self.draw(&centers, test_per_class, 2),
        ))
    }
}

/// Clean blob dataset (`noisy_label == true_label`).
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    BlobSpec {
        num_classes,
        per_class,
        dim,
        separation,
        seed,
        pair_distance: None,
    }
    .generate()
}

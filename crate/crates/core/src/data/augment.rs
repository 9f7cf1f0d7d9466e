use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

/// Additive Gaussian jitter followed by per-coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub jitter_sigma: f64,
    pub dropout_prob: f64,
    pub strength: Strength,
}

impl AugmentationSpec {
    pub fn weak(feature_std: f64) -> Self {
        Self {
            jitter_sigma: 0.05 * feature_std,
            dropout_prob: 0.05,
            strength: Strength::Weak,
        }
    }

    pub fn strong(feature_std: f64) -> Self {
        Self {
            jitter_sigma: 0.2 * feature_std,
            dropout_prob: 0.2,
            strength: Strength::Strong,
        }
    }

    pub fn preset(strength: Strength, feature_std: f64) -> Self {
        match strength {
            Strength::Weak => Self::weak(feature_std),
            Strength::Strong => Self::strong(feature_std),
        }
    }

    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            dropout_prob: 0.0,
            strength: Strength::Weak,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::invalid(format!(
                "jitter_sigma must be >= 0, got {}",
                self.jitter_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid(format!(
                "dropout_prob must be in [0,1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// Does not validate `spec`; `dropout_prob = 1` yields the zero vector.
pub fn augment(x: &[f64], spec: &AugmentationSpec, rng: &mut Rng) -> Vec<f64> {
    let noise = (spec.jitter_sigma > 0.0).then(|| Normal::new(0.0, spec.jitter_sigma).expect("positive sigma"));
    x.iter()
        .map(|&v| {
            let jittered = match &noise {
                Some(n) => v + n.sample(rng),
                None => v,
            };
            if spec.dropout_prob > 0.0 && rng.random::<f64>() < spec.dropout_prob {
                0.0
            } else {
                jittered
            }
        })
        .collect()
}

/// Augments every row of an `[n, d]` matrix with one shared stream.
pub fn augment_rows(x: &Tensor, spec: &AugmentationSpec, rng: &mut Rng) -> Tensor {
    let (n, d) = x.dims2();
    let mut data = Vec::with_capacity(n * d);
    for row in x.row_iter() {
        data.extend(augment(row, spec, rng));
    }
    Tensor::new(vec![n, d], data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_spec() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(augment(&x, &AugmentationSpec::identity(), &mut seeded(0)), x);
    }

    #[test]
    fn full_dropout_zeroes() {
        let spec = AugmentationSpec {
            jitter_sigma: 0.3,
            dropout_prob: 1.0,
            strength: Strength::Strong,
        };
        assert!(augment(&[1.0, 2.0], &spec, &mut seeded(0)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weak_mean_is_scaled_input() {
        let x = vec![2.0, -1.0, 0.5];
        let spec = AugmentationSpec::weak(1.0);
        let a = augment(&x, &spec, &mut seeded(1));
        let b = augment(&x, &spec, &mut seeded(2));
        assert_ne!(a, b);
        let trials = 40_000;
        let mut rng = seeded(3);
        let mut mean = [0.0; 3];
        for _ in 0..trials {
            for (m, v) in mean.iter_mut().zip(augment(&x, &spec, &mut rng)) {
                *m += v / trials as f64;
            }
        }
        for (m, v) in mean.iter().zip(&x) {
            let expect = v * (1.0 - spec.dropout_prob);
            // sd of one draw is below |v| + sigma; 5 sigma of the mean
            let tol = 5.0 * (v.abs() + spec.jitter_sigma) / (trials as f64).sqrt();
            assert!((m - expect).abs() < tol, "{m} vs {expect}");
        }
    }

    #[test]
    fn presets_validate() {
        assert!(AugmentationSpec::weak(1.3).validate().is_ok());
        assert!(AugmentationSpec::strong(0.2).validate().is_ok());
        let bad = AugmentationSpec {
            jitter_sigma: -1.0,
            ..AugmentationSpec::identity()
        };
        assert!(bad.validate().is_err());
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NoiseKind, NoiseMeta, NoisyDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{derived, Rng as StdRng};
use crate::tensor::softmax_in_place;

/// Spread of per-instance flip rates around the target ratio.
pub const IDN_RATE_STD: f64 = 0.1;

/// Disjoint class subsets covering `[0, C)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub subsets: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn new(subsets: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let p = Self { subsets };
        p.validate(num_classes)?;
        Ok(p)
    }

    pub fn singletons(num_classes: usize) -> Self {
        Self {
            subsets: (0..num_classes).map(|c| vec![c]).collect(),
        }
    }

    /// `{0,1}, {2,3}, ...`; an odd last class stays alone.
    pub fn pairs(num_classes: usize) -> Self {
        Self {
            subsets: (0..num_classes)
                .step_by(2)
                .map(|c| (c..(c + 2).min(num_classes)).collect())
                .collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for s in &self.subsets {
            if s.is_empty() {
                return Err(Error::invalid("partition contains an empty subset"));
            }
            for &c in s {
                if c >= num_classes {
                    return Err(Error::invalid(format!(
                        "partition class {c} out of range for C={num_classes}"
                    )));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::invalid(format!("class {c} appears in two subsets")));
                }
            }
        }
        if let Some(c) = seen.iter().position(|&b| !b) {
            return Err(Error::invalid(format!("class {c} is not covered by the partition")));
        }
        Ok(())
    }

    /// Subset index containing `class`.
    pub fn subset_of(&self, class: usize) -> Option<usize> {
        self.subsets.iter().position(|s| s.contains(&class))
    }

    /// Sorted members, subsets ordered by smallest member.
    pub fn canonical(&self) -> Self {
        let mut subsets: Vec<Vec<usize>> = self
            .subsets
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s
            })
            .collect();
        subsets.sort();
        Self { subsets }
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}

impl std::fmt::Display for ClassPartition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .canonical()
            .subsets
            .iter()
            .map(|s| format!("{{{}}}", s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")))
            .collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Label confusion counts; rows are true labels, columns observed labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl TransitionMatrix {
    /// Row-normalized transition probabilities; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Per-class flip ratio `1 - c_kk` of the row-normalized matrix.
    pub fn flip_ratios(&self) -> Vec<f64> {
        self.normalized()
            .iter()
            .enumerate()
            .map(|(k, row)| 1.0 - row[k])
            .collect()
    }

    /// The diagonal dominates every row that has samples; otherwise the noisy
    /// labels are not recoverable even in principle.
    pub fn is_feasible(&self) -> bool {
        self.counts.iter().enumerate().all(|(j, row)| {
            let max = row.iter().copied().max().unwrap_or(0);
            row.iter().sum::<u64>() == 0 || row[j] == max
        })
    }
}

pub fn empirical_confusion(ds: &NoisyDataset) -> Result<TransitionMatrix> {
    if ds.is_empty() {
        return Err(Error::invalid("confusion of an empty dataset"));
    }
    let c = ds.num_classes;
    let mut counts = vec![vec![0u64; c]; c];
    for s in &ds.samples {
        counts[s.true_label][s.noisy_label] += 1;
    }
    Ok(TransitionMatrix { counts })
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("noise ratio must be in [0,1], got {r}")));
    }
    Ok(())
}

fn relabel(ds: &NoisyDataset, noise: NoiseMeta, mut f: impl FnMut(&Sample) -> usize) -> NoisyDataset {
    let samples = ds
        .cleaned()
        .into_iter()
        .map(|s| Sample {
            noisy_label: f(&s),
            ..s
        })
        .collect();
    NoisyDataset {
        samples,
        num_classes: ds.num_classes,
        prior: ds.prior.clone(),
        noise,
    }
}

/// Flips each label with probability `r` to a uniformly chosen different class.
/// Labels are always re-drawn from the ground truth.
pub fn inject_symmetric(ds: &NoisyDataset, r: f64, seed: u64) -> Result<NoisyDataset> {
    check_ratio(r)?;
    let c = ds.num_classes;
    if c < 2 && r > 0.0 {
        return Err(Error::invalid("symmetric noise needs at least two classes"));
    }
    let mut rng = derived(seed, &[0x5111]);
    let meta = NoiseMeta {
        kind: NoiseKind::Symmetric,
        ratio: r,
        partition: None,
        seed: Some(seed),
        rate_std: None,
    };
    Ok(relabel(ds, meta, |s| {
        if rng.random::<f64>() < r {
            let other = rng.random_range(0..c - 1);
            if other >= s.true_label {
                other + 1
            } else {
                other
            }
        } else {
            s.true_label
        }
    }))
}

/// Flips with probability `r` to another member of the true label's subset.
/// Samples in singleton subsets keep their label.
pub fn inject_asymmetric(ds: &NoisyDataset, r: f64, partition: &ClassPartition, seed: u64) -> Result<NoisyDataset> {
    check_ratio(r)?;
    partition.validate(ds.num_classes)?;
    let mut rng = derived(seed, &[0xA5E]);
    let meta = NoiseMeta {
        kind: NoiseKind::Asymmetric,
        ratio: r,
        partition: Some(partition.clone()),
        seed: Some(seed),
        rate_std: None,
    };
    Ok(relabel(ds, meta, |s| {
        let subset = &partition.subsets[partition.subset_of(s.true_label).expect("validated")];
        let flip = rng.random::<f64>() < r;
        if !flip || subset.len() < 2 {
            return s.true_label;
        }
        let others: Vec<usize> = subset.iter().copied().filter(|&k| k != s.true_label).collect();
        others[rng.random_range(0..others.len())]
    }))
}

/// Feature-dependent flip distribution: a fixed random projection `W` scores
/// the wrong classes, a softmax over those scores spreads the flip mass.
#[derive(Clone, Debug)]
pub struct InstanceNoiseModel {
    /// `[d][C]`
    weights: Vec<Vec<f64>>,
    num_classes: usize,
}

impl InstanceNoiseModel {
    pub fn new(dim: usize, num_classes: usize, rng: &mut StdRng) -> Self {
        let weights = (0..dim)
            .map(|_| (0..num_classes).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self { weights, num_classes }
    }

    /// Label distribution for a sample whose flip rate is `q`.
    pub fn flip_distribution(&self, features: &[f64], label: usize, q: f64) -> Vec<f64> {
        let c = self.num_classes;
        let scores: Vec<f64> = (0..c)
            .filter(|&k| k != label)
            .map(|k| features.iter().zip(&self.weights).map(|(x, w)| x * w[k]).sum())
            .collect();
        let mut spread = scores;
        softmax_in_place(&mut spread);
        let mut dist = vec![0.0; c];
        let mut it = spread.into_iter();
        for (k, slot) in dist.iter_mut().enumerate() {
            *slot = if k == label {
                1.0 - q
            } else {
                q * it.next().expect("C-1 scores")
            };
        }
        dist
    }
}

fn sample_categorical(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Instance-dependent noise: per-sample flip rate from a normal with mean `r`
/// and std [`IDN_RATE_STD`] truncated to `[0,1]`; at `r = 0` or `r = 1` the
/// rate is exactly `r`.
pub fn inject_instance_dependent(ds: &NoisyDataset, r: f64, seed: u64) -> Result<NoisyDataset> {
    check_ratio(r)?;
    let c = ds.num_classes;
    if c < 2 && r > 0.0 {
        return Err(Error::invalid("instance-dependent noise needs at least two classes"));
    }
    let model = InstanceNoiseModel::new(ds.dim(), c, &mut derived(seed, &[0x1D, 0]));
    let mut rng = derived(seed, &[0x1D, 1]);
    let rate = Normal::new(r, IDN_RATE_STD).expect("finite");
    let meta = NoiseMeta {
        kind: NoiseKind::InstanceDependent,
        ratio: r,
        partition: None,
        seed: Some(seed),
        rate_std: Some(IDN_RATE_STD),
    };
    Ok(relabel(ds, meta, |s| {
        let q = if r == 0.0 || r == 1.0 {
            r
        } else {
            loop {
                let q = rate.sample(&mut rng);
                if (0.0..=1.0).contains(&q) {
                    break q;
                }
            }
        };
        let dist = model.flip_distribution(&s.features, s.true_label, q);
        sample_categorical(&dist, rng.random::<f64>())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn blobs(n_per: usize, c: usize) -> NoisyDataset {
        make_blobs(c, n_per, 4, 3.0, 1).unwrap()
    }

    #[test]
    fn symmetric_endpoints() {
        let ds = blobs(50, 4);
        assert_eq!(inject_symmetric(&ds, 0.0, 1).unwrap().noise_rate(), 0.0);
        let all = inject_symmetric(&ds, 1.0, 1).unwrap();
        assert!(all.samples.iter().all(|s| s.noisy_label != s.true_label));
        assert!(inject_symmetric(&ds, 1.5, 1).is_err());
        assert!(inject_symmetric(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn symmetric_flip_fraction_concentrates() {
        let ds = blobs(1000, 10);
        let n = ds.len() as f64;
        let noisy = inject_symmetric(&ds, 0.5, 7).unwrap();
        assert!((noisy.noise_rate() - 0.5).abs() <= 3.0 * (0.25 / n).sqrt());
        assert_eq!(noisy.noise.kind, NoiseKind::Symmetric);
    }

    #[test]
    fn singletons_never_flip() {
        let ds = blobs(30, 4);
        let out = inject_asymmetric(&ds, 0.9, &ClassPartition::singletons(4), 2).unwrap();
        assert_eq!(out.noise_rate(), 0.0);
    }

    #[test]
    fn pairs_force_flip_at_r1() {
        let ds = blobs(30, 4);
        let p = ClassPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let out = inject_asymmetric(&ds, 1.0, &p, 2).unwrap();
        for s in &out.samples {
            let expect = [1, 0, 3, 2][s.true_label];
            assert_eq!(s.noisy_label, expect);
        }
    }

    #[test]
    fn bad_partitions() {
        assert!(ClassPartition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(ClassPartition::new(vec![vec![0, 1]], 3).is_err());
        assert!(ClassPartition::new(vec![vec![0, 3]], 3).is_err());
        assert!(ClassPartition::new(vec![vec![]], 0).is_err());
        let ds = blobs(5, 3);
        let bad = ClassPartition {
            subsets: vec![vec![0, 1]],
        };
        assert!(inject_asymmetric(&ds, 0.3, &bad, 0).is_err());
    }

    #[test]
    fn idn_zero_rate_is_identity() {
        let ds = blobs(50, 4);
        assert_eq!(inject_instance_dependent(&ds, 0.0, 3).unwrap().noise_rate(), 0.0);
    }

    #[test]
    fn idn_duplicates_share_distribution() {
        let model = InstanceNoiseModel::new(3, 4, &mut derived(1, &[]));
        let x = [0.3, -1.2, 2.0];
        let a = model.flip_distribution(&x, 2, 0.4);
        let b = model.flip_distribution(&x.clone(), 2, 0.4);
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn confusion_of_clean_and_flipped() {
        let ds = blobs(10, 2);
        let m = empirical_confusion(&ds).unwrap();
        assert_eq!(m.counts, vec![vec![10, 0], vec![0, 10]]);
        assert!(m.is_feasible());
        let flipped = inject_symmetric(&ds, 1.0, 0).unwrap();
        let m = empirical_confusion(&flipped).unwrap();
        assert_eq!(m.counts, vec![vec![0, 10], vec![10, 0]]);
        assert!(!m.is_feasible());
        assert_eq!(m.flip_ratios(), vec![1.0, 1.0]);
        let empty = NoisyDataset { samples: vec![], ..ds };
        assert!(empirical_confusion(&empty).is_err());
    }

    #[test]
    fn partition_display_is_canonical() {
        let p = ClassPartition {
            subsets: vec![vec![3, 2], vec![1, 0]],
        };
        assert_eq!(p.to_string(), "{{0,1},{2,3}}");
        assert!(p.same_as(&ClassPartition::pairs(4)));
    }
}

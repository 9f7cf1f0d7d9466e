//! Loss-based noise detection: per-sample cross-entropy, a two-component 1-D
//! Gaussian mixture fit by EM, thresholded clean/noisy splits, and inference
//! of class subsets that are confused with each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassPartition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;
const DEGENERATE_SPREAD: f64 = 1e-9;

/// `-log p_i[y_i]` with probabilities clamped at 1e-12.
pub fn per_sample_ce(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c) = probs.dims2();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} prediction rows",
            labels.len()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= c {
                return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
            }
            Ok(-probs.row(i)[y].max(PROB_FLOOR).ln())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Two-component fit. Component 0 always has the smaller mean and is read as
/// the clean cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Posterior of the clean component per sample.
    pub clean_prob: Vec<f64>,
    /// Log-likelihood before each M-step, then at the final parameters.
    pub log_likelihood: Vec<f64>,
    /// All losses (nearly) equal; every sample gets clean posterior 1.
    pub degenerate: bool,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Params {
    means: [f64; 2],
    vars: [f64; 2],
    weights: [f64; 2],
}

impl Params {
    /// Responsibilities of component 0 and the total log-likelihood.
    fn e_step(&self, xs: &[f64]) -> (Vec<f64>, f64) {
        let mut ll = 0.0;
        let resp = xs
            .iter()
            .map(|&x| {
                let a = self.weights[0].ln() + log_normal(x, self.means[0], self.vars[0]);
                let b = self.weights[1].ln() + log_normal(x, self.means[1], self.vars[1]);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                ll += lse;
                (a - lse).exp()
            })
            .collect();
        (resp, ll)
    }

    fn m_step(xs: &[f64], resp: &[f64]) -> Self {
        let n = xs.len() as f64;
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        let mean = |w: &dyn Fn(usize) -> f64, total: f64| {
            xs.iter().enumerate().map(|(i, x)| w(i) * x).sum::<f64>() / total.max(f64::MIN_POSITIVE)
        };
        let w0 = |i: usize| resp[i];
        let w1 = |i: usize| 1.0 - resp[i];
        let m0 = mean(&w0, n0);
        let m1 = mean(&w1, n1);
        let var = |w: &dyn Fn(usize) -> f64, m: f64, total: f64| {
            let v =
                xs.iter().enumerate().map(|(i, x)| w(i) * (x - m).powi(2)).sum::<f64>() / total.max(f64::MIN_POSITIVE);
            v.max(VARIANCE_FLOOR)
        };
        let weight = |k: f64| (k / n).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        Self {
            means: [m0, m1],
            vars: [var(&w0, m0, n0), var(&w1, m1, n1)],
            weights: [weight(n0), 1.0 - weight(n0)],
        }
    }
}

/// Fits a two-component mixture to 1-D losses by EM.
///
/// Initialization: means at the 10th and 90th percentiles, equal weights and
/// both variances equal to the sample variance.
pub fn fit_gmm_em(losses: &[f64], settings: EmSettings) -> Result<GmmFit> {
    let n = losses.len();
    if n < 4 {
        return Err(Error::invalid(format!("mixture fit needs at least 4 losses, got {n}")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("losses must be finite"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[n - 1] - sorted[0] <= DEGENERATE_SPREAD {
        let mean = losses.iter().sum::<f64>() / n as f64;
        log::debug!("degenerate loss distribution, treating all {n} samples as clean");
        return Ok(GmmFit {
            means: [mean, mean],
            variances: [VARIANCE_FLOOR; 2],
            weights: [1.0, 0.0],
            clean_prob: vec![1.0; n],
            log_likelihood: Vec::new(),
            degenerate: true,
        });
    }
    let mean = losses.iter().sum::<f64>() / n as f64;
    let var = (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR);
    let mut params = Params {
        means: [percentile(&sorted, 0.1), percentile(&sorted, 0.9)],
        vars: [var, var],
        weights: [0.5, 0.5],
    };
    let mut trace = Vec::new();
    for _ in 0..settings.max_iter {
        let (resp, ll) = params.e_step(losses);
        let converged = trace.last().is_some_and(|&prev: &f64| ll - prev < settings.tol);
        trace.push(ll);
        if converged {
            break;
        }
        params = Params::m_step(losses, &resp);
    }
    let (mut resp, ll) = params.e_step(losses);
    if trace.last() != Some(&ll) {
        trace.push(ll);
    }
    if params.means[1] < params.means[0] {
        params.means.swap(0, 1);
        params.vars.swap(0, 1);
        params.weights.swap(0, 1);
        resp.iter_mut().for_each(|r| *r = 1.0 - *r);
    }
    Ok(GmmFit {
        means: params.means,
        variances: params.vars,
        weights: params.weights,
        clean_prob: resp,
        log_likelihood: trace,
        degenerate: false,
    })
}

/// Clean/noisy assignment. Sample `i` is clean iff `1 - clean_prob[i] < threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub clean_prob: Vec<f64>,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub index: usize,
    pub clean_prob: f64,
    pub clean: bool,
}

impl SplitResult {
    pub fn from_probs(clean_prob: Vec<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "split threshold must be in (0,1), got {threshold}"
            )));
        }
        let (clean, noisy) = (0..clean_prob.len()).partition(|&i| 1.0 - clean_prob[i] < threshold);
        Ok(Self {
            clean_prob,
            clean,
            noisy,
            threshold,
        })
    }

    /// Everything clean; used when a split comes out one-sided.
    pub fn all_clean(n: usize, threshold: f64) -> Self {
        Self {
            clean_prob: vec![1.0; n],
            clean: (0..n).collect(),
            noisy: Vec::new(),
            threshold,
        }
    }

    pub fn is_clean_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.clean_prob.len()];
        self.clean.iter().for_each(|&i| mask[i] = true);
        mask
    }

    pub fn records(&self) -> Vec<SplitRecord> {
        let mask = self.is_clean_mask();
        self.clean_prob
            .iter()
            .zip(mask)
            .enumerate()
            .map(|(index, (&clean_prob, clean))| SplitRecord {
                index,
                clean_prob,
                clean,
            })
            .collect()
    }
}

pub fn split(fit: &GmmFit, threshold: f64) -> Result<SplitResult> {
    SplitResult::from_probs(fit.clean_prob.clone(), threshold)
}

/// Which top-k sets a sample contributes once its cumulative mass crosses the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recording {
    /// Every `k <= K` whose top-k mass reaches the threshold.
    #[default]
    EveryK,
    /// Only the smallest such `k`.
    FirstK,
}

/// Frequency table of candidate class subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionInference {
    pub threshold: f64,
    pub max_size: usize,
    pub recording: Recording,
    pub counts: BTreeMap<Vec<usize>, usize>,
}

impl PartitionInference {
    pub fn new(threshold: f64, max_size: usize, recording: Recording) -> Result<Self> {
        if max_size < 1 {
            return Err(Error::invalid("subset size limit must be at least 1"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "subset threshold must be in (0,1), got {threshold}"
            )));
        }
        Ok(Self {
            threshold,
            max_size,
            recording,
            counts: BTreeMap::new(),
        })
    }

    pub fn observe(&mut self, probs: &[f64]) {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        // descending by probability, ties to the smaller class
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        for k in 1..=self.max_size.min(probs.len()) {
            mass += probs[order[k - 1]];
            if mass >= self.threshold {
                let mut set = order[..k].to_vec();
                set.sort_unstable();
                *self.counts.entry(set).or_insert(0) += 1;
                if self.recording == Recording::FirstK {
                    break;
                }
            }
        }
    }

    /// Greedy non-overlapping selection by frequency; classes never selected
    /// form one final subset. Ties go to the smaller, then lexicographically
    /// first, subset.
    pub fn finish(&self, num_classes: usize) -> ClassPartition {
        let mut ranked: Vec<(&Vec<usize>, usize)> = self.counts.iter().map(|(s, &c)| (s, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(b.0)));
        let mut taken = vec![false; num_classes];
        let mut subsets = Vec::new();
        for (set, _) in ranked {
            if set.iter().any(|&c| c >= num_classes || taken[c]) {
                continue;
            }
            set.iter().for_each(|&c| taken[c] = true);
            subsets.push(set.clone());
        }
        let rest: Vec<usize> = (0..num_classes).filter(|&c| !taken[c]).collect();
        if !rest.is_empty() {
            subsets.push(rest);
        }
        ClassPartition { subsets }
    }
}

/// Infers a class partition from prediction rows.
pub fn infer_partition(
    probs: &Tensor,
    threshold: f64,
    max_size: usize,
    recording: Recording,
) -> Result<ClassPartition> {
    let mut state = PartitionInference::new(threshold, max_size, recording)?;
    for row in probs.row_iter() {
        state.observe(row);
    }
    Ok(state.finish(probs.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_values() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.25, 0.5, 0.25], vec![1.0 / 3.0; 3]]).unwrap();
        let l = per_sample_ce(&p, &[1, 0, 2]).unwrap();
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 4f64.ln()).abs() < 1e-15);
        assert!((l[2] - 3f64.ln()).abs() < 1e-15);
        assert!(per_sample_ce(&p, &[3, 0, 0]).is_err());
        let zero = per_sample_ce(&p, &[0, 0, 0]).unwrap()[0];
        assert!((zero - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_losses() {
        let fit = fit_gmm_em(&[0.7; 10], EmSettings::default()).unwrap();
        assert!(fit.degenerate);
        assert!(fit.clean_prob.iter().all(|&g| g == 1.0));
        assert!(fit_gmm_em(&[1.0, 2.0, 3.0], EmSettings::default()).is_err());
    }

    #[test]
    fn clean_component_has_smaller_mean() {
        let mut xs: Vec<f64> = (0..50).map(|i| 3.0 + 0.01 * i as f64).collect();
        xs.extend((0..50).map(|i| 0.2 + 0.01 * i as f64));
        let fit = fit_gmm_em(&xs, EmSettings::default()).unwrap();
        assert!(fit.means[0] < fit.means[1]);
        assert!(fit.clean_prob[60] > 0.99 && fit.clean_prob[0] < 0.01);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn split_thresholds() {
        let s = SplitResult::from_probs(vec![0.9, 0.2], 0.5).unwrap();
        assert_eq!((s.clean.clone(), s.noisy.clone()), (vec![0], vec![1]));
        let all = SplitResult::from_probs(vec![0.9, 0.2, 0.01], 1.0 - 1e-12).unwrap();
        assert_eq!(all.clean.len(), 3);
        assert!(SplitResult::from_probs(vec![0.5], 1.0).is_err());
        assert!(SplitResult::from_probs(vec![0.5], 0.0).is_err());
    }

    fn population() -> Tensor {
        let mut rows = Vec::new();
        for _ in 0..50 {
            rows.push(vec![0.55, 0.40, 0.03, 0.02]);
            rows.push(vec![0.40, 0.55, 0.03, 0.02]);
        }
        for _ in 0..100 {
            rows.push(vec![0.02, 0.03, 0.48, 0.47]);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn hand_traced_pairs() {
        let p = infer_partition(&population(), 0.9, 2, Recording::EveryK).unwrap();
        assert_eq!(p.canonical().subsets, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn confident_rows_give_singletons() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let mut r = vec![0.01; 4];
                r[i % 4] = 0.97;
                r
            })
            .collect();
        let p = infer_partition(&Tensor::from_rows(&rows).unwrap(), 0.9, 1, Recording::EveryK).unwrap();
        assert_eq!(p.canonical(), ClassPartition::singletons(4));
    }

    #[test]
    fn nothing_crosses_gives_one_subset() {
        let rows = vec![vec![0.25; 4]; 10];
        let p = infer_partition(&Tensor::from_rows(&rows).unwrap(), 0.9, 3, Recording::EveryK).unwrap();
        assert_eq!(p.subsets, vec![vec![0, 1, 2, 3]]);
        assert!(infer_partition(&Tensor::from_rows(&rows).unwrap(), 0.9, 0, Recording::EveryK).is_err());
        assert!(infer_partition(&Tensor::from_rows(&rows).unwrap(), 1.0, 2, Recording::EveryK).is_err());
    }

    #[test]
    fn recording_trace() {
        let mut every = PartitionInference::new(0.9, 3, Recording::EveryK).unwrap();
        let mut first = PartitionInference::new(0.9, 3, Recording::FirstK).unwrap();
        let row = [0.05, 0.92, 0.02, 0.01];
        every.observe(&row);
        first.observe(&row);
        let keys: Vec<_> = every.counts.keys().cloned().collect();
        assert_eq!(keys, vec![vec![0, 1], vec![0, 1, 2], vec![1]]);
        assert_eq!(first.counts.keys().cloned().collect::<Vec<_>>(), vec![vec![1]]);
    }
}

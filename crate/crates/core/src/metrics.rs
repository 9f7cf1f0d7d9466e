//! Representation and detector diagnostics.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ClassPartition;
use crate::detector::SplitResult;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_ALIGNMENT_PAIRS: usize = 200;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of `||a_i - b_i||^beta` over paired rows.
pub fn alignment(a: &Tensor, b: &Tensor, beta: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "alignment",
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!(
            "alignment exponent must be positive, got {beta}"
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::invalid("alignment needs at least one pair"));
    }
    let total: f64 = (0..n).map(|i| sq_dist(a.row(i), b.row(i)).sqrt().powf(beta)).sum();
    Ok(total / n as f64)
}

/// Per-class alignment over `pairs` random same-class pairs (distinct
/// members, drawn with replacement). Classes with fewer than two members get
/// `None`.
pub fn intra_class_alignment(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    pairs: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<Vec<Option<f64>>> {
    if labels.len() != features.rows() {
        return Err(Error::invalid("labels and features differ in length"));
    }
    if pairs == 0 {
        return Err(Error::invalid("alignment needs at least one pair"));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        members[l].push(i);
    }
    members
        .iter()
        .map(|m| {
            if m.len() < 2 {
                return Ok(None);
            }
            let (mut left, mut right) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
            for _ in 0..pairs {
                let i = rng.random_range(0..m.len());
                let mut j = rng.random_range(0..m.len() - 1);
                if j >= i {
                    j += 1;
                }
                left.push(m[i]);
                right.push(m[j]);
            }
            alignment(&features.take_rows(&left), &features.take_rows(&right), beta).map(Some)
        })
        .collect()
}

/// Majority vote among the `k` nearest training rows (Euclidean). Vote ties
/// go to the smallest class; distance ties to the lower training index.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = train.rows();
    if n == 0 || query.rows() == 0 {
        return Err(Error::invalid("kNN needs nonempty train and query sets"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in 1..={n}, got {k}")));
    }
    if train_labels.len() != n || train.cols() != query.cols() {
        return Err(Error::invalid("kNN: mismatched labels or feature dimensions"));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    Ok(query
        .row_iter()
        .map(|q| {
            dists.clear();
            dists.extend(train.row_iter().enumerate().map(|(i, t)| (sq_dist(q, t), i)));
            dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, i) in &dists[..k] {
                votes[train_labels[i]] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn knn_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test_labels.len() != test.rows() {
        return Err(Error::invalid("test labels and features differ in length"));
    }
    let pred = knn_predict(train, train_labels, test, k)?;
    Ok(accuracy(&pred, test_labels))
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Mean silhouette with Euclidean distance. A sample alone in its class
/// scores 0, as does a sample with `a = b = 0`.
pub fn silhouette(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::invalid("labels and features differ in length"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two classes"));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; classes];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = features.row(i);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(xi, features.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Area under the ROC curve of `score` for separating `positive` from the
/// rest, by the rank statistic with ties counted half. `None` if either
/// group is empty.
pub fn roc_auc(score: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if score.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && score[order[j + 1]] == score[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuality {
    /// Fraction of samples put in the clean set that are truly clean.
    pub precision: f64,
    /// Fraction of truly clean samples put in the clean set.
    pub recall: f64,
    pub auc: Option<f64>,
    pub split_accuracy: f64,
}

/// Scores clean-set membership against `noise_mask` (`true` = label flipped).
/// Empty denominators give 0.
pub fn detection_quality(split: &SplitResult, noise_mask: &[bool]) -> Result<DetectionQuality> {
    let n = split.clean_prob.len();
    if noise_mask.len() != n {
        return Err(Error::invalid(format!(
            "noise mask has {} entries for {n} samples",
            noise_mask.len()
        )));
    }
    let predicted = split.is_clean_mask();
    let truly: Vec<bool> = noise_mask.iter().map(|m| !m).collect();
    let tp = predicted.iter().zip(&truly).filter(|(p, t)| **p && **t).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let agree = predicted.iter().zip(&truly).filter(|(p, t)| p == t).count();
    Ok(DetectionQuality {
        precision: ratio(tp, predicted.iter().filter(|&&p| p).count()),
        recall: ratio(tp, truly.iter().filter(|&&t| t).count()),
        auc: roc_auc(&split.clean_prob, &truly)?,
        split_accuracy: ratio(agree, n),
    })
}

/// Average class probabilities over `models`.
pub fn ensemble_proba(models: &[&ModelParams], x: &Tensor) -> Result<Tensor> {
    let (first, rest) = models.split_first().ok_or_else(|| Error::invalid("no models given"))?;
    let mut acc = first.predict_proba(x)?;
    for m in rest {
        let p = m.predict_proba(x)?;
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    let k = models.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

/// Argmax accuracy of the averaged prediction; ties go to the smallest class.
pub fn test_accuracy(models: &[&ModelParams], x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::invalid("labels and inputs differ in length"));
    }
    Ok(accuracy(&ensemble_proba(models, x)?.argmax_rows(), labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub knn_k: usize,
    pub alignment_pairs: usize,
    pub alignment_beta: f64,
    /// Also compute the quadratic-cost silhouette.
    pub silhouette: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            knn_k: DEFAULT_KNN_K,
            alignment_pairs: DEFAULT_ALIGNMENT_PAIRS,
            alignment_beta: 2.0,
            silhouette: true,
        }
    }
}

/// Diagnostics of the first model's representation: kNN on encoder
/// embeddings, alignment of unit-norm projections, silhouette of embeddings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub knn_accuracy: f64,
    pub alignment: Vec<Option<f64>>,
    pub mean_alignment: f64,
    pub silhouette: Option<f64>,
}

pub fn representation_report(
    model: &ModelParams,
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    settings: &EvalSettings,
    rng: &mut Rng,
) -> Result<RepresentationReport> {
    let emb_train = model.embed(train)?;
    let emb_test = model.embed(test)?;
    let knn = knn_accuracy(&emb_train, train_labels, &emb_test, test_labels, settings.knn_k)?;
    let proj = model.project_features(test)?;
    let classes = model.arch().num_classes;
    let alignment = intra_class_alignment(
        &proj,
        test_labels,
        classes,
        settings.alignment_pairs,
        settings.alignment_beta,
        rng,
    )?;
    let present: Vec<f64> = alignment.iter().flatten().copied().collect();
    let mean_alignment = present.iter().sum::<f64>() / present.len().max(1) as f64;
    let silhouette = if settings.silhouette {
        Some(silhouette(&emb_test, test_labels)?)
    } else {
        None
    };
    Ok(RepresentationReport {
        knn_accuracy: knn,
        alignment,
        mean_alignment,
        silhouette,
    })
}

/// One record per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: String,
    pub epoch: usize,
    pub test_accuracy: Option<f64>,
    pub detection: Option<DetectionQuality>,
    pub representation: Option<RepresentationReport>,
    pub partition: Option<ClassPartition>,
    pub losses: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn alignment_values() {
        let a = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(alignment(&a, &a, 2.0).unwrap(), 0.0);
        let b = t(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert!((alignment(&a, &b, 2.0).unwrap() - 4.0).abs() < 1e-12);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(alignment(&empty, &empty, 2.0).is_err());
    }

    #[test]
    fn knn_basics() {
        let train = t(&[vec![0.0], vec![1.0], vec![10.0]]);
        let labels = [0, 1, 2];
        assert_eq!(knn_predict(&train, &labels, &t(&[vec![1.0]]), 1).unwrap(), vec![1]);
        // three-way tie goes to class 0
        assert_eq!(knn_predict(&train, &labels, &t(&[vec![9.0]]), 3).unwrap(), vec![0]);
        let same = [4, 4, 4];
        assert_eq!(knn_predict(&train, &same, &t(&[vec![-3.0]]), 3).unwrap(), vec![4]);
        assert!(knn_predict(&train, &labels, &t(&[vec![0.0]]), 4).is_err());
        assert!(knn_predict(&train, &labels, &t(&[vec![0.0]]), 0).is_err());
    }

    #[test]
    fn silhouette_conventions() {
        let x = t(&[vec![0.0], vec![0.1], vec![100.0], vec![100.1]]);
        assert!(silhouette(&x, &[0, 0, 1, 1]).unwrap() > 0.99);
        assert_eq!(
            silhouette(&x, &[0, 0, 1, 1]).unwrap(),
            silhouette(&x, &[1, 1, 0, 0]).unwrap()
        );
        let same = t(&vec![vec![1.0]; 4]);
        assert_eq!(silhouette(&same, &[0, 0, 1, 1]).unwrap(), 0.0);
        // singleton class contributes 0
        let s = silhouette(&t(&[vec![0.0], vec![0.0], vec![5.0]]), &[0, 0, 1]).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        assert!(silhouette(&x, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            Some(1.0)
        );
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn detection_counts() {
        let split = SplitResult::from_probs(vec![0.9, 0.8, 0.2, 0.6], 0.5).unwrap();
        let q = detection_quality(&split, &[false, false, true, true]).unwrap();
        assert!((q.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(q.recall, 1.0);
        assert_eq!(q.auc, Some(1.0));
        assert_eq!(q.split_accuracy, 0.75);
        assert!(detection_quality(&split, &[false]).is_err());
    }

    #[test]
    fn intra_class_pairs_are_distinct_members() {
        let x = t(&[vec![0.0], vec![1.0], vec![5.0], vec![5.0], vec![9.0]]);
        let a = intra_class_alignment(&x, &[0, 0, 1, 1, 2], 3, 50, 2.0, &mut seeded(0)).unwrap();
        assert_eq!(a, vec![Some(1.0), Some(0.0), None]);
    }
}

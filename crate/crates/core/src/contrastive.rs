//! Contrastive objectives on the unit sphere: single-anchor InfoNCE and
//! supervised contrast, their in-batch versions, mixed-view construction and
//! the composite losses of both training stages.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ClassPartition;
use crate::error::{Error, Result};
use crate::model::ModelVars;
use crate::rng::{Rng, SymmetricBeta};
use crate::tensor::{Tape, Tensor, Var};

/// Added to logits that must not take part in a softmax. Large enough that
/// `exp` underflows to exactly zero, so masked entries contribute nothing.
const EXCLUDED: f64 = -1e9;

/// Which views serve as negatives in batch losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeConvention {
    /// Every view anchors; negatives are all other views of both kinds.
    #[default]
    Symmetric,
    /// Only first views anchor; negatives are the other first views.
    FirstView,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Normal,
    Asym,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub mix_alpha: f64,
    /// Weight of the mixed-view loss during pretraining.
    pub pretrain_mix_weight: f64,
    pub cl_weight: f64,
    pub mix_weight: f64,
    pub asym_weight: f64,
    pub negatives: NegativeConvention,
    /// Add the clean-batch mixed-view loss a second time, unweighted, in asym mode.
    pub double_count_mix: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            mix_alpha: 2.0,
            pretrain_mix_weight: 0.2,
            cl_weight: 1.0,
            mix_weight: 0.2,
            asym_weight: 0.2,
            negatives: NegativeConvention::Symmetric,
            double_count_mix: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.mix_alpha > 0.0) {
            return Err(Error::invalid(format!(
                "mix_alpha must be positive, got {}",
                self.mix_alpha
            )));
        }
        for (name, w) in [
            ("pretrain_mix_weight", self.pretrain_mix_weight),
            ("cl_weight", self.cl_weight),
            ("mix_weight", self.mix_weight),
            ("asym_weight", self.asym_weight),
        ] {
            if !(w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `-sum_j w_j log softmax(anchor . c_j / tau)` over candidate rows.
fn anchor_loss(tape: &mut Tape, anchor: Var, candidates: Var, weights: Vec<f64>, tau: f64) -> Result<Var> {
    let n = weights.len();
    let ct = tape.transpose(candidates)?;
    let sims = tape.matmul(anchor, ct)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let ls = tape.log_softmax_rows(scaled)?;
    tape.masked_sum(ls, Tensor::new(vec![1, n], weights)?)
}

fn stack(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    if blocks.len() == 1 {
        Ok(blocks[0])
    } else {
        tape.concat_rows(blocks)
    }
}

/// InfoNCE for one anchor row `[1, d]`, one positive row and any number of
/// negative blocks `[k_i, d]`.
pub fn info_nce(tape: &mut Tape, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    if negatives.is_empty() {
        return Err(Error::invalid("info_nce needs at least one negative"));
    }
    let mut blocks = vec![positive];
    blocks.extend_from_slice(negatives);
    let cands = stack(tape, &blocks)?;
    let n = tape.value(cands).rows();
    let mut w = vec![0.0; n];
    w[0] = -1.0;
    anchor_loss(tape, anchor, cands, w, tau)
}

/// Supervised contrastive loss for one anchor: the mean over positives of
/// `-log(e^{s_p} / (sum_pos e^s + sum_neg e^s))`.
pub fn supcl(tape: &mut Tape, anchor: Var, positives: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let k1 = tape.value(positives).rows();
    let mut blocks = vec![positives];
    blocks.extend_from_slice(negatives);
    let cands = stack(tape, &blocks)?;
    let n = tape.value(cands).rows();
    let w = (0..n).map(|j| if j < k1 { -1.0 / k1 as f64 } else { 0.0 }).collect();
    anchor_loss(tape, anchor, cands, w, tau)
}

/// Batch contrastive loss where row `i` of `view1` and row `i` of `view2`
/// are positives and every other row is a negative, averaged over anchors.
pub fn nt_xent(tape: &mut Tape, view1: Var, view2: Var, tau: f64, convention: NegativeConvention) -> Result<Var> {
    check_temperature(tau)?;
    let (n, _) = tape.value(view1).dims2();
    if tape.value(view2).dims2().0 != n {
        return Err(Error::Shape {
            op: "nt_xent",
            shapes: vec![tape.value(view1).shape().to_vec(), tape.value(view2).shape().to_vec()],
        });
    }
    if n < 2 {
        return Err(Error::invalid("contrastive batch needs at least two pairs"));
    }
    match convention {
        NegativeConvention::Symmetric => {
            let z = tape.concat_rows(&[view1, view2])?;
            let m = 2 * n;
            let mut mask = Tensor::zeros(&[m, m]);
            let mut pick = Tensor::zeros(&[m, m]);
            for i in 0..m {
                mask.data_mut()[i * m + i] = EXCLUDED;
                pick.data_mut()[i * m + (i + n) % m] = -1.0 / m as f64;
            }
            masked_row_loss(tape, z, z, mask, pick, tau)
        }
        NegativeConvention::FirstView => {
            // columns: [view2 | view1]; keep only the matching view2 and the other view1 rows
            let cands = tape.concat_rows(&[view2, view1])?;
            let mut mask = Tensor::zeros(&[n, 2 * n]);
            let mut pick = Tensor::zeros(&[n, 2 * n]);
            for i in 0..n {
                for j in 0..n {
                    if j != i {
                        mask.data_mut()[i * 2 * n + j] = EXCLUDED;
                    }
                }
                mask.data_mut()[i * 2 * n + n + i] = EXCLUDED;
                pick.data_mut()[i * 2 * n + i] = -1.0 / n as f64;
            }
            masked_row_loss(tape, view1, cands, mask, pick, tau)
        }
    }
}

/// `sum(pick * log_softmax(a c^T / tau + mask))`
fn masked_row_loss(tape: &mut Tape, anchors: Var, cands: Var, mask: Tensor, pick: Tensor, tau: f64) -> Result<Var> {
    let ct = tape.transpose(cands)?;
    let sims = tape.matmul(anchors, ct)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let m = tape.constant(mask);
    let masked = tape.add(scaled, m)?;
    let ls = tape.log_softmax_rows(masked)?;
    tape.masked_sum(ls, pick)
}

/// In-batch supervised contrast: every row anchors, rows sharing its label are
/// positives, the rest negatives. Anchors without any positive are skipped.
pub fn supcl_batch(tape: &mut Tape, rows: Var, labels: &[usize], tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let (m, _) = tape.value(rows).dims2();
    if labels.len() != m {
        return Err(Error::invalid(format!("{} labels for {m} rows", labels.len())));
    }
    let positives: Vec<usize> = (0..m)
        .map(|i| (0..m).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&k| k > 0).count();
    if anchors == 0 {
        return Err(Error::invalid("no anchor in the batch has a positive"));
    }
    let mut mask = Tensor::zeros(&[m, m]);
    let mut pick = Tensor::zeros(&[m, m]);
    for i in 0..m {
        mask.data_mut()[i * m + i] = EXCLUDED;
        if positives[i] == 0 {
            continue;
        }
        let w = -1.0 / (positives[i] * anchors) as f64;
        for j in 0..m {
            if j != i && labels[j] == labels[i] {
                pick.data_mut()[i * m + j] = w;
            }
        }
    }
    masked_row_loss(tape, rows, rows, mask, pick, tau)
}

/// Mixed pairs `(i, j, lambda)` and the two mixed views they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct MixBatch {
    pub pairs: Vec<(usize, usize, f64)>,
    /// `lambda * view1[i] + (1 - lambda) * view1[j]` per pair.
    pub view1: Tensor,
    pub view2: Tensor,
}

impl MixBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds the mixed views for given pairs and coefficients.
    pub fn from_pairs(pairs: Vec<(usize, usize, f64)>, view1: &Tensor, view2: &Tensor) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no pairs to mix"));
        }
        if view1.shape() != view2.shape() {
            return Err(Error::Shape {
                op: "mix",
                shapes: vec![view1.shape().to_vec(), view2.shape().to_vec()],
            });
        }
        let (n, d) = view1.dims2();
        if let Some(&(i, j, _)) = pairs.iter().find(|&&(i, j, _)| i >= n || j >= n) {
            return Err(Error::invalid(format!("pair ({i}, {j}) out of range for batch of {n}")));
        }
        let mix = |src: &Tensor| {
            let mut data = Vec::with_capacity(pairs.len() * d);
            for &(i, j, l) in &pairs {
                data.extend(src.row(i).iter().zip(src.row(j)).map(|(a, b)| l * a + (1.0 - l) * b));
            }
            Tensor::new(vec![pairs.len(), d], data).expect("shape")
        };
        let (v1, v2) = (mix(view1), mix(view2));
        Ok(Self {
            pairs,
            view1: v1,
            view2: v2,
        })
    }
}

/// Random disjoint pairing of `0..n`; with odd `n` the leftover index is
/// paired with a random other one.
fn random_pairs(n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = idx.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if n % 2 == 1 && n > 1 {
        let last = idx[n - 1];
        let partner = idx[rng.random_range(0..n - 1)];
        pairs.push((last, partner));
    }
    pairs
}

fn with_coefficients(pairs: Vec<(usize, usize)>, alpha: f64, rng: &mut Rng) -> Result<Vec<(usize, usize, f64)>> {
    let beta = SymmetricBeta::new(alpha)?;
    Ok(pairs.into_iter().map(|(i, j)| (i, j, beta.sample(rng))).collect())
}

/// Randomly pairs the batch and mixes each pair's views with a fresh
/// `Beta(alpha, alpha)` coefficient shared by both views.
pub fn build_mix_pairs(view1: &Tensor, view2: &Tensor, alpha: f64, rng: &mut Rng) -> Result<MixBatch> {
    let n = view1.dims2().0;
    if n < 2 {
        return Err(Error::invalid(format!("mixing needs at least 2 samples, got {n}")));
    }
    let pairs = with_coefficients(random_pairs(n, rng), alpha, rng)?;
    MixBatch::from_pairs(pairs, view1, view2)
}

/// Pairs samples only within the partition subset of their label. Odd
/// clusters reuse one member; single-member clusters produce no pair.
pub fn asymix_pairs(labels: &[usize], partition: &ClassPartition, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); partition.subsets.len()];
    for (i, &y) in labels.iter().enumerate() {
        let s = partition
            .subset_of(y)
            .ok_or_else(|| Error::invalid(format!("label {y} is not covered by the partition")))?;
        clusters[s].push(i);
    }
    let mut out = Vec::new();
    for cluster in clusters {
        out.extend(
            random_pairs(cluster.len(), rng)
                .into_iter()
                .map(|(a, b)| (cluster[a], cluster[b])),
        );
    }
    Ok(out)
}

/// Mixed-view loss over a [`MixBatch`] given its projected views.
pub fn mixclr_loss(tape: &mut Tape, mixed1: Var, mixed2: Var, tau: f64, convention: NegativeConvention) -> Result<Var> {
    if tape.value(mixed1).dims2().0 < 2 {
        return Err(Error::invalid("mixed-view loss needs at least two mixed pairs"));
    }
    nt_xent(tape, mixed1, mixed2, tau, convention)
}

/// Projections `f(x) = g(phi(x))` of a batch.
pub fn project_batch(tape: &mut Tape, vars: &ModelVars, x: &Tensor) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let z = vars.encode(tape, xv)?;
    vars.project(tape, z)
}

/// A weighted loss and the values of its components, for logging.
pub struct LossTerms {
    pub total: Var,
    pub parts: Vec<(&'static str, f64)>,
}

fn combine(tape: &mut Tape, terms: &[(&'static str, f64, Var)]) -> Result<LossTerms> {
    let weighted: Vec<(f64, Var)> = terms.iter().map(|&(_, w, v)| (w, v)).collect();
    let total = match tape.weighted_sum(&weighted)? {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossTerms {
        total,
        parts: terms.iter().map(|&(n, _, v)| (n, tape.value(v).item())).collect(),
    })
}

/// Stage-one objective: plain contrast on the two views plus the weighted
/// mixed-view loss.
pub fn pretrain_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    view1: &Tensor,
    view2: &Tensor,
    mix: &MixBatch,
    cfg: &ContrastiveConfig,
) -> Result<LossTerms> {
    let f1 = project_batch(tape, vars, view1)?;
    let f2 = project_batch(tape, vars, view2)?;
    let cl = nt_xent(tape, f1, f2, cfg.temperature, cfg.negatives)?;
    let mut terms = vec![("cl", 1.0, cl)];
    if cfg.pretrain_mix_weight > 0.0 {
        let m1 = project_batch(tape, vars, &mix.view1)?;
        let m2 = project_batch(tape, vars, &mix.view2)?;
        let mixed = mixclr_loss(tape, m1, m2, cfg.temperature, cfg.negatives)?;
        terms.push(("mix", cfg.pretrain_mix_weight, mixed));
    }
    combine(tape, &terms)
}

/// Views of a clean batch for the stage-two contrastive objective.
pub struct CleanBatch<'a> {
    pub view1: &'a Tensor,
    pub view2: &'a Tensor,
    pub labels: &'a [usize],
    pub mix: &'a MixBatch,
}

/// Stage-two contrastive objective on the clean subset.
///
/// Normal mode: `cl_weight * SupCL + mix_weight * MixCLR`. Asym mode replaces
/// SupCL with self-supervised contrast and adds `asym_weight` times the
/// mixed-view loss over within-subset pairs. The asym term is dropped when the
/// batch yields fewer than two such pairs.
pub fn clplus_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &CleanBatch<'_>,
    cfg: &ContrastiveConfig,
    mode: Mode,
    partition: Option<&ClassPartition>,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let partition = match (mode, partition) {
        (Mode::Asym, None) => return Err(Error::invalid("asym mode needs a class partition")),
        (_, p) => p,
    };
    let tau = cfg.temperature;
    let mut terms = Vec::new();
    if cfg.cl_weight > 0.0 {
        let f1 = project_batch(tape, vars, batch.view1)?;
        let f2 = project_batch(tape, vars, batch.view2)?;
        let cl = match mode {
            Mode::Normal => {
                let rows = tape.concat_rows(&[f1, f2])?;
                let labels: Vec<usize> = batch.labels.iter().chain(batch.labels).copied().collect();
                ("supcl", supcl_batch(tape, rows, &labels, tau)?)
            }
            Mode::Asym => ("cl", nt_xent(tape, f1, f2, tau, cfg.negatives)?),
        };
        terms.push((cl.0, cfg.cl_weight, cl.1));
    }
    let needs_mix = cfg.mix_weight > 0.0 || (mode == Mode::Asym && cfg.double_count_mix);
    if needs_mix && batch.mix.len() >= 2 {
        let m1 = project_batch(tape, vars, &batch.mix.view1)?;
        let m2 = project_batch(tape, vars, &batch.mix.view2)?;
        let mixed = mixclr_loss(tape, m1, m2, tau, cfg.negatives)?;
        let weight = cfg.mix_weight
            + if mode == Mode::Asym && cfg.double_count_mix {
                1.0
            } else {
                0.0
            };
        terms.push(("mix", weight, mixed));
    }
    if let (Mode::Asym, Some(partition)) = (mode, partition) {
        if cfg.asym_weight > 0.0 {
            let pairs = asymix_pairs(batch.labels, partition, rng)?;
            if pairs.len() >= 2 {
                let pairs = with_coefficients(pairs, cfg.mix_alpha, rng)?;
                let hard = MixBatch::from_pairs(pairs, batch.view1, batch.view2)?;
                let h1 = project_batch(tape, vars, &hard.view1)?;
                let h2 = project_batch(tape, vars, &hard.view2)?;
                let asym = mixclr_loss(tape, h1, h2, tau, cfg.negatives)?;
                terms.push(("asym", cfg.asym_weight, asym));
            }
        }
    }
    combine(tape, &terms)
}
